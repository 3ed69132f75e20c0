"""Semi-synthetic data generator with known ground truth.

Covariates are built from structured numeric blocks standing in for the
parts of a text that are driven by the treatment, by the treatment and the
confounder jointly, and by the confounder alone.  The treatment block makes
treatment perfectly recoverable from the covariates (the apparent overlap
violation), while overlap still holds at the level of the 2-D outcome
representation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .errors import ConfigInvalid, LengthMismatch, MissingId, SchemaError

TRUTH_KEYS = ("beta_a", "ids", "c", "true_q0", "true_q1", "true_g")


@dataclass(frozen=True)
class SimConfig:
    """Generator parameters.

    The outcome is ``y = beta_a * a + beta_c * (pi(c) - beta_o) + gamma * N(0,1)``
    with ``pi(0) = pi0``, ``pi(1) = pi1`` and ``beta_o = E[pi(C)]``, so the
    confounding term is centered and the true controlled direct effect is
    exactly ``beta_a``.
    """

    beta_a: float = 1.0
    beta_c: float = 50.0
    gamma: float = 1.0
    pi0: float = 0.8
    pi1: float = 0.6
    pc: float = 0.5
    n: int = 10685
    d_signal: int = 2
    d_noise: int = 4
    jitter: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("pi0", "pi1", "pc"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigInvalid(f"{name} must lie in (0, 1), got {v}")
        if not self.gamma > 0:
            raise ConfigInvalid(f"gamma must be > 0, got {self.gamma}")
        if self.n < 10:
            raise ConfigInvalid(f"n must be >= 10, got {self.n}")
        if self.d_signal < 1:
            raise ConfigInvalid(f"d_signal must be >= 1, got {self.d_signal}")
        if self.d_noise < 0:
            raise ConfigInvalid(f"d_noise must be >= 0, got {self.d_noise}")
        # Larger jitter would let the treatment block change sign.
        if not (0.0 <= self.jitter <= 0.5):
            raise ConfigInvalid(f"jitter must lie in [0, 0.5], got {self.jitter}")

    @property
    def beta_o(self) -> float:
        return self.pi0 * (1.0 - self.pc) + self.pi1 * self.pc

    @property
    def d(self) -> int:
        return 3 * self.d_signal + self.d_noise


@dataclass(frozen=True)
class SimSample:
    """A generated dataset plus its latent state and ground truth."""

    dataset: Dataset
    c: np.ndarray
    true_q0: np.ndarray
    true_q1: np.ndarray
    true_g: np.ndarray
    config: SimConfig

    def __post_init__(self):
        for name in ("c", "true_q0", "true_q1", "true_g"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def true_cde(self) -> float:
        return self.config.beta_a

    # Column ranges of the covariate blocks.
    @property
    def treat_block(self) -> slice:
        return slice(0, self.config.d_signal)

    @property
    def pair_block(self) -> slice:
        return slice(self.config.d_signal, 2 * self.config.d_signal)

    @property
    def conf_block(self) -> slice:
        return slice(2 * self.config.d_signal, 3 * self.config.d_signal)

    @property
    def noise_block(self) -> slice:
        return slice(3 * self.config.d_signal, 3 * self.config.d_signal + self.config.d_noise)


def simulate(config: SimConfig) -> SimSample:
    """Draw one sample; byte-identical for identical configs.

    Block construction (draws happen in this order, all from one seeded
    generator): latent confounder c, treatment a, treatment block,
    pair block, confounder block, nuisance block, outcome noise.

    The treatment block uses sign codes (+-0.5 plus uniform jitter), so
    treatment is recoverable from it exactly.  The pair and confounder
    blocks encode the confounder in the *radius* of a 2-D ring (random
    angle, radius 0.5 for c=0 vs 1.0 for c=1, uniform radius jitter), with
    the pair block's radius additionally shifted by the treatment.  The
    ring boundary at 0.75 is the same in both arms, so arm-conditional
    models transfer to counterfactual queries, yet axis-aligned learners
    can only partially pool the curved boundary, leaving a shared,
    representation-visible estimation error at realistic sample sizes.
    With a single signal dimension per block, linear sign codes are used
    instead (the pair block then scales the confounder code by the
    treatment, keeping the sign boundary arm-invariant).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, ds, dn = config.n, config.d_signal, config.d_noise
    c = (rng.random(n) < config.pc).astype(np.int8)
    pi_c = np.where(c == 1, config.pi1, config.pi0)
    a = (rng.random(n) < pi_c).astype(np.int8)
    sign_a = 2.0 * a - 1.0
    sign_c = 2.0 * c - 1.0

    def linear_block(code: np.ndarray, width: int) -> np.ndarray:
        jit = rng.uniform(-config.jitter, config.jitter, size=(n, width))
        return code[:, None] + jit

    def ring_block(radius_code: np.ndarray, width: int, arm_shift: float) -> np.ndarray:
        # First two dims carry the ring; extra dims are jitter only.
        # Radius jitter halfwidths keep the c-annuli adjacent but disjoint.
        jitter_scale = 0.3 if arm_shift else 0.5
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = (
            radius_code
            + arm_shift * sign_a
            + rng.uniform(-jitter_scale * config.jitter, jitter_scale * config.jitter, size=n)
        )
        out = np.empty((n, width))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        if width > 2:
            out[:, 2:] = rng.uniform(
                -config.jitter, config.jitter, size=(n, width - 2)
            )
        return out

    radius_code = 0.5 + 0.5 * c  # 0.5 for c=0, 1.0 for c=1; boundary 0.75
    treat_block = linear_block(0.5 * sign_a, ds)
    if ds >= 2:
        pair_block = ring_block(radius_code, ds, arm_shift=0.1)
        conf_block = ring_block(radius_code, ds, arm_shift=0.0)
    else:
        pair_block = linear_block((0.5 + 0.1 * sign_a) * sign_c, ds)
        conf_block = linear_block(0.5 * sign_c, ds)
    noise_block = linear_block(np.zeros(n), dn)
    x = np.hstack([treat_block, pair_block, conf_block, noise_block])

    confounding = config.beta_c * (pi_c - config.beta_o)
    y = config.beta_a * a + confounding + config.gamma * rng.standard_normal(n)
    ids = tuple(f"u{i:06d}" for i in range(n))
    dataset = Dataset(ids=ids, a=a, y=y, x=x)
    return SimSample(
        dataset=dataset,
        c=c,
        true_q0=confounding.copy(),
        true_q1=config.beta_a + confounding,
        true_g=pi_c.astype(float),
        config=config,
    )


def _one_nn_labels(
    train_x: np.ndarray, train_a: np.ndarray, query_x: np.ndarray
) -> np.ndarray:
    """1-NN predictions; argmin takes the lowest training index on ties."""
    out = np.empty(len(query_x), dtype=train_a.dtype)
    chunk = 1024
    for start in range(0, len(query_x), chunk):
        q = query_x[start : start + chunk]
        d2 = ((q[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(q)] = train_a[np.argmin(d2, axis=1)]
    return out


def deterministic_treatment_check(sample: SimSample) -> bool:
    """True when treatment is recoverable from the treatment block alone:
    a 1-NN classifier gets 100% training accuracy and at least 99.9% accuracy
    on an even/odd index split."""
    xa = sample.dataset.x[:, sample.treat_block]
    a = np.asarray(sample.dataset.a)
    if xa.shape[1] == 0:
        return False
    train_acc = float(np.mean(_one_nn_labels(xa, a, xa) == a))
    even = np.arange(len(a)) % 2 == 0
    if not even.any() or even.all():
        return False
    held = _one_nn_labels(xa[even], a[even], xa[~even])
    held_acc = float(np.mean(held == a[~even]))
    return train_acc == 1.0 and held_acc >= 0.999


# ---------------------------------------------------------------------------
# Truth sidecar JSON and helpers
# ---------------------------------------------------------------------------

def write_truth_json(sample: SimSample, path) -> None:
    payload = {
        "beta_a": sample.config.beta_a,
        "ids": list(sample.dataset.ids),
        "c": [int(v) for v in sample.c],
        "true_q0": [float(v) for v in sample.true_q0],
        "true_q1": [float(v) for v in sample.true_q1],
        "true_g": [float(v) for v in sample.true_g],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def read_truth_json(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    missing = [k for k in TRUTH_KEYS if k not in payload]
    if missing:
        raise SchemaError(f"{path}: truth file missing key {missing[0]!r}")
    sizes = {len(payload[k]) for k in TRUTH_KEYS if k != "beta_a"}
    if len(sizes) != 1:
        raise SchemaError(f"{path}: truth arrays have inconsistent lengths")
    return payload


def truth_to_qhat_csv(truth_path, out_path) -> None:
    """Materialize the true outcome pair as an ingestable prediction file."""
    truth = read_truth_json(truth_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "q0", "q1"])
        for uid, q0, q1 in zip(truth["ids"], truth["true_q0"], truth["true_q1"]):
            writer.writerow([uid, repr(float(q0)), repr(float(q1))])


def truth_g_for_dataset(dataset: Dataset, truth: dict) -> np.ndarray:
    """Per-unit true treatment probabilities aligned to dataset order."""
    lookup = dict(zip(truth["ids"], truth["true_g"]))
    missing = [uid for uid in dataset.ids if uid not in lookup]
    if missing:
        raise MissingId(f"truth file has no entry for id {missing[0]!r}")
    return np.array([float(lookup[uid]) for uid in dataset.ids])
