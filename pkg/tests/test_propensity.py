import math

import numpy as np
import pytest

from ticde.core import CrossFitPlan, EtaPair, make_folds
from ticde.errors import ConfigInvalid, KTooLarge, SingularFit
from ticde.outcome import OutcomeModelSpec, Provenance, QHatTable, fit_crossfit_q, oracle_from_truth
from ticde.propensity import (
    PropensityKind,
    PropensitySpec,
    fit_crossfit_propensity,
    fit_propensity_on_raw_x,
    kernel_regress_2d,
    knn_classify_2d,
    silverman_bandwidth,
)

from conftest import make_dataset, random_dataset


def _pairs(coords, labels):
    return [(EtaPair(q0, q1), a) for (q0, q1), a in zip(coords, labels)]


class TestKernelRegress2d:
    def test_single_training_point(self):
        train = _pairs([(0.3, -0.2)], [1])
        assert kernel_regress_2d(train, EtaPair(5.0, 5.0), bandwidth=1.0) == 1.0

    def test_symmetry_gives_half(self):
        train = _pairs([(1.0, 0.0), (-1.0, 0.0)], [0, 1])
        assert kernel_regress_2d(train, EtaPair(0.0, 0.0), bandwidth=0.7) == 0.5

    def test_three_point_hand_weights(self):
        # Direct evaluation of the weighted-mean formula with bandwidth 1.
        coords = [(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)]
        labels = [1, 0, 1]
        query = EtaPair(0.5, 0.5)
        d2 = [(0.5) ** 2 + (0.5) ** 2, (0.5) ** 2 + (0.5) ** 2, (0.5) ** 2 + (1.5) ** 2]
        w = [math.exp(-v / 2.0) for v in d2]
        expected = (w[0] * 1 + w[1] * 0 + w[2] * 1) / sum(w)
        got = kernel_regress_2d(_pairs(coords, labels), query, bandwidth=1.0)
        assert abs(got - expected) < 1e-12

    def test_underflow_falls_back_to_training_mean(self):
        train = _pairs([(0.0, 0.0), (0.1, 0.0), (0.2, 0.0)], [1, 0, 0])
        got = kernel_regress_2d(train, EtaPair(1e9, 1e9), bandwidth=1e-3)
        assert got == pytest.approx(1.0 / 3.0)

    def test_bad_bandwidth(self):
        with pytest.raises(ConfigInvalid):
            kernel_regress_2d(_pairs([(0, 0)], [1]), EtaPair(0, 0), bandwidth=0.0)


class TestKnnClassify2d:
    def test_k_equals_train_size_gives_global_fraction(self):
        train = _pairs([(0, 0), (1, 1), (2, 2), (3, 3)], [1, 0, 0, 1])
        assert knn_classify_2d(train, EtaPair(9.0, 9.0), k=4) == 0.5

    def test_exact_match_k1(self):
        train = _pairs([(0, 0), (1, 1)], [0, 1])
        assert knn_classify_2d(train, EtaPair(0.0, 0.0), k=1) == 0.0

    def test_brute_force_sort_oracle(self):
        rng = np.random.default_rng(3)
        coords = rng.normal(size=(5, 2))
        labels = [1, 0, 1, 1, 0]
        query = EtaPair(0.1, -0.2)
        d2 = ((coords - [0.1, -0.2]) ** 2).sum(axis=1)
        order = sorted(range(5), key=lambda i: (d2[i], i))[:3]
        expected = np.mean([labels[i] for i in order])
        got = knn_classify_2d(_pairs(coords, labels), query, k=3)
        assert got == pytest.approx(expected)

    def test_tie_broken_by_lower_index(self):
        # Two training points equidistant from the query; k=1 must take the
        # first one.
        train = _pairs([(1.0, 0.0), (-1.0, 0.0)], [0, 1])
        assert knn_classify_2d(train, EtaPair(0.0, 0.0), k=1) == 0.0

    def test_k_too_large(self):
        train = _pairs([(0, 0)], [1])
        with pytest.raises(KTooLarge):
            knn_classify_2d(train, EtaPair(0, 0), k=2)


def _constant_eta_setup():
    # 100 units, 40 treated, 5 folds with identical arm counts per fold so
    # every training split has the same treated fraction (0.4).
    a = np.array(([1] * 8 + [0] * 12) * 5)
    n = len(a)
    ds = make_dataset(a, np.zeros(n), np.zeros((n, 1)))
    assignment = np.repeat(np.arange(5), 20)
    plan = CrossFitPlan(k=5, assignment=assignment)
    qhat = QHatTable(
        q0=np.full(n, 2.0), q1=np.full(n, 3.0), provenance=Provenance.INGESTED
    )
    return ds, plan, qhat


class TestFitCrossfitPropensity:
    def test_constant_eta_reduces_to_base_rate_exact_kinds(self):
        ds, plan, qhat = _constant_eta_setup()
        for spec in (
            PropensitySpec(kind=PropensityKind.KERNEL_REGRESSION),
            PropensitySpec(kind=PropensityKind.KNN, knn_k=80),
        ):
            table = fit_crossfit_propensity(qhat, ds, plan, spec)
            assert np.allclose(table.g, 0.4), spec.kind

    def test_constant_eta_reduces_to_base_rate_model_kinds(self):
        ds, plan, qhat = _constant_eta_setup()
        for spec, tol in (
            (PropensitySpec(kind=PropensityKind.LOGISTIC), 1e-4),
            (PropensitySpec(kind=PropensityKind.GP_DOT_PRODUCT_WHITE), 2e-2),
        ):
            table = fit_crossfit_propensity(qhat, ds, plan, spec)
            assert np.allclose(table.g, 0.4, atol=tol), spec.kind

    def test_knn1_memorization_is_clipped(self):
        # Distinct eta values duplicated across folds with matching labels:
        # 1-NN predictions are 0/1 before the clip, epsilon bounds after.
        eta = np.array([0.0, 1.0, 2.0, 3.0] * 2)
        a = np.array([1, 0, 1, 0] * 2)
        ds = make_dataset(a, np.zeros(8), np.zeros((8, 1)))
        plan = CrossFitPlan(k=2, assignment=np.array([0] * 4 + [1] * 4))
        qhat = QHatTable(q0=eta, q1=eta, provenance=Provenance.INGESTED)
        spec = PropensitySpec(kind=PropensityKind.KNN, knn_k=1, epsilon_clip=0.01)
        table = fit_crossfit_propensity(qhat, ds, plan, spec)
        assert table.pre_clip_min == 0.0 and table.pre_clip_max == 1.0
        assert set(np.round(table.g, 10)) == {0.01, 0.99}
        assert np.allclose(table.g, np.where(a == 1, 0.99, 0.01))
        assert table.clipped_fraction == 1.0

    def test_kernel_regression_recovers_known_propensity(self, oracle_sample_5k):
        s = oracle_sample_5k
        ds = s.dataset
        plan = make_folds(ds, 5, seed=4)
        qhat = fit_crossfit_q(
            ds, plan, OutcomeModelSpec.oracle_spec(oracle_from_truth(s.true_q0, s.true_q1))
        )
        table = fit_crossfit_propensity(qhat, ds, plan, PropensitySpec())
        assert np.mean(np.abs(table.g - s.true_g)) <= 0.05

    def test_logistic_separation_signaled(self):
        # Perfectly separable on eta and no regularization.
        rng = np.random.default_rng(8)
        n = 40
        a = np.array([1, 0] * (n // 2))
        eta = np.where(a == 1, 1.0, -1.0) + rng.uniform(-0.2, 0.2, size=n)
        ds = make_dataset(a, np.zeros(n), np.zeros((n, 1)))
        plan = CrossFitPlan(k=2, assignment=(np.arange(n) // 2) % 2)
        qhat = QHatTable(q0=eta, q1=eta, provenance=Provenance.INGESTED)
        spec = PropensitySpec(kind=PropensityKind.LOGISTIC, logistic_c=None)
        with pytest.raises(SingularFit):
            fit_crossfit_propensity(qhat, ds, plan, spec)

    def test_epsilon_clip_validation(self):
        with pytest.raises(ConfigInvalid):
            PropensitySpec(epsilon_clip=0.6).validate()


class TestPropensityProperties:
    def _random_case(self, rng):
        n = int(rng.integers(16, 40))
        while True:
            a = (rng.random(n) < 0.5).astype(int)
            if 1 < a.sum() < n - 1:
                break
        eta = rng.normal(size=(n, 2))
        ds = make_dataset(a, np.zeros(n), np.zeros((n, 1)))
        qhat = QHatTable(
            q0=eta[:, 0], q1=eta[:, 1], provenance=Provenance.INGESTED
        )
        plan = CrossFitPlan(k=2, assignment=rng.permutation(np.arange(n) % 2))
        for j in range(2):
            tr = plan.train_indices(j)
            if not (0 < ds.a[tr].sum() < tr.size):
                return None
        return ds, qhat, plan

    def test_output_ranges(self):
        rng = np.random.default_rng(31)
        specs = [
            PropensitySpec(),
            PropensitySpec(kind=PropensityKind.KNN, knn_k=3),
            PropensitySpec(kind=PropensityKind.LOGISTIC),
            PropensitySpec(kind=PropensityKind.GP_DOT_PRODUCT_WHITE, gp_noise=0.05),
        ]
        done = 0
        while done < 100:
            case = self._random_case(rng)
            if case is None:
                continue
            ds, qhat, plan = case
            spec = specs[done % len(specs)]
            table = fit_crossfit_propensity(qhat, ds, plan, spec)
            eps = spec.epsilon_clip
            assert np.all(table.g >= eps) and np.all(table.g <= 1 - eps)
            assert 0.0 <= table.pre_clip_min <= table.pre_clip_max <= 1.0
            done += 1

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(37)
        for _ in range(100):
            m = int(rng.integers(5, 20))
            coords = rng.normal(size=(m, 2))
            labels = rng.integers(0, 2, size=m).tolist()
            query = EtaPair(*rng.normal(size=2))
            train = _pairs(coords, labels)
            perm = rng.permutation(m)
            shuffled = [train[i] for i in perm]
            a = kernel_regress_2d(train, query, bandwidth=0.8)
            b = kernel_regress_2d(shuffled, query, bandwidth=0.8)
            assert abs(a - b) < 1e-12
            # knn equivariance holds when distances are distinct
            d2 = ((coords - query.as_array()) ** 2).sum(axis=1)
            if len(np.unique(np.round(d2, 12))) == m:
                k = int(rng.integers(1, m + 1))
                assert knn_classify_2d(train, query, k) == knn_classify_2d(
                    shuffled, query, k
                )

    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            m = int(rng.integers(3, 15))
            coords = rng.normal(size=(m, 2))
            labels = rng.integers(0, 2, size=m).tolist()
            flipped = [1 - v for v in labels]
            query = EtaPair(*rng.normal(size=2))
            k = int(rng.integers(1, m + 1))
            p = kernel_regress_2d(_pairs(coords, labels), query, bandwidth=1.1)
            q = kernel_regress_2d(_pairs(coords, flipped), query, bandwidth=1.1)
            assert abs((1.0 - p) - q) < 1e-12
            pk = knn_classify_2d(_pairs(coords, labels), query, k)
            qk = knn_classify_2d(_pairs(coords, flipped), query, k)
            assert abs((1.0 - pk) - qk) < 1e-12

    def test_crossfit_honesty(self):
        # Flipping a label inside fold j never moves fold-j predictions.
        rng = np.random.default_rng(43)
        checked = 0
        while checked < 100:
            case = self._random_case(rng)
            if case is None:
                continue
            ds, qhat, plan = case
            spec = PropensitySpec()
            base = fit_crossfit_propensity(qhat, ds, plan, spec)
            j = int(rng.integers(plan.k))
            fold = plan.fold_indices(j)
            i = int(rng.choice(fold))
            a2 = np.array(ds.a)
            a2[i] = 1 - a2[i]
            ds2 = make_dataset(a2, ds.y, ds.x)
            tr = plan.train_indices(j)
            if not (0 < ds2.a[tr].sum() < tr.size):
                continue
            try:
                bumped = fit_crossfit_propensity(qhat, ds2, plan, spec)
            except Exception:
                continue
            assert np.allclose(base.g[fold], bumped.g[fold])
            checked += 1


class TestRawXDiagnostic:
    def test_raw_x_requires_covariates(self):
        ds = make_dataset([1, 0, 1, 0], np.zeros(4))
        plan = CrossFitPlan(k=2, assignment=np.array([0, 0, 1, 1]))
        with pytest.raises(ConfigInvalid):
            fit_propensity_on_raw_x(ds, plan, PropensitySpec())

    def test_separable_covariates_mostly_clip(self):
        rng = np.random.default_rng(51)
        n = 400
        a = np.array([1, 0] * (n // 2))
        x = np.where(a[:, None] == 1, 1.0, -1.0) + rng.uniform(
            -0.3, 0.3, size=(n, 2)
        )
        ds = make_dataset(a, rng.normal(size=n), x)
        plan = make_folds(ds, 4, seed=2)
        table = fit_propensity_on_raw_x(ds, plan, PropensitySpec())
        assert table.clipped_fraction > 0.5


def test_silverman_bandwidth_decreases_with_n():
    assert silverman_bandwidth(100, 2) > silverman_bandwidth(10000, 2) > 0
