import numpy as np
import pytest

from ticde.core import CrossFitPlan, make_folds
from ticde.errors import (
    ConfigInvalid,
    DegenerateFold,
    DuplicateId,
    LengthMismatch,
    MissingId,
    NonFinite,
    SchemaError,
)
from ticde.outcome import (
    OutcomeModelSpec,
    Provenance,
    QHatTable,
    fit_crossfit_q,
    ingest_qhat,
    oracle_from_truth,
    q_loss,
    write_qhat_csv,
)

from conftest import make_dataset, random_dataset


def _ols_fit_predict(x_train, y_train, x_query):
    # Independent least-squares oracle via the normal equations.
    zt = np.column_stack([np.ones(len(x_train)), x_train])
    zq = np.column_stack([np.ones(len(x_query)), x_query])
    beta, *_ = np.linalg.lstsq(zt, y_train, rcond=None)
    return zq @ beta


class TestFitCrossfitQ:
    def test_oracle_passthrough(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, n=30)
        plan = make_folds(ds, 3, seed=0)
        true_q0 = rng.normal(size=30)
        true_q1 = rng.normal(size=30)
        spec = OutcomeModelSpec.oracle_spec(oracle_from_truth(true_q0, true_q1))
        table = fit_crossfit_q(ds, plan, spec)
        assert np.array_equal(table.q0, true_q0)
        assert np.array_equal(table.q1, true_q1)
        assert table.provenance is Provenance.CROSS_FITTED

    def test_knn1_on_duplicates(self):
        # Covariates duplicated across the two folds with constant outcome
        # per (arm, x): 1-NN must return that constant.
        x = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        a = np.array([1, 0, 0, 1, 1, 0, 0, 1])
        y = 10.0 * a + x
        ds = make_dataset(a, y, x)
        plan = CrossFitPlan(k=2, assignment=np.array([0, 0, 0, 0, 1, 1, 1, 1]))
        table = fit_crossfit_q(ds, plan, OutcomeModelSpec.knn(knn_k=1))
        assert np.allclose(table.q1, 10.0 + x)
        assert np.allclose(table.q0, x)

    def test_ridge_lambda_zero_matches_least_squares(self):
        # y = 2 x0 + a exactly; lambda 0 must reproduce plain least squares
        # fold by fold, and the mean predicted effect must sit at 1.
        rng = np.random.default_rng(7)
        n = 200
        a = (rng.random(n) < 0.5).astype(int)
        x = rng.uniform(-2, 2, size=(n, 1))
        y = 2.0 * x[:, 0] + a
        ds = make_dataset(a, y, x)
        plan = make_folds(ds, 4, seed=3)
        table = fit_crossfit_q(ds, plan, OutcomeModelSpec.ridge(ridge_lambda=0.0))
        for j in range(plan.k):
            fold = plan.fold_indices(j)
            train = plan.train_indices(j)
            for arm, col in ((0, table.q0), (1, table.q1)):
                sel = train[ds.a[train] == arm]
                expected = _ols_fit_predict(ds.x[sel], ds.y[sel], ds.x[fold])
                assert np.allclose(col[fold], expected, atol=1e-8)
        diffs = (table.q1 - table.q0)[ds.a == 1]
        assert abs(diffs.mean() - 1.0) <= 0.05

    def test_degenerate_fold(self):
        ds = make_dataset([1, 1, 1, 0], np.arange(4.0), np.arange(4.0))
        # Fold 1 holds the only control unit, so its training lacks arm 0.
        plan = CrossFitPlan(k=2, assignment=np.array([0, 0, 1, 1]))
        with pytest.raises(DegenerateFold):
            fit_crossfit_q(ds, plan, OutcomeModelSpec.knn(knn_k=1))

    def test_oracle_requires_callback(self):
        rng = np.random.default_rng(2)
        ds = random_dataset(rng, n=20)
        plan = make_folds(ds, 2, seed=0)
        with pytest.raises(ConfigInvalid):
            fit_crossfit_q(ds, plan, OutcomeModelSpec.oracle_spec())

    def test_zero_covariates_predict_arm_means(self):
        ds = make_dataset([1, 1, 1, 0, 0, 0], [3.0, 5.0, 4.0, 1.0, 1.0, 1.0])
        plan = CrossFitPlan(k=2, assignment=np.array([0, 1, 0, 1, 0, 1]))
        table = fit_crossfit_q(ds, plan, OutcomeModelSpec.ridge())
        assert np.allclose(table.q0, 1.0)
        # Fold 0 trains on units 1 (y=5) and 3,5 (controls): arm-1 mean is 5.
        assert table.q1[0] == 5.0

    def test_gradient_boost_runs(self):
        rng = np.random.default_rng(3)
        ds = random_dataset(rng, n=80, d=3)
        plan = make_folds(ds, 2, seed=1)
        spec = OutcomeModelSpec.gradient_boost(gb_trees=20)
        table = fit_crossfit_q(ds, plan, spec)
        assert table.n == 80

    def test_replicates_average_is_stable_for_deterministic_models(self):
        rng = np.random.default_rng(4)
        ds = random_dataset(rng, n=40)
        plan = make_folds(ds, 2, seed=1)
        one = fit_crossfit_q(ds, plan, OutcomeModelSpec.ridge(replicates=1))
        three = fit_crossfit_q(ds, plan, OutcomeModelSpec.ridge(replicates=3))
        assert np.allclose(one.q0, three.q0) and np.allclose(one.q1, three.q1)


class TestCrossFitProperties:
    def test_honesty_fold_predictions_ignore_fold_outcomes(self):
        # Changing the outcome of a unit in fold j must not move any
        # prediction for fold-j units.
        rng = np.random.default_rng(11)
        for _ in range(100):
            ds = random_dataset(rng, n=24, d=2)
            try:
                plan = make_folds(ds, 2, seed=int(rng.integers(1000)))
            except Exception:
                continue
            spec = OutcomeModelSpec.ridge(ridge_lambda=0.5)
            base = fit_crossfit_q(ds, plan, spec)
            j = int(rng.integers(plan.k))
            fold = plan.fold_indices(j)
            i = int(rng.choice(fold))
            y2 = np.array(ds.y)
            y2[i] += 10.0
            ds2 = make_dataset(ds.a, y2, ds.x)
            bumped = fit_crossfit_q(ds2, plan, spec)
            assert np.allclose(base.q0[fold], bumped.q0[fold])
            assert np.allclose(base.q1[fold], bumped.q1[fold])

    def test_two_headed_contract(self):
        # Changing arm-1 outcomes anywhere never moves any q0 prediction.
        rng = np.random.default_rng(13)
        for _ in range(100):
            ds = random_dataset(rng, n=26, d=2)
            try:
                plan = make_folds(ds, 2, seed=int(rng.integers(1000)))
            except Exception:
                continue
            spec = OutcomeModelSpec.ridge(ridge_lambda=1.0)
            base = fit_crossfit_q(ds, plan, spec)
            y2 = np.array(ds.y)
            y2[ds.a == 1] += rng.normal(size=(ds.a == 1).sum()) * 5.0
            bumped = fit_crossfit_q(make_dataset(ds.a, y2, ds.x), plan, spec)
            assert np.allclose(base.q0, bumped.q0)

    def test_oracle_round_trip_property(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            ds = random_dataset(rng, n=16)
            plan = CrossFitPlan(k=2, assignment=np.arange(16) % 2)
            q0 = rng.normal(size=16)
            q1 = rng.normal(size=16)
            spec = OutcomeModelSpec.oracle_spec(oracle_from_truth(q0, q1))
            table = fit_crossfit_q(ds, plan, spec)
            assert np.array_equal(table.q0, q0) and np.array_equal(table.q1, q1)


class TestIngestQhat:
    def _write(self, path, rows, header="id,q0,q1"):
        path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))

    def test_aligned_file(self, tmp_path):
        ds = make_dataset([1, 0, 1], [1.0, 2.0, 3.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u1,0.5,1.5", "u0,0.1,1.1", "u2,0.2,1.2"])
        table = ingest_qhat(ds, path)
        assert table.provenance is Provenance.INGESTED
        assert np.allclose(table.q0, [0.1, 0.5, 0.2])
        assert np.allclose(table.q1, [1.1, 1.5, 1.2])

    def test_missing_id(self, tmp_path):
        ds = make_dataset([1, 0], [1.0, 2.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u0,0.5,1.5"])
        with pytest.raises(MissingId, match="u1"):
            ingest_qhat(ds, path)

    def test_nan_rejected(self, tmp_path):
        ds = make_dataset([1, 0], [1.0, 2.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u0,NaN,1.5", "u1,0.0,1.0"])
        with pytest.raises(NonFinite):
            ingest_qhat(ds, path)

    def test_duplicate_id(self, tmp_path):
        ds = make_dataset([1, 0], [1.0, 2.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u0,0.5,1.5", "u0,0.6,1.6", "u1,0.0,1.0"])
        with pytest.raises(DuplicateId):
            ingest_qhat(ds, path)

    def test_unknown_id(self, tmp_path):
        ds = make_dataset([1, 0], [1.0, 2.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u0,0.5,1.5", "u1,0.0,1.0", "zz,0.0,1.0"])
        with pytest.raises(SchemaError):
            ingest_qhat(ds, path)

    def test_bad_header(self, tmp_path):
        ds = make_dataset([1, 0], [1.0, 2.0])
        path = tmp_path / "qhat.csv"
        self._write(path, ["u0,0.5,1.5"], header="id,qa,qb")
        with pytest.raises(SchemaError):
            ingest_qhat(ds, path)

    def test_fold_column_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        ds = random_dataset(rng, n=12)
        table = QHatTable(
            q0=rng.normal(size=12),
            q1=rng.normal(size=12),
            provenance=Provenance.CROSS_FITTED,
            fold_of_origin=np.arange(12) % 3,
        )
        path = tmp_path / "qhat.csv"
        write_qhat_csv(ds, table, path)
        back = ingest_qhat(ds, path)
        assert np.array_equal(back.q0, table.q0)
        assert np.array_equal(back.fold_of_origin, table.fold_of_origin)


class TestQLoss:
    def test_zero_when_factual_matches(self):
        ds = make_dataset([1, 0], [2.0, 3.0])
        table = QHatTable(
            q0=np.array([9.0, 3.0]), q1=np.array([2.0, 9.0]),
            provenance=Provenance.INGESTED,
        )
        assert q_loss(table, ds) == 0.0

    def test_hand_arithmetic(self):
        # a=(1,0), y=(1,0), q1=(0,.), q0=(.,1): ((1-0)^2 + (0-1)^2)/2 = 1.
        ds = make_dataset([1, 0], [1.0, 0.0])
        table = QHatTable(
            q0=np.array([5.0, 1.0]), q1=np.array([0.0, 5.0]),
            provenance=Provenance.INGESTED,
        )
        assert q_loss(table, ds) == 1.0

    def test_oracle_loss_close_to_noise_variance(self, oracle_sample_5k):
        s = oracle_sample_5k
        table = QHatTable(
            q0=s.true_q0, q1=s.true_q1, provenance=Provenance.INGESTED
        )
        loss = q_loss(table, s.dataset)
        gamma_sq = s.config.gamma**2
        assert abs(loss - gamma_sq) <= 0.1 * gamma_sq

    def test_length_mismatch(self):
        ds = make_dataset([1, 0], [1.0, 0.0])
        table = QHatTable(
            q0=np.zeros(3), q1=np.zeros(3), provenance=Provenance.INGESTED
        )
        with pytest.raises(LengthMismatch):
            q_loss(table, ds)
