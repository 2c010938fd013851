import math

import numpy as np
import pytest
from scipy import integrate, special

from mrdose.sim import (
    REFERENCE_TABLE1,
    DgpSpec,
    ExperimentConfig,
    reference_checks,
    run_experiment,
    run_replication,
    simulate_dataset,
    true_apo,
)


class TestDgp:
    def test_uniform_moments(self, dgp):
        ds = simulate_dataset(dgp.with_n(1_000_000), 31)
        x = ds.covariates[:, 0]
        assert abs(x.mean()) < 0.01
        assert abs(x.var(ddof=1) - 25 / 12) < 0.02
        assert x.min() >= -2.5 and x.max() <= 2.5

    def test_treatment_mean_quadrature(self, dgp):
        ds = simulate_dataset(dgp.with_n(1_000_000), 32)
        e_pi, _ = integrate.quad(lambda x: special.expit(-0.5 + 0.1 * x - 0.2 * x * x) / 5.0, -2.5, 2.5)
        assert abs(ds.treatments.mean() - 3 * e_pi) < 0.01

    def test_outcome_residual_variance(self, dgp):
        ds = simulate_dataset(dgp.with_n(200_000), 33)
        resid = ds.outcomes - dgp.mean_outcome(ds.covariates[:, 0], ds.treatments)
        assert abs(resid.var() - 2.0) < 0.05

    def test_deterministic(self, dgp):
        a = simulate_dataset(dgp.with_n(500), 5)
        b = simulate_dataset(dgp.with_n(500), 5)
        c = simulate_dataset(dgp.with_n(500), 6)
        assert a.equals(b)
        assert not a.equals(c)

    def test_frozen_draw(self, dgp):
        # pins the documented generator and draw order
        ds = simulate_dataset(dgp.with_n(3), 20240101)
        again = simulate_dataset(dgp.with_n(3), np.random.SeedSequence(20240101))
        assert ds.equals(again)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(20240101)))
        x = rng.uniform(-2.5, 2.5, 3)
        np.testing.assert_array_equal(ds.covariates[:, 0], x)

    def test_invalid(self):
        with pytest.raises(ValueError):
            DgpSpec(n=0)
        with pytest.raises(ValueError):
            DgpSpec(outcome_variance=0.0)


class TestTruth:
    @pytest.mark.parametrize("level, value", [(0, 7.25), (1, 8.90), (2, 9.85), (3, 10.10)])
    def test_closed_form(self, level, value):
        assert true_apo(level) == pytest.approx(value, abs=1e-12)

    @pytest.mark.parametrize("level", range(4))
    def test_quadrature(self, dgp, level):
        val, _ = integrate.quad(lambda x: dgp.mean_outcome(x, level) / 5.0, -2.5, 2.5)
        assert true_apo(level) == pytest.approx(val, abs=1e-10)

    @pytest.mark.parametrize("level", range(4))
    def test_reference_row(self, level):
        assert abs(true_apo(level) - REFERENCE_TABLE1["Truth"][level]) < 0.01

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            true_apo(4)


class TestExperiment:
    def test_single_replication(self, dgp):
        cfg = ExperimentConfig(dgp=dgp.with_n(1000), replications=1, estimators=("DR_1010", "MR_1111"))
        rep = run_experiment(cfg)
        np.testing.assert_array_equal(rep.av_est, rep.estimates[0])
        np.testing.assert_array_equal(rep.emp_var, 0.0)
        assert rep.variance_flag.all()

    def test_statistics(self, dgp):
        cfg = ExperimentConfig(dgp=dgp.with_n(800), replications=6, estimators=("DR_1010",))
        rep = run_experiment(cfg)
        est = rep.estimates[:, 0, :]
        np.testing.assert_allclose(rep.av_est[0], est.mean(axis=0), rtol=1e-14)
        np.testing.assert_allclose(rep.emp_var[0], est.var(axis=0, ddof=1), rtol=1e-12)
        np.testing.assert_allclose(rep.bias[0], est.mean(axis=0) - rep.truth, rtol=1e-12)
        assert np.all(rep.successes + rep.failures == 6)

    def test_order_independent(self, dgp):
        cfg = ExperimentConfig(dgp=dgp.with_n(600), replications=5, estimators=("DR_1001", "MR_1111"))
        forward = [run_replication(cfg, r).estimates for r in range(5)]
        backward = [run_replication(cfg, r).estimates for r in reversed(range(5))][::-1]
        np.testing.assert_array_equal(np.stack(forward), np.stack(backward))
        np.testing.assert_array_equal(run_experiment(cfg).estimates, np.stack(forward))

    def test_workers_invariant(self, dgp):
        cfg = ExperimentConfig(dgp=dgp.with_n(600), replications=6, estimators=("MR_1111",))
        a = run_experiment(cfg, workers=1).to_json()
        b = run_experiment(cfg, workers=3).to_json()
        assert a == b

    def test_failed_cells_counted(self, dgp):
        # tiny samples leave level 3 empty or degenerate in some replications
        cfg = ExperimentConfig(dgp=dgp.with_n(60), replications=10, estimators=("MR_1111",))
        rep = run_experiment(cfg)
        assert rep.failures.sum() > 0
        assert np.all(rep.successes + rep.failures == 10)
        assert rep.errors

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(replications=0)
        with pytest.raises(ValueError):
            ExperimentConfig(estimators=())
        with pytest.raises(ValueError):
            ExperimentConfig(estimators=("MR_2",))

    def test_reference_checks_shape(self, dgp):
        cfg = ExperimentConfig(dgp=dgp.with_n(2000), replications=3)
        checks = reference_checks(run_experiment(cfg))
        kinds = [c["check"] for c in checks]
        assert kinds.count("truth") == 4
        assert kinds.count("bias") == 32
        assert kinds.count("misspecified_bias") == 4
        assert kinds.count("variance") == 4

    def test_variance_scaling(self, dgp):
        def var(n):
            cfg = ExperimentConfig(dgp=dgp.with_n(n), replications=200, estimators=("DR_1010",))
            return run_experiment(cfg).emp_var[0]

        ratio = var(2000) / var(10_000)
        assert np.all((ratio >= 3) & (ratio <= 8)), ratio


@pytest.fixture(scope="module")
def report(dgp):
    return run_experiment(ExperimentConfig(dgp=dgp.with_n(1500), replications=3))


class TestReportFormats:
    def test_csv_shape(self, report):
        import csv
        import io

        rows = list(csv.reader(io.StringIO(report.to_csv())))
        assert rows[0] == ["estimator", "statistic", "0", "1", "2", "3"]
        assert rows[1][0] == "Truth"
        assert len(rows) == 2 + 3 * 9
        for r in rows[2:]:
            assert r[1] in {"AvEst", "EmpVar", "Bias"}

    def test_json_finite_or_null(self, report):
        import json

        text = json.dumps(report.to_json(), allow_nan=False)
        back = json.loads(text)
        assert set(back["estimators"]) == set(report.estimator_names)
        assert back["config"]["rng"].startswith("numpy PCG64")

    def test_table_rounds(self, report):
        text = report.format_table()
        assert "7.250" in text
        assert all(math.isfinite(v) for v in report.truth)


@pytest.fixture(scope="module")
def study(dgp):
    cfg = ExperimentConfig(dgp=dgp, replications=200, seed=424242, estimators=("DR_1010", "DR_0101"))
    return run_experiment(cfg)


class TestPopulationLimits:
    """The engine agrees with quadrature limits of the same design."""

    def test_misspecified_bias(self, study):
        from _oracles import dr_limits

        bias, _ = dr_limits()
        se = np.sqrt(study.emp_var[1] / 200)
        assert np.all(np.abs(study.bias[1] - bias) <= 4 * se), (study.bias[1], bias, se)

    def test_correct_model_variance(self, study):
        from _oracles import dr_limits

        _, var_n = dr_limits()
        ratio = study.emp_var[0] / (var_n / 10_000)
        # sd of a 200-draw sample variance ratio is about 0.1 for light tails
        assert np.all((ratio > 0.7) & (ratio < 1.4)), ratio
