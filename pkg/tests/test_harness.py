import math

import numpy as np
import pytest

from nmfrlct import coefficients, harness
from nmfrlct.estimators import ReplicateEstimates
from nmfrlct.gibbs import GibbsConfig
from nmfrlct.harness import (ExperimentConfig, ExperimentResult, aggregate, default_truth,
                             fit_log_slope, run_experiment, run_replicate, vb_slope_experiment)
from nmfrlct.model import DomainError, FactorPair, Hyperparameters, ModelDims, NumericalError


def _tiny(D=4, **kw):
    dims = ModelDims(2, 2, 1, 1)
    return ExperimentConfig(dims, Hyperparameters(1, 1, 1, 1), default_truth(dims, 3), n=50, n_T=500,
                            D=D, gibbs=GibbsConfig(200, 2, 100), master_seed=kw.get("seed", 8))


def test_default_truth():
    t = default_truth(ModelDims(4, 4, 2, 1), seed=0)
    assert t.shape == (4, 4, 1)
    assert (t.U >= 0.5).all() and (t.U <= 1.5).all()
    assert np.array_equal(t.U, default_truth(ModelDims(4, 4, 2, 1), seed=0).U)
    with pytest.raises(DomainError):
        default_truth(ModelDims(4, 4, 2, 0))


def test_config_validation():
    dims = ModelDims(2, 2, 1, 1)
    truth = default_truth(dims)
    with pytest.raises(DomainError):
        ExperimentConfig(dims, Hyperparameters(), truth, D=0)
    with pytest.raises(DomainError):
        ExperimentConfig(dims, Hyperparameters(), truth, n_T=0)
    with pytest.raises(DomainError):
        ExperimentConfig(dims, Hyperparameters(), FactorPair(np.zeros((2, 1)), np.ones((1, 2))))
    with pytest.raises(DomainError):
        ExperimentConfig(ModelDims(3, 2, 1, 1), Hyperparameters(), truth)
    assert ExperimentConfig(dims, Hyperparameters(), truth, n=7).test_size == 700


def test_aggregate_injected_values():
    mean, se = aggregate([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert se == pytest.approx(1 / math.sqrt(3))
    assert math.isnan(aggregate([4.0])[1])
    with pytest.raises(NumericalError):
        aggregate([])


def test_replicate_determinism_and_envelope():
    cfg = _tiny(D=1)
    a, b = run_replicate(cfg, 0), run_replicate(cfg, 0)
    assert a == b
    assert a != run_replicate(cfg, 1)
    lam_upper = float(coefficients.lambda_upper(cfg.dims, cfg.hyper))
    assert math.isfinite(a.lambda_point) and abs(a.lambda_point) < 10 * lam_upper


def test_order_and_parallelism_do_not_change_result():
    cfg = _tiny(D=4)
    base = run_experiment(cfg, jobs=1)
    shuffled = run_experiment(cfg, jobs=1, order=[2, 0, 3, 1])
    parallel = run_experiment(cfg, jobs=2, order=[3, 1, 2, 0])
    assert base.to_json() == shuffled.to_json() == parallel.to_json()
    assert base.replicates_csv() == parallel.replicates_csv()
    with pytest.raises(DomainError):
        run_experiment(cfg, jobs=1, order=[0, 0, 1, 2])


def test_result_roundtrip_and_summary(tmp_path):
    res = run_experiment(_tiny(D=3), jobs=1)
    assert res.lambda_hat == pytest.approx(np.mean([r.lambda_point for r in res.replicates]))
    back = ExperimentResult.from_json(res.to_json())
    assert back.lambda_hat == res.lambda_hat and back.stderr == res.stderr
    assert back.to_json() == res.to_json()
    harness.write_experiment(res, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["replicates.csv", "result.json", "summary.txt"]
    row = (tmp_path / "summary.txt").read_text().splitlines()[1].split()
    assert row[5:7] == [res.lambda_vb, res.lambda_upper]
    assert row[7] == f"{res.lambda_hat:.3g}"
    assert "wall" not in (tmp_path / "result.json").read_text()


def _flaky(bad):
    real = harness.run_replicate

    def run(cfg, index):
        if index in bad:
            raise NumericalError("injected")
        return real(cfg, index)

    return run


def test_failed_replicates_excluded(monkeypatch, caplog):
    cfg = _tiny(D=5)
    monkeypatch.setattr(harness, "run_replicate", _flaky({2}))
    res = run_experiment(cfg, jobs=1)
    assert res.indices == [0, 1, 3, 4] and list(res.failed) == [2]
    assert "replicate 2 failed" in caplog.text
    back = ExperimentResult.from_json(res.to_json())
    assert back.indices == [0, 1, 3, 4]


def test_too_many_failures_abort(monkeypatch):
    monkeypatch.setattr(harness, "run_replicate", _flaky({0, 3}))
    with pytest.raises(NumericalError, match="2 of 5"):
        run_experiment(_tiny(D=5), jobs=1)


def test_fit_log_slope_exact():
    n = np.array([250, 500, 1000, 2000])
    a, b = fit_log_slope(n, 6.25 * np.log(n) - 3.5)
    assert abs(a - 6.25) < 1e-10 and abs(b + 3.5) < 1e-10


def test_slope_experiment_guards():
    dims = ModelDims(2, 2, 1, 1)
    with pytest.raises(DomainError):
        vb_slope_experiment(dims, Hyperparameters(), default_truth(dims), [10, 20], [0])


def test_slope_experiment_runs_small():
    dims = ModelDims(2, 2, 2, 1)
    a, b = vb_slope_experiment(dims, Hyperparameters(1, 1, 1, 1), default_truth(dims),
                               [100, 200, 400], range(3))
    assert math.isfinite(a) and math.isfinite(b)


def test_replicate_estimates_type():
    r = run_replicate(_tiny(D=1), 0)
    assert isinstance(r, ReplicateEstimates)
    assert r.V_n >= 0 and r.W_n == pytest.approx(r.T_n + r.V_n / 50, abs=1e-12)
