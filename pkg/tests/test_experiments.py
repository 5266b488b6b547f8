import asyncio

import pytest

from config import load_experiment_config, parse_experiment_config
from experiments.base_experiment import ExperimentError
from experiments.runner import EXPERIMENTS, certify, run_experiment
from tests.conftest import SCALAR_P


def run(config):
    return asyncio.run(run_experiment(config))


def test_every_kind_is_registered():
    assert sorted(EXPERIMENTS) == ["lambda", "mdp", "pmp", "riccati", "sgd", "transport"]
    for name, experiment_class in EXPERIMENTS.items():
        assert experiment_class.describe().kind == name


def test_scalar_riccati(configs_dir):
    result = run(load_experiment_config(configs_dir / "certify_scalar_pass.cfg"))
    summary = result.summary
    assert summary["runs"] == 4
    assert summary["all_converged"] is True
    assert summary["threshold"] == pytest.approx(2.0)
    assert summary["p0.residual"] < 1e-9
    assert [row.run for row in result.rows[:1]] == ["p0"]
    assert result.groups == {}
    assert not result.aborted


def test_riccati_below_threshold_does_not_converge(configs_dir):
    summary = run(load_experiment_config(configs_dir / "riccati_below_threshold.cfg")).summary
    assert summary["alpha_ok"] is False
    assert summary["all_converged"] is False
    assert summary["any_diverged"] is True


def test_riccati_above_threshold_converges(configs_dir):
    summary = run(load_experiment_config(configs_dir / "riccati_above_threshold.cfg")).summary
    assert summary["alpha_ok"] is True
    assert summary["alpha"] == pytest.approx(2.0 * summary["threshold"])
    assert summary["all_converged"] is True
    for s in range(4):
        assert summary[f"p{s}.p0_norm"] <= 0.9 * summary["varpi"] + 1e-12


def test_riccati_sweep_groups_and_monotone_iterations(configs_dir):
    result = run(load_experiment_config(configs_dir / "riccati_alpha_sweep.cfg"))
    assert sorted(result.groups) == ["alpha_250", "alpha_300", "alpha_400", "alpha_500"]
    iterations = [result.summary[f"a{i}.p0.iterations"] for i in range(4)]
    assert all(b <= a for a, b in zip(iterations, iterations[1:]))
    assert all(row.run == "a2.p0" for row in result.groups["alpha_400"])


def test_riccati_certify(configs_dir):
    (report,) = certify(load_experiment_config(configs_dir / "certify_scalar_fail.cfg"))
    assert not report.passed
    assert report.threshold == pytest.approx(2.0)
    (report,) = certify(load_experiment_config(configs_dir / "certify_scalar_pass.cfg"))
    assert report.passed


def test_lambda_lq(configs_dir):
    summary = run(load_experiment_config(configs_dir / "lambda_lq.cfg")).summary
    assert summary["a0.converged"] is True
    assert summary["a0.equation_residual"] < 1e-4
    assert summary["a0.cone_growth_excess"] <= 1e-6


def test_lambda_certify_lists_every_alpha():
    config = parse_experiment_config("kind = lambda\nalpha = 1, 3\n")
    reports = certify(config)
    assert [r.passed for r in reports] == [False, True]


def test_transport(configs_dir):
    summary = run(load_experiment_config(configs_dir / "transport.cfg")).summary
    assert summary["sweeps.converged"] is True
    assert summary["amplification"] == pytest.approx(0.4)
    assert summary["sweeps.max_error"] < 1e-3


def test_mdp(configs_dir):
    result = run(load_experiment_config(configs_dir / "mdp.cfg"))
    summary = result.summary
    for method in ("value", "policy", "q"):
        assert summary[f"{method}.max_deviation"] < 1e-8
        assert summary[f"{method}.policy"] == summary["exhaustive_policy"]
    assert summary["value.converged"] is True
    assert [row.run for row in result.rows][0] == "value"


def test_mdp_missing_file(tmp_path):
    config = parse_experiment_config(f"kind = mdp\nmdp_file = {tmp_path / 'nope.mdp'}\n")
    with pytest.raises(ExperimentError, match="not found"):
        run(config)


def test_mdp_has_no_certificate(configs_dir):
    with pytest.raises(ExperimentError, match="no convergence certificate"):
        certify(load_experiment_config(configs_dir / "mdp.cfg"))


def test_pmp_toy(configs_dir):
    summary = run(load_experiment_config(configs_dir / "pmp_toy.cfg")).summary
    assert summary["msa.train_status"] == "converged"
    assert summary["msa.final_cost"] == pytest.approx(0.5, abs=1e-10)
    assert summary["msa.theta_mean"] == pytest.approx(0.5, abs=1e-6)


def test_pmp_realizable(configs_dir):
    summary = run(load_experiment_config(configs_dir / "pmp_realizable.cfg")).summary
    assert summary["msa.final_cost"] < 1e-3


def test_pmp_training_file(fixtures_dir):
    config = parse_experiment_config(
        f"kind = pmp\nproblem = file\ntraining_file = {fixtures_dir / 'training.csv'}\nsteps = 4\nmax_iter = 20\n"
    )
    summary = run(config).summary
    assert summary["msa.iterations"] >= 1
    assert summary["msa.final_cost"] <= summary["msa.last_distance"] + 1e-12


def test_sgd_schedule():
    config = parse_experiment_config(
        "kind = sgd\ndim = 1\neta = 1\nhorizon = 0.5\ncontrols = 0.2, 0.5, 1.0\nfloor = 0.2\n"
        "noise_scale = 1\nreplicas = 2000\nseed = 3\n"
    )
    summary = run(config).summary
    assert summary["schedule.best_control"] == 0.2
    assert summary["schedule.u2.ou_variance"] == pytest.approx(0.316, abs=1e-3)


def test_trace_thinning_keeps_last_row(configs_dir):
    config = load_experiment_config(configs_dir / "certify_scalar_pass.cfg").model_copy(
        update={"samples": 1, "trace_every": 5, "timing": True}
    )
    result = run(config)
    iterations = [row.iteration for row in result.rows]
    assert all(k % 5 == 0 for k in iterations[:-1])
    assert iterations[-1] == result.summary["p0.iterations"]
    assert all(row.ms is not None and row.ms >= 0 for row in result.rows)


def test_scalar_fixed_point_value(configs_dir):
    result = run(load_experiment_config(configs_dir / "certify_scalar_pass.cfg"))
    # Distances shrink toward the fixed point SCALAR_P from P0 = 0.
    first = result.rows[0]
    assert first.distance == pytest.approx(1.0 / 3.0)
    assert SCALAR_P < 1.0 / 3.0
