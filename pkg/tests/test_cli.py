import pytest

from cli import EXIT_ABORTED, EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_OK, main


def write_config(tmp_path, text: str, name: str = "run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_writes_trace_and_summary(configs_dir, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(configs_dir / "certify_scalar_pass.cfg"), "--out", str(out)]) == EXIT_OK
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "run,iter,distance,ms"
    assert lines[1].startswith("p0,1,0.333333333333,")
    summary = (out / "summary.txt").read_text()
    assert "kind = riccati\n" in summary
    assert "all_converged = true\n" in summary


def test_runs_are_byte_identical(configs_dir, tmp_path):
    config = str(configs_dir / "riccati_below_threshold.cfg")
    assert main(["run", config, "--out", str(tmp_path / "first")]) == EXIT_OK
    assert main(["run", config, "--out", str(tmp_path / "second")]) == EXIT_OK
    for name in ("trace.csv", "summary.txt"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_seed_override_changes_the_instance(configs_dir, tmp_path):
    config = str(configs_dir / "riccati_below_threshold.cfg")
    assert main(["run", config, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", config, "--seed", "8", "--out", str(tmp_path / "b")]) == EXIT_OK
    first = (tmp_path / "a" / "summary.txt").read_text()
    second = (tmp_path / "b" / "summary.txt").read_text()
    assert "seed = 7\n" in first
    assert "seed = 8\n" in second
    assert first != second


def test_sweep_writes_group_files(configs_dir, tmp_path):
    out = tmp_path / "sweep"
    assert main(["run", str(configs_dir / "riccati_alpha_sweep.cfg"), "--out", str(out)]) == EXIT_OK
    for alpha in (250, 300, 400, 500):
        lines = (out / f"trace_alpha_{alpha}.csv").read_text().splitlines()
        assert lines[0] == "run,iter,distance,ms"
        assert len(lines) > 1
    summary = dict(
        line.split(" = ", 1) for line in (out / "summary.txt").read_text().splitlines()
    )
    iterations = [int(summary[f"a{i}.p0.iterations"]) for i in range(4)]
    assert all(b <= a for a, b in zip(iterations, iterations[1:]))


def test_certify_pass_and_fail(configs_dir, capsys):
    assert main(["certify", str(configs_dir / "certify_scalar_pass.cfg")]) == EXIT_OK
    assert "result = pass" in capsys.readouterr().out
    assert main(["certify", str(configs_dir / "certify_scalar_fail.cfg")]) == EXIT_CERTIFICATE
    output = capsys.readouterr().out
    assert "result = fail" in output
    assert "alpha_ok = false" in output


def test_unknown_key(tmp_path, capsys):
    path = write_config(tmp_path, "kind = riccati\nalpha = 3\nalpah = 4\n")
    assert main(["run", path, "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert f"{path}:3: key 'alpah': unknown key" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_kind(tmp_path, capsys):
    path = write_config(tmp_path, "alpha = 3\n")
    assert main(["certify", path]) == EXIT_CONFIG
    assert "key 'kind': missing" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG
    assert "cannot read config" in capsys.readouterr().err


def test_singular_step_exits_aborted(tmp_path):
    # With a = alpha and P0 = 0 the first step matrix is zero.
    path = write_config(tmp_path, "kind = riccati\nproblem = scalar\nscalar_a = 3\nalpha = 3\np0_radius = 0\nsamples = 1\n")
    out = tmp_path / "out"
    assert main(["run", path, "--out", str(out)]) == EXIT_ABORTED
    summary = (out / "summary.txt").read_text()
    assert "p0.status = aborted\n" in summary


def test_experiment_error_exits_aborted(tmp_path, capsys):
    path = write_config(tmp_path, "kind = mdp\nmdp_file = nowhere.mdp\n")
    assert main(["run", path, "--out", str(tmp_path / "out")]) == EXIT_ABORTED
    assert "not found" in capsys.readouterr().err


def test_bad_thread_setting(configs_dir, monkeypatch, capsys):
    monkeypatch.setenv("CTRL_ITER_THREADS", "zero")
    assert main(["certify", str(configs_dir / "certify_scalar_pass.cfg")]) == EXIT_CONFIG
    assert "CTRL_ITER_THREADS" in capsys.readouterr().err


def test_command_is_required():
    with pytest.raises(SystemExit):
        main([])


def test_summary_keys_are_stable(configs_dir, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(configs_dir / "certify_scalar_pass.cfg"), "--out", str(out)]) == EXIT_OK
    keys = [line.split(" = ", 1)[0] for line in (out / "summary.txt").read_text().splitlines()]
    header = [
        "kind", "problem", "seed", "state_dim", "control_dim", "runs",
        "gamma", "m_bound", "bnb_norm", "threshold",
        "alpha", "beta", "varpi", "nu", "alpha_ok", "contraction_bound",
        "all_converged", "any_diverged",
    ]
    per_run = ["status", "converged", "diverged", "iterations", "last_distance", "p0_norm", "residual"]
    assert keys == header + [f"p{s}.{key}" for s in range(4) for key in per_run]
