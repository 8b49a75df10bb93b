import json

import pytest

from svctbench.cli import main


def write_config(tmp_path, **kw):
    doc = dict(name="cli", grid_side=8, projections=[1], methods=["dps"], N=8, K=8,
               prior={"templates": 1, "c": 0.01}, mmd_permutations=10)
    doc.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(write_config(tmp_path))]) == 0
    assert "ok" in capsys.readouterr().out


def test_invalid_config_exits_before_compute(tmp_path, capsys, monkeypatch):
    import svctbench.cli as cli

    monkeypatch.setattr(cli, "run_benchmark", lambda *a, **k: pytest.fail("computed anyway"))
    path = write_config(tmp_path, sigma_min=1.0, sigma_max=0.5)
    assert main(["run", str(path)]) == 2
    assert "sigma_min" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == 2


def test_run_honours_bench_out(tmp_path, monkeypatch):
    monkeypatch.setenv("BENCH_OUT", str(tmp_path / "envroot"))
    assert main(["run", str(write_config(tmp_path))]) == 0
    assert (tmp_path / "envroot" / "cli-s0" / "report.csv").exists()


def test_out_flag_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BENCH_OUT", str(tmp_path / "envroot"))
    assert main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "cli-s0" / "report.csv").exists()


def test_compute_failure_exit_code(tmp_path, monkeypatch):
    import svctbench.experiment as ex
    from svctbench.errors import BatchFailureError

    def broken(*a, **k):
        raise BatchFailureError("all chains diverged", {"failed_chains": {}, "failures": 8})

    monkeypatch.setattr(ex, "batch_sample", broken)
    assert main(["run", str(write_config(tmp_path)), "--out", str(tmp_path)]) == 3


def test_sweep(tmp_path, capsys):
    code = main(["sweep-alpha", str(write_config(tmp_path)), "--method", "dps", "--p", "1", "--grid", "0.5,1",
                 "--n", "6", "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.count("alpha=") == 2


def test_sweep_rejects_pig(tmp_path):
    path = write_config(tmp_path)
    assert main(["sweep-alpha", str(path), "--method", "pig", "--p", "1", "--grid", "1"]) == 2


def test_histograms(tmp_path, capsys):
    code = main(["histograms", str(write_config(tmp_path)), "--method", "oracle", "--p", "1,3", "--pixels", "0,9",
                 "--num-samples", "200", "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.count("W1=") == 4


def test_histograms_bad_pixel(tmp_path):
    code = main(["histograms", str(write_config(tmp_path)), "--method", "oracle", "--p", "1", "--pixels", "99",
                 "--out", str(tmp_path)])
    assert code == 2


def test_phantoms(tmp_path, capsys):
    assert main(["phantoms", str(write_config(tmp_path)), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "cli-s0" / "prior.json").exists()
