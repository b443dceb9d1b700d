import json

import numpy as np
import pytest
import yaml

from sobolevlab.cli import main
from sobolevlab.config import Model, load_config, parse_config
from sobolevlab.diagnostics import NormTrace
from sobolevlab.matfile import read_operator
from sobolevlab.scenarios import EXIT_FIT, EXIT_OK, EXIT_STAGE, config_from_manifest, converge, random_perturbation, run
from sobolevlab.basis import make_basis


def universal(**over):
    cfg = {
        "name": "small_universal",
        "model": "HarmonicUniversal",
        "dim": 256,
        "potential": {"k": 1, "v_k": 1.0},
        "rs": [1.0, 2.0],
        "evolution": {"t_end": 40.0, "dt": 1.0, "micro_dt": 0.1},
        "initial": {"kind": "basis", "label": 1},
        "fit": {"t_min": 10.0, "t_max": 40.0, "expect": {1.0: {"lo": 0.8, "hi": 1.2}}},
    }
    cfg.update(over)
    return cfg


# --- validation -----------------------------------------------------------


def test_valid_config_has_empty_report():
    cfg, errs = parse_config(universal())
    assert errs == [] and cfg.model is Model.HARMONIC_UNIVERSAL


def test_missing_coefficient_is_a_field_error():
    raw = universal()
    raw["potential"] = {"k": 1}
    _, errs = parse_config(raw)
    assert any(e.startswith("potential.v_k") for e in errs)


def test_even_halfwave_dimension_is_rejected():
    raw = {
        "name": "hw",
        "model": "HalfWaveTransporter",
        "dim": 100,
        "potential": {"j": 1, "v_coeffs": {1: 1.0, -1: 1.0}},
        "evolution": {"t_end": 10.0, "dt": 1.0, "micro_dt": 0.1},
        "initial": {"kind": "basis", "label": 0},
    }
    _, errs = parse_config(raw)
    assert any("odd" in e for e in errs)


def test_perturbation_guard():
    raw = universal(model="PerturbedTransporter")
    raw["potential"] = {"k": 1, "v_k": 1.0, "perturbation": {"epsilon": 0.2, "bandwidth": 3, "seed": 1}}
    _, errs = parse_config(raw)
    assert any("guard" in e for e in errs)
    raw["potential"]["perturbation"]["eps_guard"] = 0.5
    assert parse_config(raw)[1] == []


def test_unknown_fields_and_bad_complex_are_rejected():
    raw = universal(colour="blue")
    assert any("colour" in e for e in parse_config(raw)[1])
    raw = universal()
    raw["potential"] = {"k": 1, "v_k": "one"}
    assert parse_config(raw)[1]


def test_complex_spellings():
    for spelled in ("1+2j", [1, 2], {"re": 1, "im": 2}):
        raw = universal()
        raw["potential"] = {"k": 1, "v_k": spelled}
        cfg, errs = parse_config(raw)
        assert errs == [] and cfg.potential.v_k == 1 + 2j


def test_random_perturbation_is_seeded_hermitian_and_small():
    b = make_basis("Harmonic", 64)
    w1, w2 = random_perturbation(b, 4, 7), random_perturbation(b, 4, 7)
    np.testing.assert_array_equal(w1.toarray(), w2.toarray())
    assert w1.is_hermitian() and w1.bandwidth() == 4
    assert np.abs(w1.toarray()).sum(axis=1).max() == pytest.approx(1.0)
    assert not np.array_equal(w1.toarray(), random_perturbation(b, 4, 8).toarray())


# --- runs -----------------------------------------------------------------


def test_run_writes_artifacts_and_reruns_from_manifest(tmp_path):
    cfg, _ = parse_config(universal())
    res = run(cfg, tmp_path)
    assert res.exit_code == EXIT_OK
    out = tmp_path / "small_universal"
    assert {p.name for p in out.iterdir()} >= {"trace.csv", "fits.json", "manifest.json", "ops"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["versions"]["sobolevlab"] and manifest["exit_code"] == 0
    assert [s["stage"] for s in manifest["stages"]] == ["build", "average", "initial", "evolve", "fit"]
    again = run(config_from_manifest(out / "manifest.json"), tmp_path / "again")
    t1 = NormTrace.from_csv(out / "trace.csv")
    t2 = NormTrace.from_csv(tmp_path / "again" / "small_universal" / "trace.csv")
    for r in t1.rs:
        np.testing.assert_allclose(t2.norms[r], t1.norms[r], rtol=1e-12)
    assert (tmp_path / "again" / "small_universal" / "trace.csv").read_bytes() == (out / "trace.csv").read_bytes()
    assert again.exit_code == EXIT_OK
    avg = read_operator(out / "ops" / "average.mat")
    assert avg.is_hermitian()


def test_stage_failure_reports_stage(tmp_path):
    cfg, _ = parse_config(universal(dim=48))
    res = run(cfg, tmp_path)
    assert res.exit_code == EXIT_STAGE
    manifest = json.loads((tmp_path / "small_universal" / "manifest.json").read_text())
    assert manifest["failure"]["stage"] == "evolve"
    assert "increase N" in manifest["failure"]["error"]


def test_expectation_miss_is_fit_failure(tmp_path):
    raw = universal()
    raw["fit"]["expect"] = {1.0: {"lo": 3.0, "hi": 4.0}}
    res = run(parse_config(raw)[0], tmp_path, write=False)
    assert res.exit_code == EXIT_FIT
    assert "outside" in res.summary["manifest"]["acceptance_failures"][0]


def test_converge_reports_refinement():
    cfg, _ = parse_config(universal(evolution={"t_end": 20.0, "dt": 1.0, "micro_dt": 0.1}))
    rep = converge(cfg, [96, 128, 160])
    assert rep.converged


def test_example_configs_validate():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert len(paths) == 8
    assert {load_config(p).model for p in paths} == set(Model)


# --- CLI ------------------------------------------------------------------


def test_cli_validate(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump(universal()))
    bad = tmp_path / "bad.json"
    raw = universal()
    del raw["potential"]["v_k"]
    bad.write_text(json.dumps(raw))
    assert main(["validate", str(good)]) == 0
    assert main(["validate", str(good), str(bad)]) == EXIT_STAGE
    assert "potential.v_k" in capsys.readouterr().out


def test_cli_run_takes_worst_exit_code(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(yaml.safe_dump(universal()))
    failing = tmp_path / "failing.yaml"
    failing.write_text(yaml.safe_dump(universal(name="tiny", dim=48)))
    code = main(["run", str(good), str(failing), "--outdir", str(tmp_path / "runs"), "--jobs", "2"])
    assert code == EXIT_STAGE
    assert (tmp_path / "runs" / "small_universal" / "trace.csv").exists()


def test_cli_operator_tools(tmp_path, capsys):
    cfg, _ = parse_config(
        {
            "name": "audit",
            "model": "MourreAudit",
            "dim": 128,
            "potential": {"k": 1, "v_k": 1.0},
            "window": {"lo": -0.5, "hi": 0.5},
        }
    )
    assert run(cfg, tmp_path).exit_code == EXIT_OK
    ops = tmp_path / "audit" / "ops"
    assert main(["mourre", str(ops / "H0.mat"), str(ops / "A.mat"), "-0.5,0.5", "--allowance-rank", "6"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and report["theta"] > 0
    out = tmp_path / "avg.mat"
    assert main(["average", str(ops / "H0.mat"), "free", "--out", str(out)]) == 0
    capsys.readouterr()
    np.testing.assert_array_equal(read_operator(out).toarray(), read_operator(ops / "H0.mat").toarray())
    assert main(["weyl", "--dim", "600", "--k", "1", "--vk", "2", "--ns", "16,32,64,128,256"]) == 0
    assert json.loads(capsys.readouterr().out)["slope"] == pytest.approx(-0.5, abs=0.05)


def test_cli_converge(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(universal(evolution={"t_end": 20.0, "dt": 1.0, "micro_dt": 0.1})))
    assert main(["converge", str(p), "--dims", "96,128,160"]) == 0
    assert json.loads(capsys.readouterr().out)["converged"]
