import csv
import dataclasses
import json
import os

import numpy as np
import pytest

from conftest import affine_config
from rfixfel import cli
from rfixfel.cli import ArtifactError, cmd_diagnose, cmd_gen, cmd_plot, cmd_run, load_artifact, main
from rfixfel.config import (AffineSpec, ConfigError, GenerationSpec, InitSpec, RunConfig, config_hash,
                            load_config, save_config)
from rfixfel.datagen import read_dataset
from rfixfel.engine import STREAM_INIT, chain_rng
from rfixfel.plotting import plot_step_norms


def tiny_xfel_config(tmp_path, **overrides):
    gen = GenerationSpec(n_images=20, n_balls=3, n_u=8, n_v=8, scale_sample_size=32)
    base = dict(problem="xfel", dataset=str(tmp_path / "data.jsonl"), generation=gen, batch_size=5, q=2,
                n_outer=6, n_chains=3, n_rotations=12, snapshot_every=2, step=0.05, out=str(tmp_path / "run"),
                full_grid_exponent=True, init=InitSpec("box", -1.0, 1.0))
    base.update(overrides)
    return RunConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip(tmp_path):
    cfg = affine_config(step=(0.1, 0.05), box=(-5.0, 5.0), n_outer=7)
    p = tmp_path / "c.json"
    save_config(cfg, p)
    back = load_config(p)
    assert back == cfg and back.dumps() == cfg.dumps()
    assert config_hash(back) == config_hash(cfg)
    assert RunConfig.from_dict(json.loads(RunConfig().dumps())) == RunConfig()


@pytest.mark.parametrize("change,field", [
    ({"q": 0}, "q"),
    ({"r": 0}, "r"),
    ({"step": -0.1}, "step"),
    ({"batch_size": 3}, "batch_size"),
    ({"n_chains": 0}, "n_chains"),
])
def test_invalid_config_names_field(change, field):
    with pytest.raises(ConfigError) as exc:
        affine_config(**change).validate()
    assert exc.value.field.startswith(field)


def test_config_rejects_unknown_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_asymmetric_affine_matrix_rejected():
    bad = AffineSpec((((1.0, 2.0), (0.0, 1.0)),), (0.0, 0.0))
    with pytest.raises(ConfigError, match="symmetric"):
        affine_config(affine=bad).validate()


def test_main_exit_code_on_config_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    cfg = json.loads(affine_config().dumps())
    cfg["q"] = 0
    p.write_text(json.dumps(cfg))
    assert main(["run", str(p), "--quiet"]) == 2
    assert "q" in capsys.readouterr().err


def test_init_config_prints_defaults(capsys):
    assert main(["init-config"]) == 0
    assert RunConfig.from_dict(json.loads(capsys.readouterr().out)) == RunConfig()


# ---------------------------------------------------------------------------
# gen


def test_gen_single_image(tmp_path, capsys):
    cfg = tiny_xfel_config(tmp_path, generation=GenerationSpec(n_images=1, n_u=32, n_v=32, scale_sample_size=16))
    cfg = cfg.replace(batch_size=1)
    path = cmd_gen(cfg)
    ds = read_dataset(path)
    assert len(ds) == 1 and ds.header.grid.n_u == 32
    assert "expected" in capsys.readouterr().out.lower()


def test_gen_deterministic(tmp_path):
    cfg = tiny_xfel_config(tmp_path)
    a = cmd_gen(cfg, tmp_path / "a.jsonl")
    b = cmd_gen(cfg, tmp_path / "b.jsonl")
    assert open(a, "rb").read() == open(b, "rb").read()


def test_gen_rejects_affine(tmp_path):
    with pytest.raises(ConfigError):
        cmd_gen(affine_config(), tmp_path / "x")


# ---------------------------------------------------------------------------
# run


def test_zero_iteration_run_echoes_initialization(tmp_path):
    cfg = affine_config(n_outer=0, n_chains=4, out=str(tmp_path / "r0"))
    out, status = cmd_run(cfg, quiet=True)
    art = load_artifact(out)
    assert status["complete"] and status["n_done"] == [0] * 4
    assert [s.outer_iteration_k for s in art.snapshots] == [0]
    mu0 = [cli.build_problem(cfg).mu0(chain_rng(cfg.seed, c, STREAM_INIT)) for c in range(4)]
    np.testing.assert_array_equal(art.snapshots[0].points, mu0)
    assert all(np.isnan(art.snapshots[0].step_norms))


def test_artifact_contents(tmp_path):
    cfg = tiny_xfel_config(tmp_path)
    cmd_gen(cfg)
    out, status = cmd_run(cfg, quiet=True)
    names = set(os.listdir(out))
    assert {"config.json", "snapshots.jsonl", "step_norms.csv", "certificate.json", "status.json",
            "timing.csv", "manifest.json"} <= names
    assert "TRUNCATED" not in names and status["complete"]
    assert load_config(os.path.join(out, "config.json")) == cfg
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["config_sha256"] == config_hash(cfg)
    cert = json.load(open(os.path.join(out, "certificate.json")))
    assert cert["label"] == "uncertified"

    rep = cmd_diagnose(out, quiet=True)
    d = rep.to_dict()
    # iterate differences, ergodic means, moments and W2 are all present
    assert rep.ks == [0, 2, 4, 6]
    assert len(d["step_norm_series"]) == 6
    assert len(d["cesaro_mean_trajectory"]) == 4 and len(d["variance_trajectory"]) == 4
    assert d["w2_successive"][0] is None and all(v is not None for v in d["w2_successive"][1:])
    assert len(d["alignment"]) == 3 and all("rmsd" in a for a in d["alignment"])
    assert d["psi"][-1] is not None and d["psi"][-1] >= 0
    rows = read_csv(os.path.join(out, "diagnostics", "diagnostics.csv"))
    assert list(rows[0]) == cli.CSV_COLUMNS and len(rows) == 4
    assert rows[0]["step_norm"] == "" and rows[0]["w2_successive"] == ""


def test_full_batch_from_truth_decreases(tmp_path):
    cfg = tiny_xfel_config(tmp_path, batch_size=20, n_chains=1, q=1, n_outer=30, snapshot_every=5,
                           init=InitSpec("truth"), step=0.1)
    cmd_gen(cfg)
    out, _ = cmd_run(cfg, quiet=True)
    rep = cmd_diagnose(out, quiet=True)
    s = np.array(rep.step_norm_series)
    assert s[-1] < s[0]
    assert rep.alignment[0]["rmsd"] < 0.5


def test_run_refuses_foreign_directory(tmp_path):
    d = tmp_path / "precious"
    d.mkdir()
    (d / "notes.txt").write_text("keep me")
    with pytest.raises(ArtifactError, match="refusing"):
        cmd_run(affine_config(n_outer=1, n_chains=1), out=d, quiet=True)
    assert (d / "notes.txt").read_text() == "keep me"


def test_run_overwrites_previous_artifact(tmp_path):
    cfg = affine_config(n_outer=2, n_chains=2, out=str(tmp_path / "r"))
    cmd_run(cfg, quiet=True)
    cmd_run(cfg.replace(seed=9), quiet=True)
    assert load_artifact(tmp_path / "r").config.seed == 9


def test_failed_run_leaves_no_partial(tmp_path, monkeypatch):
    real = cli.build_problem

    def broken(cfg, dataset=None):
        p = real(cfg, dataset)

        def factory(batch):
            raise RuntimeError("boom")
        return dataclasses.replace(p, factory=factory)
    monkeypatch.setattr(cli, "build_problem", broken)
    out = tmp_path / "r"
    with pytest.raises(RuntimeError):
        cmd_run(affine_config(n_outer=3, n_chains=1), out=out, quiet=True)
    assert not out.exists() and not (tmp_path / "r.partial").exists()


def test_numeric_abort_exit_code(tmp_path, monkeypatch):
    real = cli.build_problem

    def exploding(cfg, dataset=None):
        p = real(cfg, dataset)
        return dataclasses.replace(p, factory=lambda batch: (lambda x: x * 1e300))
    monkeypatch.setattr(cli, "build_problem", exploding)
    p = tmp_path / "c.json"
    save_config(affine_config(n_outer=5, n_chains=2, out=str(tmp_path / "r")), p)
    assert main(["run", str(p), "--quiet"]) == 3
    status = json.load(open(tmp_path / "r" / "status.json"))
    assert len(status["aborted"]) == 2 and "aborted" in status["aborted"][0]


def test_interrupt_leaves_truncated_artifact(tmp_path, monkeypatch):
    real = cli.build_problem
    calls = {"n": 0}

    def interrupted(cfg, dataset=None):
        p = real(cfg, dataset)

        def factory(batch):
            calls["n"] += 1
            if calls["n"] == 7:
                raise KeyboardInterrupt
            return p.factory(batch)
        return dataclasses.replace(p, factory=factory)
    monkeypatch.setattr(cli, "build_problem", interrupted)
    p = tmp_path / "c.json"
    save_config(affine_config(n_outer=10, n_chains=2, snapshot_every=2, out=str(tmp_path / "r")), p)
    assert main(["run", str(p), "--quiet"]) == 130
    out = tmp_path / "r"
    assert (out / "TRUNCATED").exists()
    art = load_artifact(out)
    assert art.status["truncated"] and not art.status["complete"]
    assert art.status["n_done"] == [6]
    monkeypatch.setattr(cli, "build_problem", real)
    rep = cmd_diagnose(out, quiet=True)
    assert rep.ks == [0, 2, 4, 6] and rep.extra["truncated"]


def test_seed_and_out_overrides(tmp_path):
    p = tmp_path / "c.json"
    save_config(affine_config(n_outer=3, n_chains=2, seed=1, out=str(tmp_path / "default")), p)
    assert main(["run", str(p), "--seed", "42", "--out", str(tmp_path / "custom"), "--quiet"]) == 0
    assert not (tmp_path / "default").exists()
    assert load_artifact(tmp_path / "custom").config.seed == 42


def test_threads_do_not_change_artifact(tmp_path):
    a, _ = cmd_run(affine_config(n_outer=20, n_chains=6, threads=1), out=tmp_path / "a", quiet=True)
    b, _ = cmd_run(affine_config(n_outer=20, n_chains=6, threads=3), out=tmp_path / "b", quiet=True)
    for name in ("snapshots.jsonl", "step_norms.csv"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()


# ---------------------------------------------------------------------------
# diagnose


def test_identity_operator_reports_no_decay(tmp_path):
    zero = AffineSpec((((0.0, 0.0), (0.0, 0.0)),), (0.0, 0.0))
    cfg = affine_config(affine=zero, n_outer=30, n_chains=3, snapshot_every=5)
    out, _ = cmd_run(cfg, out=tmp_path / "id", quiet=True)
    rep = cmd_diagnose(out, quiet=True)
    assert all(v == 0 for v in rep.step_norm_series)
    assert rep.rate is None and rep.extra["rate_status"] == "no decay"
    assert rep.to_dict()["rate"] is None


def test_affine_fitted_rate_matches_prediction(tmp_path):
    cfg = affine_config(n_outer=200, n_chains=100, snapshot_every=20)
    out, _ = cmd_run(cfg, out=tmp_path / "aff", quiet=True)
    rep = cmd_diagnose(out, quiet=True)
    predicted = rep.certificate["predicted_rate"]
    assert rep.certificate["label"] == "proven"
    assert rep.rate.claimed and abs(rep.rate.c - predicted) <= 0.05
    assert rep.extra["rate_status"] == "linear"
    # W2 to the fixed point shrinks
    assert rep.w2_to_reference[-1] < 1e-2 * rep.w2_to_reference[0]


def test_diagnose_refuses_tampered_config(tmp_path):
    out, _ = cmd_run(affine_config(n_outer=2, n_chains=1), out=tmp_path / "r", quiet=True)
    cpath = os.path.join(out, "config.json")
    cfg = json.load(open(cpath))
    cfg["seed"] = 999
    open(cpath, "w").write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    with pytest.raises(ArtifactError, match="config hash"):
        cmd_diagnose(out, quiet=True)
    assert main(["diagnose", out, "--quiet"]) == 1


def test_diagnose_refuses_changed_dataset(tmp_path):
    cfg = tiny_xfel_config(tmp_path, n_outer=2)
    cmd_gen(cfg)
    out, _ = cmd_run(cfg, quiet=True)
    cmd_gen(cfg.replace(seed=cfg.seed + 1))
    with pytest.raises(ArtifactError, match="dataset"):
        cmd_diagnose(out, quiet=True)


def test_diagnose_reports_missing_snapshots(tmp_path):
    out, _ = cmd_run(affine_config(n_outer=6, n_chains=1, snapshot_every=2), out=tmp_path / "r", quiet=True)
    snap = os.path.join(out, "snapshots.jsonl")
    lines = open(snap).read().splitlines()
    open(snap, "w").write("\n".join(lines[:2]) + "\n")
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    manifest["files"]["snapshots.jsonl"] = cli._sha256_file(snap)
    open(os.path.join(out, "manifest.json"), "w").write(json.dumps(manifest))
    with pytest.raises(ArtifactError, match="expected cadence every 2"):
        cmd_diagnose(out, quiet=True)


def test_end_to_end_csv_deterministic(tmp_path):
    tables = []
    for name in ("one", "two"):
        cfg = tiny_xfel_config(tmp_path / name)
        os.makedirs(tmp_path / name)
        cmd_gen(cfg)
        out, _ = cmd_run(cfg, quiet=True)
        cmd_diagnose(out, quiet=True)
        tables.append(open(os.path.join(out, "diagnostics", "diagnostics.csv"), "rb").read())
    assert tables[0] == tables[1]


def test_main_diagnose_and_plot(tmp_path, capsys):
    out, _ = cmd_run(affine_config(n_outer=60, n_chains=20, snapshot_every=10), out=tmp_path / "r", quiet=True)
    assert main(["diagnose", out, "--quiet"]) == 0
    assert "rate: linear" in capsys.readouterr().out
    assert main(["plot", os.path.join(out, "diagnostics")]) == 0
    for name in ("step_norms.svg", "moments.svg", "w2.svg"):
        assert open(os.path.join(out, "diagnostics", name)).read().startswith("<?xml")


# ---------------------------------------------------------------------------
# plot


def test_plot_empty_report(tmp_path):
    p = tmp_path / "report.json"
    p.write_text(json.dumps({"ks": [], "step_norm_series": [], "variance_trace": [], "mean_trajectory": [],
                             "w2_successive": [], "w2_to_reference": []}))
    paths = cmd_plot(p, tmp_path / "svg")
    assert len(paths) == 3
    for path in paths:
        text = open(path).read()
        assert "<svg" in text and "no data" in text


def _line_y_values(svg_text, gid):
    import xml.etree.ElementTree as ET
    root = ET.fromstring(svg_text)
    for el in root.iter():
        if el.get("id") == gid:
            for path in el.iter():
                d = path.get("d")
                if d:
                    nums = d.replace("M", " ").replace("L", " ").split()
                    return np.array([float(v) for v in nums[1::2]])
    raise AssertionError(f"no element {gid}")


def test_plot_geometric_decay_is_monotone(tmp_path):
    p = plot_step_norms(0.9 ** np.arange(1, 51), tmp_path / "s.svg")
    ys = _line_y_values(open(p).read(), "step-norm-line")
    # SVG y grows downwards, so a decaying curve has increasing y
    assert len(ys) == 50 and np.all(np.diff(ys) > 0)


def test_plot_byte_identical(tmp_path):
    report = {"ks": [0, 1, 2], "step_norm_series": [1.0, 0.5, 0.25], "variance_trace": [1.0, 0.5, 0.2],
              "mean_trajectory": [[0, 1], [0, 0.5], [0, 0.2]], "w2_successive": [None, 0.3, 0.1],
              "w2_to_reference": [1.0, 0.6, 0.3]}
    p = tmp_path / "report.json"
    p.write_text(json.dumps(report))
    a = [open(x, "rb").read() for x in cmd_plot(p, tmp_path / "a")]
    b = [open(x, "rb").read() for x in cmd_plot(p, tmp_path / "b")]
    assert a == b
