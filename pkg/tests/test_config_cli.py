import json

import numpy as np
import pytest

from vesselda import cli, io
from vesselda.config import load_config, parse_override
from vesselda.errors import ConfigError
from vesselda.figures import min_ip, mip, run_figures, volume_figures


def test_defaults_are_desk_profile():
    cfg = load_config()
    assert cfg.image_size == 64 and cfg.net.size == 64
    assert cfg.phase1.iterations == 20000 and cfg.phase2.iterations == 5000
    assert cfg.phase1.batch_size == 4 and cfg.phase2.batch_size == 4
    s = cfg.synthgen
    assert (s.source_train, s.target_unlabeled, s.target_labeled, s.val, s.test_source, s.test_target) == \
        (45, 17, 3, 4, 4, 4)


def test_full_scale_preset():
    cfg = load_config(preset="full")
    assert cfg.image_size == 512 and cfg.phase1.iterations == 250000 and cfg.phase2.iterations == 50000


def test_overrides_and_seed_propagation():
    cfg = load_config(overrides=["seed=7", "phase2.lr_e=0.01", "sato.scales_px=[1.0,2.0]"])
    assert cfg.phase1.seed == 7 and cfg.phase2.seed == 7
    assert cfg.phase2.lr_e == 0.01 and cfg.sato.scales_px == (1.0, 2.0)
    assert parse_override("a.b=3") == {"a": {"b": 3}}
    assert parse_override("a=text") == {"a": "text"}
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_hash_tracks_content():
    a, b = load_config(), load_config()
    assert a.hash() == b.hash()
    assert load_config(overrides=["phase1.iterations=5"]).hash() != a.hash()


def test_unknown_key_names_key_and_line(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "seed": 1,\n  "phase1": {\n    "iteratoins": 3\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"c\.json:4: unknown key phase1\.'iteratoins'"):
        load_config(path)


def test_cli_config_errors_exit_2(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{\n  "bogus": 1\n}\n')
    code = cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "bogus" in err and ":2:" in err
    path.write_text("{not json")
    assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_runtime_failure_marks_manifest(tmp_path):
    code = cli.main(["preprocess", "--preset", "smoke", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_RUNTIME
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["error"]


def test_evaluate_identical_dirs_gives_one(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(2):
        lab = rng.integers(0, 3, (3, 16, 16)).astype(np.uint8)
        lab[:, 4:12, 8] = 2
        io.save_array(tmp_path / "gt" / f"v{k}_label", lab)
        io.save_array(tmp_path / "pred" / f"v{k}_pred", lab)
    out = tmp_path / "rep" / "report.json"
    assert cli.main(["evaluate", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                     "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    for metric in ("dice", "precision", "recall", "cldice"):
        assert rep["summary"]["vessels"][metric]["mean"] == pytest.approx(1.0)
    for metric in ("dice", "precision", "recall"):
        assert rep["summary"]["brain"][metric]["mean"] == pytest.approx(1.0)
    assert out.with_suffix(".txt").exists()


def test_projections():
    vol = np.random.default_rng(1).normal(size=(5, 8, 8))
    assert np.all(mip(vol) >= min_ip(vol))
    const = np.full((4, 6, 6), 0.3)
    assert np.array_equal(mip(const), min_ip(const))


def test_figures_single_slice_and_missing_mask(tmp_path, caplog):
    img = np.zeros((1, 8, 8), np.float32)
    paths = volume_figures(img, np.zeros((1, 8, 8), np.uint8), tmp_path, "one")
    assert len(paths) == 3 and all(p.exists() for p in paths)
    paths = volume_figures(img, None, tmp_path, "nolabel")
    assert len(paths) == 2 and "no mask" in caplog.text
    io.save_array(tmp_path / "imgs" / "v", img, domain="source")
    io.save_array(tmp_path / "preds" / "v_pred", np.zeros((1, 8, 8), np.uint8))
    io.save_array(tmp_path / "preds" / "w_pred", np.zeros((1, 8, 8), np.uint8))
    written = run_figures(tmp_path / "imgs", tmp_path / "preds", tmp_path / "figs")
    assert len(written) == 3 and "no image volume for w" in caplog.text


def _pipeline(out):
    assert cli.main(["pipeline", "--preset", "smoke", "--out", str(out)]) == 0
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    return root, _pipeline(root / "a")


def test_smoke_pipeline_manifest(smoke_run):
    root, manifest = smoke_run
    assert manifest["status"] == "ok" and manifest["config_hash"] == load_config(preset="smoke").hash()
    head = manifest["summary_metrics"]["headline"]
    assert all(0.0 <= head[k] <= 1.0 for k in head)
    for sub in manifest["sub_manifests"]:
        assert json.loads(open(sub).read())["status"] == "ok"
    assert not any(a.startswith("phase1/") for a in manifest["artifacts"])
    assert list((root / "a" / "figures").glob("*_overlay.png"))


def test_smoke_pipeline_resume_reuses(smoke_run, capsys):
    root, _ = smoke_run
    assert cli.main(["pipeline", "--preset", "smoke", "--out", str(root / "a"), "--resume"]) == 0
    assert "phase1: reused" in capsys.readouterr().out
