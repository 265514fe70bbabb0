import json

import numpy as np
import pytest

from enspost import cli, data, models as md

SMALL_SYNTH = {"n_trainval": 40, "n_test": 8, "k": 6, "h": 4, "w": 8}
SMALL_MODEL = {"channels": 4, "heads": 2, "n_layers": 1}
SMALL_TRAIN = {"max_epochs": 2, "subsample_members": 4, "batch_size": 8}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    cfg = _write(workdir / "synth.json", SMALL_SYNTH)
    assert _run("synth", "--config", cfg, "--out", workdir / "data", "--f64", "--no-figures") == 0
    return workdir / "data"


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    cfg = _write(workdir / "train.json", {"data": str(dataset), "model": SMALL_MODEL, "train": SMALL_TRAIN})
    assert _run("train", "--config", cfg, "--out", workdir / "run", "--f64") == 0
    return workdir / "run"


# -- synth ------------------------------------------------------------------------

def test_synth_writes_dataset(dataset, capsys):
    manifest = data.load_manifest(dataset / "manifest.json")
    assert len(manifest.ids("train")) == 36
    assert len(manifest.ids("validation")) == 4
    assert len(manifest.ids("test")) == 8
    assert len(list((dataset / "samples").glob("*.etns"))) == 2 * 48
    resolved = json.loads((dataset / "config.json").read_text())
    assert resolved["command"] == "synth" and "tool_version" in resolved
    assert resolved["config"]["gen"] == data.GenParams().to_dict()
    assert data.load_norm_stats(dataset / "norm_stats.json").std.shape == (3,)


def test_synth_seed_reproducible(tmp_path):
    cfg = _write(tmp_path / "s.json", {**SMALL_SYNTH, "n_trainval": 10, "n_test": 2})
    for name in ("a", "b"):
        assert _run("synth", "--config", cfg, "--seed", 4, "--out", tmp_path / name, "--no-figures") == 0
    for f in sorted((tmp_path / "a").rglob("*.etns")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert _run("synth", "--config", cfg, "--seed", 5, "--out", tmp_path / "c", "--no-figures") == 0
    a = data.read_tensor(tmp_path / "a/samples/s00000_target.etns")
    c = data.read_tensor(tmp_path / "c/samples/s00000_target.etns")
    assert not np.array_equal(a, c)


def test_existing_output_needs_force(dataset, tmp_path, capsys):
    cfg = _write(tmp_path / "s.json", {**SMALL_SYNTH, "n_trainval": 10, "n_test": 2})
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert _run("synth", "--config", cfg, "--out", out, "--no-figures") == 2
    assert "--force" in capsys.readouterr().err
    assert _run("synth", "--config", cfg, "--out", out, "--no-figures", "--force") == 0


def test_summary_matches_raw_evaluation(dataset, tmp_path):
    summary = json.loads((dataset / "summary.json").read_text())
    assert _run("evaluate", "--data", dataset, "--raw", "--out", tmp_path / "raw", "--no-figures") == 0
    scores = json.loads((tmp_path / "raw/scores.json").read_text())["raw"]["aggregate"]
    assert abs(scores["spread_skill"] - summary["raw_spread_skill"]) < 1e-6
    assert abs(scores["CRPS"] - summary["raw_crps"]) < 1e-6


# -- exit codes ---------------------------------------------------------------------

def test_unknown_config_key_is_config_error(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.json", {"n_samples": 3})
    assert _run("synth", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "n_samples" in capsys.readouterr().err


def test_nested_unknown_key_rejected(tmp_path, dataset):
    cfg = _write(tmp_path / "bad.json", {"data": str(dataset), "model": {"depth": 2}})
    assert _run("train", "--config", cfg, "--out", tmp_path / "o") == 2


def test_missing_dataset_is_data_error(tmp_path, capsys):
    assert _run("evaluate", "--data", tmp_path / "nowhere", "--raw", "--out", tmp_path / "o") == 3
    assert "data error" in capsys.readouterr().err


def test_corrupt_checkpoint_is_data_error(tmp_path, dataset):
    (tmp_path / "bad.ckpt").write_bytes(b"ETNC\x01junk")
    assert _run("evaluate", "--data", dataset, "--checkpoint", tmp_path / "bad.ckpt",
                "--out", tmp_path / "o") == 3


def test_bad_arguments_exit_two(capsys):
    assert _run("train", "--nonsense") == 2
    assert _run("correlate", "--point", "x") == 2
    assert _run("--version") == 0


# -- train --------------------------------------------------------------------------------

def test_train_outputs(trained):
    rows = (trained / "history.tsv").read_text().splitlines()
    assert rows[0] == "epoch\ttrain_loss\tval_crps\tlr"
    assert len(rows) == 4
    assert (trained / "history.png").stat().st_size > 0
    params = md.load_params(trained / "model.ckpt")
    assert params.config.h == 4 and params.config.channels == 4
    assert "best_epoch" in params.extra


def test_train_resume_continues_identically(workdir, dataset, tmp_path):
    longer = {**SMALL_TRAIN, "max_epochs": 3}
    full_cfg = _write(tmp_path / "full.json", {"data": str(dataset), "model": SMALL_MODEL, "train": longer})
    assert _run("train", "--config", full_cfg, "--out", tmp_path / "full", "--f64", "--no-figures") == 0
    resume_cfg = _write(tmp_path / "resume.json", {"data": str(dataset), "train": longer,
                                                  "resume": str(workdir / "run/state.ckpt")})
    assert _run("train", "--config", resume_cfg, "--out", tmp_path / "resumed", "--no-figures") == 0
    full = (tmp_path / "full/history.tsv").read_text()
    resumed = (tmp_path / "resumed/history.tsv").read_text()
    assert resumed == full
    assert (tmp_path / "full/model.ckpt").read_bytes() == (tmp_path / "resumed/model.ckpt").read_bytes()


@pytest.mark.parametrize("variant", ["direct", "ppnn"])
def test_train_baselines(variant, dataset, tmp_path):
    cfg = _write(tmp_path / "t.json", {"data": str(dataset), "model": {**SMALL_MODEL, "variant": variant},
                                       "train": {**SMALL_TRAIN, "max_epochs": 1}})
    assert _run("train", "--config", cfg, "--out", tmp_path / "o", "--no-figures") == 0
    assert md.load_params(tmp_path / "o/model.ckpt").config.variant == variant


def test_train_grid_mismatch(dataset, tmp_path, capsys):
    cfg = _write(tmp_path / "t.json", {"data": str(dataset), "model": {**SMALL_MODEL, "h": 8}})
    assert _run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "model.h" in capsys.readouterr().err


# -- evaluate -------------------------------------------------------------------------------

def test_evaluate_report_layout(trained, dataset, tmp_path, capsys):
    assert _run("evaluate", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                "--out", tmp_path / "ev") == 0
    printed = capsys.readouterr().out.splitlines()
    header = printed[0].split()
    assert header == ["Name", "|", "CRPS", "RMSE", "Spread"]
    assert printed[2].startswith("raw ensemble") and printed[3].startswith("transformer (1)")
    for name in ("raw", "model"):
        counts = np.loadtxt(tmp_path / f"ev/rank_histogram_{name}.tsv", skiprows=1)
        assert counts.shape == (7, 2) and counts[:, 1].sum() == 8 * 32
        assert (tmp_path / f"ev/rank_histogram_{name}.png").exists()
        assert (tmp_path / f"ev/samples_{name}.tsv").read_text().count("\n") == 10
    assert (tmp_path / "ev/scores.txt").read_text().splitlines() == printed


def test_evaluate_is_deterministic(trained, dataset, tmp_path):
    for name in ("a", "b"):
        assert _run("evaluate", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                    "--out", tmp_path / name, "--no-figures") == 0
    for f in ("scores.json", "samples_model.tsv", "rank_histogram_model.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_evaluate_ppnn_writes_pit(dataset, tmp_path):
    params = md.init_params(md.ModelConfig(variant="ppnn", channels=4, heads=2, h=4, w=8))
    md.save_params(params, tmp_path / "p.ckpt")
    assert _run("evaluate", "--data", dataset, "--checkpoint", tmp_path / "p.ckpt",
                "--out", tmp_path / "ev") == 0
    assert (tmp_path / "ev/pit_histogram_model.tsv").exists()
    assert (tmp_path / "ev/pit_histogram_model.png").exists()


def test_evaluate_without_checkpoint(dataset, tmp_path):
    assert _run("evaluate", "--data", dataset, "--out", tmp_path / "o") == 2


# -- attention ---------------------------------------------------------------------------

def test_attention_files(trained, dataset, tmp_path):
    assert _run("attention", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                "--sample", "s00041", "--out", tmp_path / "at") == 0
    files = sorted(p.name for p in (tmp_path / "at/attention").iterdir())
    assert files == ["L0_H0_map.etns", "L0_H0_weights.etns", "L0_H1_map.etns", "L0_H1_weights.etns"]
    for head in range(2):
        w = data.read_tensor(tmp_path / f"at/attention/L0_H{head}_weights.etns")
        assert w.shape == (6, 6)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert data.read_tensor(tmp_path / f"at/attention/L0_H{head}_map.etns").shape == (4, 8)
    assert (tmp_path / "at/attention_L0.png").exists()


def test_attention_zero_keys_give_zero_maps(dataset, tmp_path):
    params = md.init_params(md.ModelConfig(channels=4, heads=2, n_layers=2, h=4, w=8))
    for blk in params.blocks:
        blk.W_k.assign(np.zeros_like(blk.W_k.data))
    md.save_params(params, tmp_path / "z.ckpt")
    assert _run("attention", "--data", dataset, "--checkpoint", tmp_path / "z.ckpt",
                "--out", tmp_path / "at", "--no-figures") == 0
    maps = sorted((tmp_path / "at/attention").glob("*_map.etns"))
    assert len(maps) == 4
    for f in maps:
        assert not data.read_tensor(f).any()


def test_attention_unknown_sample(trained, dataset, tmp_path):
    assert _run("attention", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                "--sample", "nope", "--out", tmp_path / "o") == 2


# -- correlate ---------------------------------------------------------------------------

def test_correlate_fields(trained, dataset, tmp_path):
    assert _run("correlate", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                "--point", "2,5", "--out", tmp_path / "c") == 0
    for name in ("raw", "post"):
        corr = data.read_tensor(tmp_path / f"c/correlation_{name}.etns")
        assert corr.shape == (4, 8)
        assert corr[2, 5] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(np.loadtxt(tmp_path / f"c/correlation_{name}.tsv"), corr, atol=1e-6)
    assert (tmp_path / "c/correlation.png").exists()


def test_correlate_point_outside_grid(trained, dataset, tmp_path, capsys):
    assert _run("correlate", "--data", dataset, "--checkpoint", trained / "model.ckpt",
                "--point", "4,0", "--out", tmp_path / "c") == 2
    assert "outside" in capsys.readouterr().err
