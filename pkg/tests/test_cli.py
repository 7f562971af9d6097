import json

import numpy as np
import pytest
from click.testing import CliRunner

from denoisefuse import backbone as bbmod
from denoisefuse.cli import main
from denoisefuse.fusion import load_fused

SMALL = [
    "backbone.dims=[8,8,8]", "data.dim=8", "data.num_ids=8", "data.per_id=8", "data.query_per_id=2",
    "train.epochs=5", "eval.samples=100", "eval.repeats=10", "eval.batch=32",
]

GOLDEN_EVAL_KEYS = {"metric", "variants"}
GOLDEN_VARIANT_KEYS = {"map", "rank1", "cmc"}
GOLDEN_BENCH_KEYS = {"metric", "variants", "timing"}
GOLDEN_VERIFY_KEYS = {"mode", "samples", "tol", "max_abs_err", "max_rel_err", "pass"}


def run(out, cmd, *extra, expect=0):
    args = [cmd, "-s", f"paths.out_dir={out}"]
    for item in SMALL + list(extra):
        args += ["-s", item]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == expect, result.output
    return result


def pipeline(out, *extra, upto=("gen-data", "train", "fuse")):
    for cmd in upto:
        run(out, cmd, *extra)


def test_gen_data_is_byte_identical_and_creates_dirs(tmp_path):
    a, b = tmp_path / "a" / "nested", tmp_path / "b"
    run(a, "gen-data")
    run(b, "gen-data")
    for name in ("data/query.dnfm", "data/gallery.dnfm", "data/train.dnfm", "data/meta.json",
                 "data/labels.json", "backbone.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_data_rejects_single_identity(tmp_path):
    res = run(tmp_path, "gen-data", "data.num_ids=1", expect=2)
    assert "data.num_ids" in res.output


def test_unknown_config_key_and_missing_file(tmp_path):
    assert "nope" in run(tmp_path, "gen-data", "data.nope=1", expect=2).output
    res = CliRunner().invoke(main, ["gen-data", "-c", str(tmp_path / "missing.json")])
    assert res.exit_code == 2


def test_config_file_is_read(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "data": {"noise_level": 0.5}}))
    res = CliRunner().invoke(main, ["gen-data", "-c", str(cfg), "-s", f"paths.out_dir={tmp_path}"]
                             + sum((["-s", s] for s in SMALL), []))
    assert res.exit_code == 0, res.output
    meta = json.loads((tmp_path / "data" / "meta.json").read_text())
    assert meta["seed"] == 3 and meta["noise_level"] == 0.5


def test_label_free_training(tmp_path):
    run(tmp_path, "gen-data", "data.labels=false")
    assert not (tmp_path / "data" / "labels.json").exists()
    run(tmp_path, "train", "data.labels=false")
    report = json.loads((tmp_path / "train_report.json").read_text())
    assert len(report["train"]["final_losses"]) == 2
    assert "data.labels" not in report
    res = run(tmp_path, "train", "train.lam=0.3", expect=2)
    assert "lam" in res.output


def test_supervised_training_with_labels(tmp_path):
    pipeline(tmp_path, "train.lam=0.3", upto=("gen-data", "train"))


def test_training_reproducible_and_backbone_unchanged(tmp_path):
    run(tmp_path, "gen-data")
    bb_before = (tmp_path / "backbone.ckpt").read_bytes()
    run(tmp_path, "train")
    first = (tmp_path / "denoisers.ckpt").read_bytes()
    run(tmp_path, "train")
    assert (tmp_path / "denoisers.ckpt").read_bytes() == first
    assert (tmp_path / "backbone.ckpt").read_bytes() == bb_before


def test_training_divergence_exit_code(tmp_path):
    run(tmp_path, "gen-data")
    with np.errstate(all="ignore"):
        run(tmp_path, "train", "train.lr=1e6", expect=1)
    report = json.loads((tmp_path / "train_report.json").read_text())
    assert report["train"]["diverged"]
    assert not (tmp_path / "denoisers.ckpt").exists()


def test_train_without_data_is_usage_error(tmp_path):
    assert "not found" in run(tmp_path, "train", expect=2).output


def test_zero_epoch_literal_fuse_keeps_backbone_weights(tmp_path):
    pipeline(tmp_path, "train.epochs=0", "fusion.algebra=paper_literal")
    bb = bbmod.load(tmp_path / "backbone.ckpt")
    fm = load_fused(tmp_path / "fused.ckpt")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(bb.arrays(), fm.arrays()))
    assert fm.provenance["mode"]["algebra"] == "paper_literal"


def test_fuse_rejects_step_count_mismatch(tmp_path):
    pipeline(tmp_path, upto=("gen-data", "train"))
    assert "steps_per_layer" in run(tmp_path, "fuse", "fusion.steps_per_layer=2", expect=2).output


def test_verify_pass_fail_and_corruption(tmp_path):
    pipeline(tmp_path, "fusion.z_policy=sampled_once")
    assert "PASS" in run(tmp_path, "verify").output
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert set(report) == GOLDEN_VERIFY_KEYS and report["pass"]
    assert report["mode"]["z_policy"] == "sampled_once"
    run(tmp_path, "verify", "eval.tol=0", expect=1)
    raw = (tmp_path / "fused.ckpt").read_bytes()
    (tmp_path / "fused.ckpt").write_bytes(raw[: len(raw) // 2])
    run(tmp_path, "verify", expect=2)


def test_two_step_pipeline_verifies(tmp_path):
    pipeline(tmp_path, "fusion.steps_per_layer=2")
    run(tmp_path, "verify", "fusion.steps_per_layer=2")


def test_eval_on_noise_free_data(tmp_path):
    pipeline(tmp_path, "data.noise_level=0")
    run(tmp_path, "eval", "data.noise_level=0")
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert set(report) == GOLDEN_EVAL_KEYS
    assert set(report["variants"]) == {"baseline", "explicit", "fused"}
    for v in report["variants"].values():
        assert set(v) == GOLDEN_VARIANT_KEYS and len(v["cmc"]) == 10
    assert report["variants"]["baseline"]["map"] == 1.0


def test_eval_needs_labels(tmp_path):
    pipeline(tmp_path, "data.labels=false")
    assert "labels" in run(tmp_path, "eval", expect=2).output


def test_bench_report(tmp_path):
    pipeline(tmp_path)
    run(tmp_path, "bench")
    report = json.loads((tmp_path / "bench_report.json").read_text())
    assert set(report) == GOLDEN_BENCH_KEYS
    v = report["variants"]
    assert v["fused"]["param_count"] == v["baseline"]["param_count"]
    assert v["explicit"]["param_count"] == v["baseline"]["param_count"] + 2 * 8 * 8
    assert all(report["timing"][k]["latency_ns_per_sample"] > 0 for k in v)


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DNF_THREADS", "many")
    assert "DNF_THREADS" in run(tmp_path, "gen-data", expect=2).output


@pytest.mark.parametrize("cmd", ["gen-data", "train", "fuse", "verify", "eval", "bench"])
def test_help(cmd):
    assert CliRunner().invoke(main, [cmd, "--help"]).exit_code == 0
