"""Command-line workflow: gen-data, train, fuse, verify, eval, bench.

Exit codes: 0 success/pass, 1 verification failure or diverged training,
2 usage, configuration or I/O error.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import backbone as bbmod
from . import checkpoint
from .config import (ConfigError, load_config, mode_from, resolve_path, schedule_from,
                     train_config_from, validate_data)
from .denoiser import load_denoisers, save_denoisers, train_denoisers
from .evalkit import bench_many, evaluate_dataset, gen_synthetic, load_dataset, save_dataset
from .exceptions import CheckpointError, DivergenceError, ShapeError
from .fusion import (FusionMode, explicit_forward, fuse_model, load_fused, save_fused,
                     unfused_param_count, verify_equivalence)
from .numerics import Rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.dumps_json(payload))


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _threads() -> int:
    raw = os.environ.get("DNF_THREADS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"DNF_THREADS must be an integer, got {raw!r}")


def command(fn):
    """Load the config, pin thread count and map failures onto the exit-code contract."""

    @click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="JSON run configuration.")
    @click.option("-s", "--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config entry with a dotted key, e.g. train.lr=0.01.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, **kwargs):
        try:
            if config_path is not None and not Path(config_path).exists():
                raise UsageError(f"config file not found: {config_path}")
            cfg = load_config(config_path, overrides)
            with threadpool_limits(limits=_threads()):
                code = fn(cfg, **kwargs)
        except (UsageError, ConfigError, CheckpointError, ShapeError, OSError, ValueError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        sys.exit(code or EXIT_OK)

    return wrapper


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Train per-layer feature denoisers, fuse them into a frozen backbone and evaluate."""


@main.command("gen-data")
@command
def gen_data(cfg):
    """Write the synthetic dataset and the frozen toy backbone."""
    d = validate_data(cfg)
    ds = gen_synthetic(int(d["num_ids"]), int(d["per_id"]), int(d["dim"]), float(d["noise_level"]),
                       int(cfg["seed"]), query_per_id=d.get("query_per_id"),
                       signal_rank=d.get("signal_rank"))
    data_dir = resolve_path(cfg, "dataset")
    save_dataset(ds, data_dir, labels=bool(d.get("labels", True)))
    bb_path = resolve_path(cfg, "backbone")
    bb_path.parent.mkdir(parents=True, exist_ok=True)
    bb = bbmod.make_toy_backbone(int(cfg["seed"]), cfg["backbone"]["dims"], cfg["backbone"]["activation"])
    bbmod.save(bb, bb_path)
    click.echo(f"wrote dataset to {data_dir} and backbone to {bb_path}")
    return EXIT_OK


@main.command()
@command
def train(cfg):
    """Fit one noise predictor per block on the frozen backbone's features."""
    bb_path = _require_file(resolve_path(cfg, "backbone"), "backbone checkpoint")
    data_dir = _require_file(resolve_path(cfg, "dataset"), "dataset")
    bb_hash = _file_hash(bb_path)
    bb = bbmod.load(bb_path)
    ds = load_dataset(data_dir)
    tcfg = train_config_from(cfg)
    s = schedule_from(cfg)
    mode = mode_from(cfg)
    if tcfg.lam > 0 and ds.train_ids is None:
        raise UsageError(f"train.lam={tcfg.lam} needs identity labels but {data_dir} has none")
    out = resolve_path(cfg, "denoisers")
    report_path = out.with_name("train_report.json")
    try:
        layers, report = train_denoisers(bb, ds.train, s, tcfg, labels=ds.train_ids if tcfg.lam > 0 else None,
                                         steps_per_layer=mode.steps_per_layer)
        code = EXIT_OK
    except DivergenceError as exc:
        click.echo(f"error: {exc}", err=True)
        report, layers, code = exc.report, None, EXIT_FAIL
    _write_json(report_path, {"train": report.to_dict(), "config": cfg["train"], "seed": cfg["seed"]})
    if layers is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_denoisers(layers, s, out, mode.steps_per_layer, extra={"lam": tcfg.lam, "seed": tcfg.seed})
        click.echo(f"wrote denoisers to {out}")
    if _file_hash(bb_path) != bb_hash:
        raise UsageError("backbone checkpoint changed during training")
    return code


def _load_models(cfg):
    bb = bbmod.load(_require_file(resolve_path(cfg, "backbone"), "backbone checkpoint"))
    layers, s, header = load_denoisers(_require_file(resolve_path(cfg, "denoisers"), "denoiser checkpoint"))
    if len(layers) != bb.N or any(d.dim != blk.d_in for d, blk in zip(layers, bb.blocks)):
        raise UsageError(f"denoiser dims {header['dims']} do not match backbone dims {bb.dims}")
    return bb, layers, s, header


@main.command()
@command
def fuse(cfg):
    """Merge trained denoisers into the backbone's affine layers."""
    bb, layers, s, header = _load_models(cfg)
    mode = mode_from(cfg)
    if mode.steps_per_layer != header.get("steps_per_layer", 1):
        raise UsageError(f"fusion.steps_per_layer={mode.steps_per_layer} but denoisers were trained "
                         f"with {header.get('steps_per_layer', 1)}")
    fm = fuse_model(bb, layers, s, mode, Rng(int(cfg["seed"])))
    out = resolve_path(cfg, "fused")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fused(fm, out)
    click.echo(f"wrote fused model to {out}")
    return EXIT_OK


@main.command()
@command
def verify(cfg):
    """Check fused outputs against the explicit denoise-then-affine path."""
    bb, layers, s, _ = _load_models(cfg)
    fm = load_fused(_require_file(resolve_path(cfg, "fused"), "fused checkpoint"))
    if fm.dims != bb.dims:
        raise UsageError(f"fused dims {fm.dims} do not match backbone dims {bb.dims}")
    mode = FusionMode(**fm.provenance["mode"])
    report = verify_equivalence(bb, layers, fm, s, mode, int(cfg["eval"]["samples"]),
                                float(cfg["eval"]["tol"]), seed=int(cfg["seed"]))
    out = Path(cfg["paths"]["out_dir"]) / "verify_report.json"
    _write_json(out, report)
    status = "PASS" if report["pass"] else "FAIL"
    click.echo(f"{status} max_rel_err={report['max_rel_err']:.3e} max_abs_err={report['max_abs_err']:.3e}")
    return EXIT_OK if report["pass"] else EXIT_FAIL


def _variants(cfg):
    bb, layers, s, _ = _load_models(cfg)
    fm = load_fused(_require_file(resolve_path(cfg, "fused"), "fused checkpoint"))
    mode = FusionMode(**fm.provenance["mode"])
    variants = {
        "baseline": bb,
        "explicit": lambda X: explicit_forward(bb, layers, s, X, mode, fm.noise),
        "fused": fm,
    }
    return bb, layers, fm, variants


def _retrieval(cfg, variants):
    ds = load_dataset(_require_file(resolve_path(cfg, "dataset"), "dataset"))
    if not ds.has_labels:
        raise UsageError("retrieval evaluation needs identity labels")
    metric, max_k = cfg["eval"]["metric"], int(cfg["eval"]["max_k"])
    out = {}
    for name, fn in variants.items():
        rep = evaluate_dataset(ds.map(fn), metric, max_k)
        out[name] = {"map": rep.map, "rank1": rep.rank1, "cmc": rep.cmc}
    return out, ds


@main.command("eval")
@command
def eval_cmd(cfg):
    """mAP / Rank-1 / CMC for baseline, explicit-denoise and fused variants."""
    _, _, _, variants = _variants(cfg)
    metrics, _ = _retrieval(cfg, variants)
    report = {"metric": cfg["eval"]["metric"], "variants": metrics}
    out = Path(cfg["paths"]["out_dir"]) / "eval_report.json"
    _write_json(out, report)
    for name, m in metrics.items():
        click.echo(f"{name:9s} mAP={m['map']:.4f} rank1={m['rank1']:.4f}")
    return EXIT_OK


@main.command()
@command
def bench(cfg):
    """Retrieval metrics plus parameter counts and median per-sample latency."""
    bb, layers, fm, variants = _variants(cfg)
    metrics, ds = _retrieval(cfg, variants)
    counts = {
        "baseline": bbmod.param_count(bb),
        "explicit": unfused_param_count(bb, layers),
        "fused": bbmod.param_count(fm),
    }
    batch = Rng(int(cfg["seed"])).standard_normal((int(cfg["eval"]["batch"]), bb.d_in))
    latency = bench_many(variants, batch, int(cfg["eval"]["repeats"]))
    for name in metrics:
        metrics[name]["param_count"] = counts[name]
    report = {
        "metric": cfg["eval"]["metric"],
        "variants": metrics,
        "timing": {name: {"latency_ns_per_sample": latency[name]} for name in variants},
    }
    out = Path(cfg["paths"]["out_dir"]) / "bench_report.json"
    _write_json(out, report)
    for name in variants:
        click.echo(f"{name:9s} params={counts[name]:7d} latency={latency[name]:10.1f} ns/sample")
    return EXIT_OK


if __name__ == "__main__":
    main()
