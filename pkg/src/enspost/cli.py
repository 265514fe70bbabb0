"""Command line entry point: ``enspost {synth,train,evaluate,attention,correlate}``.

Every command reads an optional JSON config (``--config``), lets a few flags
override it, refuses to write into a non-empty ``--out`` without ``--force``
and stores the resolved config plus the tool version next to its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, plotting, training
from . import autodiff as ad
from .autodiff import DimensionError
from .errors import ConfigError, DataError, EnsembleSizeError, NumericError
from .models import ModelConfig, init_params, load_params, save_params, forward_transformer

log = logging.getLogger("enspost")

SYNTH_DEFAULTS = {"n_trainval": 576, "n_test": 128, "k": 20, "h": 8, "w": 16,
                  "val_fraction": 0.1, "seed": 0, "split_seed": 0, "dtype": "float32",
                  "gen": data.GenParams().to_dict()}
TRAIN_DEFAULTS = {"data": None, "model": {}, "train": {}, "resume": None}
EVAL_DEFAULTS = {"data": None, "checkpoint": None, "split": "test", "raw": False, "ddof": 1,
                 "sigma_floor": 1e-6, "seed": 0}
ATTN_DEFAULTS = {"data": None, "checkpoint": None, "sample": None, "split": "test"}
CORR_DEFAULTS = {"data": None, "checkpoint": None, "sample": None, "split": "test", "point": None,
                 "ddof": 1}
DEFAULTS = {"synth": SYNTH_DEFAULTS, "train": TRAIN_DEFAULTS, "evaluate": EVAL_DEFAULTS,
            "attention": ATTN_DEFAULTS, "correlate": CORR_DEFAULTS}


def _resolve(command, args):
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(doc)
    for key in ("data", "checkpoint", "sample"):
        if getattr(args, key, None) is not None:
            cfg[key] = args.__dict__[key]
    if getattr(args, "point", None) is not None:
        cfg["point"] = args.point
    if getattr(args, "raw", False):
        cfg["raw"] = True
    if args.seed is not None:
        if command == "train":
            cfg["model"]["seed"] = args.seed
            cfg["train"]["seed"] = args.seed
        elif "seed" in cfg:
            cfg["seed"] = args.seed
    if args.f64:
        if command == "synth":
            cfg["dtype"] = "float64"
        elif command == "train":
            cfg["model"]["dtype"] = "float64"
    return cfg


def _prepare_out(args, cfg, command):
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "tool_version": __version__, "config": cfg}
    (out / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def _need(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _load_normalized(directory, split, dtype=None):
    directory = Path(directory)
    manifest = data.load_manifest(directory / "manifest.json")
    raw = data.load_split(directory, split, manifest)
    stats = data.load_norm_stats(directory / "norm_stats.json")
    norm = data.apply_normalization(raw, stats)
    if dtype is not None:
        norm = norm.astype(dtype)
    return manifest, raw, norm


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg, out, figures=True):
    unknown = set(cfg) - set(SYNTH_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
    gen = data.GenParams.from_dict(cfg["gen"])
    grid = data.build_grid(cfg["h"], cfg["w"])
    dtype = {"float32": np.float32, "float64": np.float64}.get(cfg["dtype"])
    if dtype is None:
        raise ConfigError("dtype must be float32 or float64")
    n_tv, n_test = int(cfg["n_trainval"]), int(cfg["n_test"])
    ds = data.generate_synthetic(n_tv + n_test, cfg["k"], grid, gen, cfg["seed"], dtype=dtype)
    splits = ["train"] * n_tv + ["test"] * n_test
    manifest = data.write_dataset(out, ds, splits)
    manifest = data.split_dataset(manifest, cfg["val_fraction"], cfg["split_seed"])
    manifest.extra = {"seed": cfg["seed"], "gen_params": gen.to_dict(), "tool_version": __version__}
    data.save_manifest(out / "manifest.json", manifest)
    train_ids = set(manifest.ids("train"))
    train = ds.subset([i for i, s in enumerate(ds.ids) if s in train_ids])
    stats = data.fit_normalization(train)
    data.save_norm_stats(out / "norm_stats.json", stats)
    test = ds.subset(range(n_tv, n_tv + n_test)) if n_test else train
    raw = training.evaluate_raw(test, grid)
    expected = data.analytic_spread_skill(gen, cfg["k"])
    summary = {"n_train": len(manifest.ids("train")), "n_validation": len(manifest.ids("validation")),
               "n_test": len(manifest.ids("test")), "k": cfg["k"], "grid": [cfg["h"], cfg["w"]],
               "raw_crps": raw.report.crps, "raw_rmse": raw.report.rmse, "raw_spread": raw.report.spread,
               "raw_spread_skill": raw.report.spread_skill, "analytic_spread_skill": expected[2]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"samples: train {summary['n_train']}, validation {summary['n_validation']}, "
          f"test {summary['n_test']}; k={cfg['k']}, grid {cfg['h']}x{cfg['w']}")
    print(f"raw surface-temperature spread/skill: {raw.report.spread_skill:.4f} "
          f"(analytic {expected[2]:.4f})")
    return summary


def _model_config(cfg, manifest):
    mdoc = dict(cfg["model"])
    for key, val in (("h", manifest.h), ("w", manifest.w)):
        if key in mdoc and mdoc[key] != val:
            raise ConfigError(f"model.{key}={mdoc[key]} disagrees with dataset grid ({val})")
        mdoc[key] = val
    return ModelConfig.from_dict(mdoc)


def cmd_train(cfg, out, figures=True):
    directory = Path(_need(cfg, "data"))
    manifest = data.load_manifest(directory / "manifest.json")
    tcfg = training.TrainConfig.from_dict(cfg["train"])
    state = None
    if cfg.get("resume"):
        state, saved_cfg = training.load_state(cfg["resume"])
        if saved_cfg.seed != tcfg.seed:
            log.warning("resuming with train seed %d (state was %d)", tcfg.seed, saved_cfg.seed)
        mcfg = state.params.config
        params = state.params
    else:
        mcfg = _model_config(cfg, manifest)
        params = init_params(mcfg)
    dt = mcfg.np_dtype
    _, _, train_set = _load_normalized(directory, "train", dt)
    _, _, val_set = _load_normalized(directory, "validation", dt)
    grid = data.build_grid(manifest.h, manifest.w)

    def checkpoint(st):
        training.save_state(out / "state.ckpt", st, tcfg)

    result = training.train(params, train_set, val_set, grid, tcfg, state, on_epoch=checkpoint)
    result.params.extra = {"best_epoch": result.best_epoch, "best_val_crps": result.best_val}
    save_params(result.params, out / "model.ckpt")
    (out / "history.tsv").write_text(training.history_table(result.history))
    if figures:
        plotting.training_history(result.history, out / "history.png")
    print(f"best validation CRPS {result.best_val:.5f} at epoch {result.best_epoch}; "
          f"{len(result.history) - 1} epochs run")
    return result


def _report_rows(reports):
    width = max([12] + [len(r.label) for r in reports])
    lines = [f"{'Name':<{width}} | {'CRPS':>8} {'RMSE':>8} {'Spread':>8}", "-" * (width + 30)]
    for r in reports:
        lines.append(f"{r.label:<{width}} | {r.crps:8.4f} {r.rmse:8.4f} {r.spread:8.4f}")
    return "\n".join(lines) + "\n"


def _hist_table(counts, label):
    rows = [f"{label}\tcount"] + [f"{i}\t{int(c)}" for i, c in enumerate(counts)]
    return "\n".join(rows) + "\n"


def cmd_evaluate(cfg, out, figures=True):
    directory = Path(_need(cfg, "data"))
    manifest = data.load_manifest(directory / "manifest.json")
    raw_set = data.load_split(directory, cfg["split"], manifest)
    grid = data.build_grid(manifest.h, manifest.w)
    evals = {}
    evals["raw"] = training.evaluate_raw(raw_set, grid, cfg["ddof"], cfg["sigma_floor"], cfg["seed"])
    if cfg.get("checkpoint") and not cfg["raw"]:
        params = load_params(cfg["checkpoint"], {"h": manifest.h, "w": manifest.w})
        _, _, norm = _load_normalized(directory, cfg["split"], params.config.np_dtype)
        label = f"{params.config.variant} ({params.config.n_layers})"
        evals["model"] = training.evaluate(params, norm, grid, cfg["ddof"], cfg["sigma_floor"],
                                           cfg["seed"], label)
    elif not cfg["raw"]:
        raise ConfigError("evaluate needs a checkpoint unless raw mode is requested")
    reports = [e.report for e in evals.values()]
    (out / "scores.txt").write_text(_report_rows(reports))
    (out / "scores.json").write_text(json.dumps({k: e.report.to_dict() for k, e in evals.items()},
                                                indent=1) + "\n")
    for name, ev in evals.items():
        (out / f"samples_{name}.tsv").write_text(ev.report.samples_table())
        if ev.rank_counts is not None:
            (out / f"rank_histogram_{name}.tsv").write_text(_hist_table(ev.rank_counts, "rank"))
            if figures:
                plotting.rank_histogram(ev.rank_counts, out / f"rank_histogram_{name}.png",
                                        f"Rank histogram: {ev.report.label}")
        if ev.pit_counts is not None:
            (out / f"pit_histogram_{name}.tsv").write_text(_hist_table(ev.pit_counts, "bin"))
            if figures:
                plotting.pit_histogram(ev.pit_counts, out / f"pit_histogram_{name}.png",
                                       f"PIT histogram: {ev.report.label}")
    print(_report_rows(reports), end="")
    return evals


def _sample_index(ds, sample):
    if sample is None:
        return 0
    if str(sample) not in ds.ids:
        raise ConfigError(f"sample {sample!r} not found in split")
    return ds.ids.index(str(sample))


def cmd_attention(cfg, out, figures=True):
    directory = Path(_need(cfg, "data"))
    params = load_params(_need(cfg, "checkpoint"))
    if params.config.variant != "transformer":
        raise ConfigError("attention maps need a transformer checkpoint")
    manifest, _, norm = _load_normalized(directory, cfg["split"], params.config.np_dtype)
    grid = data.build_grid(manifest.h, manifest.w)
    i = _sample_index(norm, cfg["sample"])
    with ad.no_grad():
        _, diags = forward_transformer(norm.inputs[i], params, diagnostics=True)
    adir = out / "attention"
    adir.mkdir(exist_ok=True)
    for layer, d in enumerate(diags):
        for head in range(d.attn_map.shape[0]):
            data.write_tensor(adir / f"L{layer}_H{head}_map.etns", d.attn_map[head])
            data.write_tensor(adir / f"L{layer}_H{head}_weights.etns",
                              np.ascontiguousarray(d.weights[..., head]))
        if figures:
            plotting.attention_maps(d.attn_map, grid, out / f"attention_L{layer}.png", layer)
    print(f"wrote attention maps for {len(diags)} layer(s), sample {norm.ids[i]}")
    return diags


def cmd_correlate(cfg, out, figures=True):
    directory = Path(_need(cfg, "data"))
    params = load_params(_need(cfg, "checkpoint"))
    if params.config.variant == "ppnn":
        raise ConfigError("correlation fields need a member-by-member (transformer/direct) model")
    manifest, raw, norm = _load_normalized(directory, cfg["split"], params.config.np_dtype)
    grid = data.build_grid(manifest.h, manifest.w)
    point = _need(cfg, "point")
    if len(point) != 2 or not (0 <= point[0] < grid.h and 0 <= point[1] < grid.w):
        raise ConfigError(f"point {point} outside the {grid.h}x{grid.w} grid")
    point = (int(point[0]), int(point[1]))
    i = _sample_index(norm, cfg["sample"])
    post = training.predict(params, norm.inputs[i:i + 1])[0]
    fields = {}
    for name, members in (("raw", raw.inputs[i, :, data.SURFACE]), ("post", post)):
        corr, degenerate = metrics.spatial_correlation(members, point)
        fields[name] = corr
        data.write_tensor(out / f"correlation_{name}.etns", corr.astype(np.float64))
        np.savetxt(out / f"correlation_{name}.tsv", corr, delimiter="\t", fmt="%.6f")
        if degenerate.any():
            np.savetxt(out / f"correlation_{name}_degenerate.tsv", degenerate.astype(int),
                       delimiter="\t", fmt="%d")
            log.warning("%s: %d cell(s) with zero ensemble variance", name, int(degenerate.sum()))
    if figures:
        plotting.correlation_maps([fields["raw"], fields["post"]],
                                  ["raw ensemble", "post-processed"], grid, point, out / "correlation.png")
    print(f"correlation fields to point {point} written for sample {norm.ids[i]}")
    return fields


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
            "attention": cmd_attention, "correlate": cmd_correlate}


def _point(text):
    try:
        lat, lon = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("point must be LAT_INDEX,LON_INDEX") from exc
    return [lat, lon]


def build_parser():
    parser = argparse.ArgumentParser(prog="enspost", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"enspost {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--f64", action="store_true", help="64-bit floats")
        p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", help="dataset directory written by synth")
        if name in ("evaluate", "attention", "correlate"):
            p.add_argument("--checkpoint")
        if name in ("attention", "correlate"):
            p.add_argument("--sample", help="sample id (default: first of the split)")
        if name == "correlate":
            p.add_argument("--point", type=_point, help="LAT_INDEX,LON_INDEX")
        if name == "evaluate":
            p.add_argument("--raw", action="store_true", help="score only the raw ensemble")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args.command, args)
        out = _prepare_out(args, cfg, args.command)
        COMMANDS[args.command](cfg, out, figures=not args.no_figures)
    except (ConfigError, EnsembleSizeError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
