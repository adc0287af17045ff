"""Command-line entry points: training, evaluation, complexity analysis,
and scaling sweeps. Each command reads one flat config file, writes all
outputs under one run directory, and drops a manifest.json there with the
config digest so results stay traceable to the exact settings.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint
mismatch, 1 any other expected failure. Set KARL_NUMBA=0 (or
KARL_DETERMINISTIC=1) to force the pure-numpy kernel path.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from . import kc_analysis
from . import metrics as metrics_mod
from . import sweep as sweep_mod
from .base_tokenizer import fit_base
from .config import parse_config, validate
from .data import dataset_from_config
from .errors import CheckpointMismatchError, ConfigError, DataError, KarlError

log = logging.getLogger("karl")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


def _read_config(path, dataset_override=None):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    cfg = parse_config(text)
    if dataset_override:
        cfg = dataclasses.replace(cfg, data_source="folder", data_path=dataset_override)
    return validate(cfg)


def _out_dir(args, cfg):
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, cfg, command, extra=None):
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "config": dataclasses.asdict(cfg),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _parse_eps(arg, default):
    if not arg:
        return tuple(default)
    try:
        return tuple(float(v) for v in str(arg).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--eps expects comma-separated floats, got {arg!r}") from None


def cmd_train_base(args):
    cfg = _read_config(args.config, args.dataset)
    out = _out_dir(args, cfg)
    train_set = dataset_from_config(cfg, "train")
    base = fit_base(train_set, cfg)
    path = os.path.join(out, "base.npz")
    ckpt_mod.save_base(path, cfg, base)
    _write_manifest(out, cfg, "train-base", {"checkpoint": path})
    log.info("base tokenizer saved to %s", path)
    return 0


def cmd_train_karl(args):
    cfg = _read_config(args.config, args.dataset)
    out = _out_dir(args, cfg)
    if args.checkpoint:
        base = ckpt_mod.load_base(args.checkpoint, cfg=cfg)
    else:
        base, _ = sweep_mod.ensure_base(cfg, out)
    model, path, _ = sweep_mod.train_one(cfg, base, out)
    _write_manifest(out, cfg, "train-karl", {"checkpoint": path})
    log.info("model saved to %s", path)
    return 0


def _load_bundle(args):
    cfg = _read_config(args.config, args.dataset)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    _, model, base = ckpt_mod.load_bundle(args.checkpoint, cfg=cfg)
    return cfg, model, base


def cmd_eval(args):
    cfg, model, base = _load_bundle(args)
    out = _out_dir(args, cfg)
    val_set = dataset_from_config(cfg, "val")
    eps_list = _parse_eps(args.eps, sweep_mod.DEFAULT_EPS_LIST)
    results = {"mode": args.mode, "rows": []}
    if args.mode == "fixed":
        by_t = metrics_mod.eval_fixed_tokens(model, base, val_set, cfg.budget_grid)
        for t in cfg.budget_grid:
            results["rows"].append({"tokens": int(t), **by_t[t].to_dict()})
    elif args.mode == "variable":
        by_eps = metrics_mod.eval_variable_tokens(
            model, base, val_set, eps_list, cfg.threshold
        )
        for eps in eps_list:
            results["rows"].append({"eps": eps, **by_eps[eps].to_dict()})
    else:
        for rep in metrics_mod.threshold_satisfaction(
            model, base, val_set, eps_list, cfg.threshold
        ):
            results["rows"].append(rep.to_dict())
    path = os.path.join(out, f"eval_{args.mode}.json")
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
    _plot_eval(results, out, args.mode)
    _write_manifest(out, cfg, "eval", {"mode": args.mode, "results": path})
    for row in results["rows"]:
        log.info("%s", json.dumps(row))
    return 0


def _plot_eval(results, out, mode):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    rows = results["rows"]
    if mode == "fixed":
        ax.plot([r["tokens"] for r in rows], [r["l1_x10"] for r in rows], marker="o")
        ax.set_xlabel("token count")
        ax.set_ylabel("L1 x 10")
    elif mode == "variable":
        ax.plot([r["tokens_used"] for r in rows], [r["l1_x10"] for r in rows], marker="s")
        for r in rows:
            ax.annotate(f"eps={r['eps']:g}", (r["tokens_used"], r["l1_x10"]),
                        fontsize=8, xytext=(4, 4), textcoords="offset points")
        ax.set_xlabel("mean active tokens")
        ax.set_ylabel("L1 x 10")
    else:
        for r in rows:
            margins = sorted(float(m) for m in r["frac_exceed"])
            ax.plot(margins, [r["frac_exceed"][f"{m:.2f}"] for m in margins],
                    marker="o", label=f"eps={r['eps']:g}")
        ax.set_xlabel("margin above eps")
        ax.set_ylabel("fraction exceeding")
        ax.legend()
    ax.set_title(f"{mode} evaluation")
    fig.savefig(os.path.join(out, f"eval_{mode}.png"), dpi=110, bbox_inches="tight")
    plt.close(fig)


def cmd_kc(args):
    cfg, model, base = _load_bundle(args)
    out = _out_dir(args, cfg)
    val_set = dataset_from_config(cfg, "val")
    eps = _parse_eps(args.eps, (0.03,))[0]
    lines_path = os.path.join(out, "kc_per_image.jsonl")
    agree = []
    family_t = {}
    with open(lines_path, "w") as f:
        for image in val_set:
            est = kc_analysis.kc_one_pass(model, base, image, cfg.t_max, eps, cfg.threshold)
            probe = kc_analysis.delta_probe(model, base, image)
            line = {
                "id": image.id,
                "kind": image.kind,
                "eps": eps,
                "t_hat": est.t_hat,
                "satisfied": est.satisfied,
                "achieved_err": round(est.achieved_err, 6),
                "delta": round(probe.delta, 6),
            }
            if args.oracle:
                oracle = kc_analysis.kc_oracle_search(model, base, image, eps)
                line["oracle_t"] = oracle.t_hat
                line["agree"] = oracle.t_hat == _snap_to_grid(est.t_hat, cfg.budget_grid)
                agree.append(line["agree"])
            family_t.setdefault(image.kind or "folder", []).append(est.t_hat)
            f.write(json.dumps(line) + "\n")
    buckets = kc_analysis.bucket_complexity(model, base, val_set, eps, bucket_width=8)
    summary = {
        "eps": eps,
        "n": buckets["n"],
        "buckets": buckets["buckets"],
        "mean_t_hat": buckets["mean_t_hat"],
        "family_mean_t_hat": {
            k: float(np.mean(v)) for k, v in sorted(family_t.items())
        },
    }
    if args.oracle:
        summary["oracle_agreement"] = float(np.mean(agree)) if agree else 0.0
    with open(os.path.join(out, "kc_summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    _write_manifest(out, cfg, "kc", {"per_image": lines_path})
    log.info("%s", json.dumps(summary))
    return 0


def _snap_to_grid(t_hat, grid):
    """Smallest grid count >= t_hat (grid max when none), for comparing a
    per-token estimate against the grid-resolution oracle."""
    for t in grid:
        if t >= t_hat:
            return int(t)
    return int(grid[-1])


def cmd_sweep(args):
    try:
        with open(args.config) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read sweep spec {args.config}: {e}") from None
    spec = sweep_mod.parse_sweep_spec(text)
    if args.dataset:
        spec.cfg = dataclasses.replace(
            spec.cfg, data_source="folder", data_path=args.dataset
        )
    out = args.out or spec.cfg.out_dir
    os.makedirs(out, exist_ok=True)
    results = sweep_mod.run_sweep(spec, out)
    _write_manifest(out, spec.cfg, "sweep",
                    {"axis": spec.axis, "values": list(spec.values)})
    failures = [r for r in results if r.get("error")]
    for r in failures:
        log.error("sweep %s=%s failed: %s", r["axis"], r["value"], r["error"])
    return 1 if len(failures) == len(results) else 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="karl",
        description="Adaptive-token image compression experiments.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("--config", required=True, help="flat key=value config file")
        sp.add_argument("--out", default=None, help="run directory (default: config out_dir)")
        sp.add_argument("--dataset", default=None, help="image folder overriding the config data source")
        sp.set_defaults(fn=fn)
        return sp

    add("train-base", cmd_train_base, help="fit the frozen patch autoencoder")

    sp = add("train-karl", cmd_train_karl, help="train the adaptive 1D tokenizer")
    sp.add_argument("--checkpoint", default=None, help="existing base tokenizer checkpoint")

    sp = add("eval", cmd_eval, help="reconstruction metrics on the validation split")
    sp.add_argument("--checkpoint", required=True, help="combined model checkpoint")
    sp.add_argument("--mode", choices=("fixed", "variable", "threshold"), default="fixed")
    sp.add_argument("--eps", default=None, help="comma-separated error targets")

    sp = add("kc", cmd_kc, help="per-image complexity estimates and buckets")
    sp.add_argument("--checkpoint", required=True, help="combined model checkpoint")
    sp.add_argument("--eps", default=None, help="error target (first value used)")
    sp.add_argument("--oracle", action="store_true",
                    help="also run the exhaustive prefix search and report agreement")

    sp = add("sweep", cmd_sweep, help="train sibling configs along one axis")

    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except CheckpointMismatchError as e:
        log.error("checkpoint mismatch: %s", e)
        return EXIT_CHECKPOINT
    except KarlError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
