"""Scaling-law sweeps: train sibling configs differing along one axis and
compare them in both allocation regimes (fixed token count vs halting).

A sweep spec is a normal flat config plus two extra keys::

    sweep_axis = encoder_width
    sweep_values = 64, 256

Completed configurations are skipped on rerun (the checkpoint in the
value's output directory is reused when its digest matches), so an
interrupted sweep resumes where it stopped. Per-config failures are
caught and reported in the results instead of aborting the sweep.
"""

import dataclasses
import json
import logging
import os

import numpy as np

from . import checkpoint as ckpt_mod
from . import metrics as metrics_mod
from .config import base_digest, parse_config, validate
from .data import dataset_from_config
from .base_tokenizer import fit_base
from .errors import ConfigError, KarlError
from .karl_model import init_karl
from .training import train

log = logging.getLogger(__name__)

AXIS_FIELDS = {
    "encoder_width": "enc_width",
    "encoder_depth": "enc_depth",
    "decoder_width": "dec_width",
    "decoder_depth": "dec_depth",
    "codebook_size": "codebook_size",
    "continuous_vs_discrete": "mode_1d",
}

DEFAULT_EPS_LIST = (0.03, 0.05, 0.09)


@dataclasses.dataclass
class SweepSpec:
    axis: str
    values: tuple
    cfg: object  # shared Config; the axis field is overridden per value


def parse_sweep_spec(text):
    axis = None
    values = None
    cfg_lines = []
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped.startswith("sweep_axis"):
            axis = stripped.partition("=")[2].strip()
        elif stripped.startswith("sweep_values"):
            values = tuple(
                v.strip() for v in stripped.partition("=")[2].split(",") if v.strip()
            )
        else:
            cfg_lines.append(line)
    if axis is None or not values:
        raise ConfigError("sweep spec needs sweep_axis and sweep_values")
    if axis not in AXIS_FIELDS:
        raise ConfigError(f"unknown sweep axis {axis!r}; one of {sorted(AXIS_FIELDS)}")
    cfg = parse_config("\n".join(cfg_lines))
    if axis == "continuous_vs_discrete":
        vals = values
    else:
        try:
            vals = tuple(int(v) for v in values)
        except ValueError:
            raise ConfigError(f"sweep_values for {axis} must be ints: {values}") from None
    return SweepSpec(axis=axis, values=vals, cfg=cfg)


def derive_config(spec, value):
    cfg = dataclasses.replace(spec.cfg, **{AXIS_FIELDS[spec.axis]: value})
    return validate(cfg)


def ensure_base(cfg, out_root):
    """Fit (or reuse) the base tokenizer shared by all sweep configs."""
    path = os.path.join(out_root, f"base-{base_digest(cfg)}.npz")
    if os.path.exists(path):
        return ckpt_mod.load_base(path, cfg=cfg), path
    train_set = dataset_from_config(cfg, "train")
    base = fit_base(train_set, cfg)
    ckpt_mod.save_base(path, cfg, base)
    return base, path


def train_one(cfg, base, out_dir):
    """Train one 1D model to a combined checkpoint; reuses an existing
    matching checkpoint. Returns (model, checkpoint path, summary)."""
    path = os.path.join(out_dir, "karl.npz")
    if os.path.exists(path):
        try:
            _, model, _ = ckpt_mod.load_bundle(path, cfg=cfg)
            log.info("reusing checkpoint %s", path)
            return model, path, {"reused": True}
        except KarlError:
            log.info("checkpoint %s does not match config, retraining", path)
    os.makedirs(out_dir, exist_ok=True)
    train_set = dataset_from_config(cfg, "train")
    val_set = dataset_from_config(cfg, "val")
    model = init_karl(cfg)
    model, summary = train(
        model, base, train_set, cfg,
        val_dataset=val_set,
        log_path=os.path.join(out_dir, "metrics.jsonl"),
    )
    ckpt_mod.save_bundle(path, cfg, model, base, extra={"train_summary_keys": sorted(summary)})
    return model, path, summary


def eval_one(cfg, model, base, eps_list):
    val_set = dataset_from_config(cfg, "val")
    fixed = metrics_mod.eval_fixed_tokens(model, base, val_set, cfg.budget_grid)
    variable = metrics_mod.eval_variable_tokens(model, base, val_set, eps_list, cfg.threshold)
    return (
        {str(t): r.to_dict() for t, r in fixed.items()},
        {f"{e:g}": r.to_dict() for e, r in variable.items()},
    )


def run_sweep(spec, out_root, eps_list=DEFAULT_EPS_LIST):
    """Train and evaluate every value of the sweep; returns result list."""
    os.makedirs(out_root, exist_ok=True)
    base, base_path = ensure_base(spec.cfg, out_root)
    results = []
    for value in spec.values:
        entry = {"axis": spec.axis, "value": value, "error": None}
        try:
            cfg = derive_config(spec, value)
            out_dir = os.path.join(out_root, f"{spec.axis}={value}")
            model, path, summary = train_one(cfg, base, out_dir)
            fixed, variable = eval_one(cfg, model, base, eps_list)
            entry.update({
                "checkpoint": path,
                "config_digest": cfg.digest(),
                "fixed": fixed,
                "variable": variable,
            })
        except Exception as e:  # isolate per-config failures
            log.exception("sweep value %r failed", value)
            entry["error"] = f"{type(e).__name__}: {e}"
        results.append(entry)
    with open(os.path.join(out_root, "sweep_results.json"), "w") as f:
        json.dump({"base_checkpoint": base_path, "results": results}, f, indent=2)
    plot_sweep(results, out_root)
    return results


def plot_sweep(results, out_root):
    """Combined curves: fixed-regime metric vs token count, and
    variable-regime metric vs mean active tokens."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in results if not r.get("error")]
    if not ok:
        return []
    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in ok:
        pts = sorted((int(t), rep["l1_x10"]) for t, rep in r["fixed"].items())
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"{r['axis']}={r['value']}")
    ax.set_xlabel("token count (fixed for all images)")
    ax.set_ylabel("L1 x 10")
    ax.set_title("fixed-token allocation")
    ax.legend()
    p1 = os.path.join(out_root, "sweep_fixed.png")
    fig.savefig(p1, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(p1)

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in ok:
        pts = sorted(
            (rep["tokens_used"], rep["l1_x10"]) for rep in r["variable"].values()
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s",
                label=f"{r['axis']}={r['value']}")
    ax.set_xlabel("mean active tokens (halting)")
    ax.set_ylabel("L1 x 10")
    ax.set_title("variable-token allocation")
    ax.legend()
    p2 = os.path.join(out_root, "sweep_variable.png")
    fig.savefig(p2, dpi=110, bbox_inches="tight")
    plt.close(fig)
    paths.append(p2)
    return paths
