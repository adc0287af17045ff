"""Two-phase loss-conditioned training.

Each iteration handles a batch of images twice:

* phase 1 (complexity estimation): encode at a sampled budget T with the
  zero-loss condition, decode with every token active, and record the
  achieved image-level l1 error eps0;
* phase 2 (tokenize at estimated complexity): re-encode at the full
  budget T_max conditioned on the discretized eps0, decode only the first
  T tokens (teacher forcing), and supervise halting so the extra tokens
  learn to halt.

When the sampled budget is already T_max, or when eps0 exceeds the last
loss-table entry (so no honest condition >= eps0 exists), the iteration
takes the no-masking branch: the condition is resampled from entries
strictly below eps0 and the labels keep every token. Those records log
delta_T = 0, so the curriculum invariant (never pair delta_T > 0 with a
condition below eps0) holds over the whole log.

One optimizer step per iteration on the summed phase-1 + phase-2 loss.
Stage 1 measures reconstruction in grid-token space; stage 2 through the
pixel decoder (unclamped, so saturated pixels keep gradient). eps0 and
every reported metric use the clamped pixel path.

In discrete 1D mode the codebook is seeded from encoder output before
the first step and dead codes are revived every REVIVE_EVERY iterations;
without this the quantizer collapses to a single code and the decoder
can only learn positional means.
"""

import dataclasses
import json
import time

import numpy as np

from . import base_tokenizer as base_mod
from .autodiff import Adam, Tensor, no_grad, softmax, take0
from .errors import InputError
from .karl_model import (
    EpsilonCondition,
    HaltingVector,
    VQStats,
    bridge_t,
    decode_t,
    encode_t,
    revive_dead_codes,
    seed_codebook,
)

import logging

log = logging.getLogger(__name__)

# dead-code revival window (iterations between usage checks)
REVIVE_EVERY = 25


@dataclasses.dataclass
class LossBundle:
    recon: float
    quant: float
    halt: float
    beta: float
    lam: float

    @property
    def total(self):
        return self.recon + self.beta * self.quant + self.lam * self.halt

    def to_dict(self):
        return {
            "recon": self.recon,
            "quant": self.quant,
            "halt": self.halt,
            "beta": self.beta,
            "lambda": self.lam,
            "total": self.total,
        }


@dataclasses.dataclass
class IterationRecord:
    image_id: str
    T: int  # phase-2 task budget; labels have length T + delta_T
    delta_T: int
    eic_T: int  # budget the complexity estimate ran at
    eps0: float
    eps_cond: EpsilonCondition
    eic: LossBundle
    ltc: LossBundle
    labels: list

    def to_json(self, iteration=None, stage=None):
        d = {
            "type": "iteration",
            "image_id": self.image_id,
            "T": self.T,
            "delta_T": self.delta_T,
            "eic_T": self.eic_T,
            "eps0": self.eps0,
            "eps_cond": {"value": self.eps_cond.value, "table_index": self.eps_cond.table_index},
            "eic": self.eic.to_dict(),
            "ltc": self.ltc.to_dict(),
            "labels": self.labels,
        }
        if iteration is not None:
            d["iteration"] = iteration
        if stage is not None:
            d["stage"] = stage
        return json.dumps(d)


def sample_budget(rng, grid):
    """Uniform draw from the budget grid."""
    if not len(grid):
        raise InputError("sample_budget: empty grid")
    return int(grid[rng.integers(0, len(grid))])


def discretize_eps(eps0, table):
    """Smallest table entry >= eps0; clamps to the maximum entry."""
    if eps0 < 0:
        raise InputError(f"discretize_eps: negative eps0 {eps0}")
    for i, v in enumerate(table):
        if v >= eps0:
            return EpsilonCondition(value=float(v), table_index=i)
    return EpsilonCondition(value=float(table[-1]), table_index=len(table) - 1)


def halting_labels(T, delta_T):
    return [0] * T + [1] * delta_T


def halting_loss(omega, T, delta_T):
    """Mean binary cross-entropy of omega against [0]*T + [1]*delta_T,
    probabilities clamped to [1e-6, 1 - 1e-6]."""
    om = omega.omega if isinstance(omega, HaltingVector) else np.asarray(omega, dtype=np.float64)
    if om.shape[0] != T + delta_T:
        raise InputError(
            f"halting_loss: omega length {om.shape[0]} != T + delta_T = {T + delta_T}"
        )
    p = np.clip(om, 1e-6, 1.0 - 1e-6)
    y = np.asarray(halting_labels(T, delta_T), dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def halting_loss_t(omega, T, delta_T):
    """Tensor version over a batch: omega (B, T + delta_T) -> (B,)."""
    y = np.asarray(halting_labels(T, delta_T), dtype=omega.dtype)[None, :]
    p = omega.clip(1e-6, 1.0 - 1e-6)
    bce = -(Tensor(y) * p.log() + Tensor(1.0 - y) * (1.0 - p).log())
    return bce.mean(axis=1)


# ---------------------------------------------------------------------------
# Reconstruction losses (stage- and base-mode-dependent)
# ---------------------------------------------------------------------------

def _ce_vec(logits, target_idx):
    """Per-image mean cross-entropy: logits (B, G, K) Tensor, targets (B, G)."""
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits - Tensor(m)
    lse = z.exp().sum(axis=-1).log()
    k = logits.shape[-1]
    onehot = np.eye(k, dtype=logits.dtype)[target_idx]
    tgt = (z * Tensor(onehot)).sum(axis=-1)
    return (lse - tgt).mean(axis=1)


def recon_vec(base, pred, target_tokens, target_pixels, stage):
    """Per-image reconstruction loss (B,) for the given training stage.

    Stage 1: grid-token space (squared error, or cross-entropy on base
    code logits in discrete base mode). Stage 2: pixel l1 through the
    base decoder; discrete base mode decodes a softmax-weighted mixture
    of codebook rows so the path stays differentiable.
    """
    if stage == 1:
        if base.mode == "discrete":
            return _ce_vec(pred, target_tokens["indices"])
        diff = pred - Tensor(target_tokens["tokens"])
        return (diff * diff).mean(axis=(1, 2))
    if base.mode == "discrete":
        emb = softmax(pred) @ Tensor(base.codebook)
    else:
        emb = pred
    img = base_mod.decode_tokens_t(base, emb)
    return (img - Tensor(target_pixels)).abs().mean(axis=(1, 2, 3))


def eps0_from_pred(base, pred_data, pixels):
    """Image-level l1 of the clamped pixel decode, per image (numpy only)."""
    img = base_mod.decode_pred(base, pred_data)
    return np.abs(img.astype(np.float64) - pixels.astype(np.float64)).mean(axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# Phase losses (tensor level, batched)
# ---------------------------------------------------------------------------

def eic_loss_t(model, base, grid_tokens_b, target_tokens, pixels, T, stage):
    """Phase 1 at budget T with the zero-loss condition, all tokens active.

    Returns (recon (B,), quant (B,), eps0 (B,) numpy).
    """
    b = grid_tokens_b.shape[0]
    lat, _ = encode_t(model, grid_tokens_b, T, np.zeros(b, dtype=np.int64))
    lat_q, quant, _ = bridge_t(model, lat)
    pred = decode_t(model, lat_q)
    rec = recon_vec(base, pred, target_tokens, pixels, stage)
    eps0 = eps0_from_pred(base, pred.data, pixels)
    return rec, quant, eps0


def ltc_loss_t(model, base, grid_tokens_b, target_tokens, pixels, budget, prefix, eps_idx, stage):
    """Phase 2: encode at `budget` conditioned per image, decode the first
    `prefix` tokens, supervise halting with [0]*prefix + [1]*(budget-prefix).

    Returns (recon (B,), quant (B,), halt (B,)).
    """
    lat, omega = encode_t(model, grid_tokens_b, budget, np.asarray(eps_idx))
    lat_q, quant, _ = bridge_t(model, lat)
    pred = decode_t(model, lat_q[:, :prefix])
    rec = recon_vec(base, pred, target_tokens, pixels, stage)
    halt = halting_loss_t(omega, prefix, budget - prefix)
    return rec, quant, halt


def _batch_arrays(base, batch):
    pixels = np.stack([im.pixels for im in batch]).astype(np.float32)
    tokens, idx = base_mod.encode_batch(base, pixels)
    return pixels, {"tokens": tokens, "indices": idx}


# ---------------------------------------------------------------------------
# Public single-image steps
# ---------------------------------------------------------------------------

def eic_step(model, base, image, T, stage=1):
    """Single-image phase 1; returns (eps0, LossBundle). No update."""
    cfg = model.cfg
    if T not in cfg.budget_grid:
        raise InputError(f"eic_step: budget {T} not in grid {cfg.budget_grid}")
    pixels, targets = _batch_arrays(base, [image])
    rec, quant, eps0 = eic_loss_t(
        model, base, targets["tokens"], targets, pixels, T, stage
    )
    bundle = LossBundle(
        recon=float(rec.data[0]), quant=float(quant.data[0]), halt=0.0,
        beta=cfg.beta, lam=cfg.lam,
    )
    return float(eps0[0]), bundle


def ltc_step(model, base, image, T, delta_T, eps_cond, stage=1):
    """Single-image phase 2 at budget T + delta_T; returns LossBundle."""
    cfg = model.cfg
    if T + delta_T > cfg.t_max:
        raise InputError(f"ltc_step: T + delta_T = {T + delta_T} exceeds t_max {cfg.t_max}")
    pixels, targets = _batch_arrays(base, [image])
    rec, quant, halt = ltc_loss_t(
        model, base, targets["tokens"], targets, pixels,
        T + delta_T, T, [eps_cond.table_index], stage,
    )
    return LossBundle(
        recon=float(rec.data[0]), quant=float(quant.data[0]),
        halt=float(halt.data[0]), beta=cfg.beta, lam=cfg.lam,
    )


# ---------------------------------------------------------------------------
# Iteration and driver
# ---------------------------------------------------------------------------

def train_iteration(model, base, batch, rng, cfg, opt=None, stage=1):
    """One optimizer step over a batch; returns (model, records).

    Per image: sample T from the grid, run phase 1, pick the phase-2 task
    (see module docstring for the no-masking branch), run phase 2, then
    apply a single Adam step on the mean summed total.
    """
    if not batch:
        raise InputError("train_iteration: empty batch")
    b = len(batch)
    t_max = cfg.t_max
    table = cfg.loss_table
    pixels, targets = _batch_arrays(base, batch)
    grid_tokens_b = targets["tokens"]

    sampled_t = np.array([sample_budget(rng, cfg.budget_grid) for _ in range(b)])

    # phase 1, grouped by sampled budget
    eic_rec = np.empty(b, dtype=np.float64)
    eic_quant = np.empty(b, dtype=np.float64)
    eps0 = np.empty(b, dtype=np.float64)
    loss_terms = []
    for t in sorted(set(sampled_t.tolist())):
        g_idx = np.flatnonzero(sampled_t == t)
        sub_targets = {
            "tokens": grid_tokens_b[g_idx],
            "indices": None if targets["indices"] is None else targets["indices"][g_idx],
        }
        rec, quant, e0 = eic_loss_t(
            model, base, grid_tokens_b[g_idx], sub_targets, pixels[g_idx], int(t), stage
        )
        loss_terms.append((rec + cfg.beta * quant).sum())
        eic_rec[g_idx] = rec.data
        eic_quant[g_idx] = quant.data
        eps0[g_idx] = e0

    # phase-2 task selection
    task_T = np.empty(b, dtype=np.int64)
    eps_conds = []
    for i in range(b):
        t = int(sampled_t[i])
        clamped = eps0[i] > table[-1]
        if t == t_max or clamped:
            below = [j for j, v in enumerate(table) if v < eps0[i]]
            j = int(below[rng.integers(0, len(below))]) if below else 0
            eps_conds.append(EpsilonCondition(value=float(table[j]), table_index=j))
            task_T[i] = t_max  # all-keep labels: delta_T = 0
        else:
            eps_conds.append(discretize_eps(float(eps0[i]), table))
            task_T[i] = t

    # phase 2: one encode at t_max for everyone, decode per prefix group
    eps_idx = np.array([c.table_index for c in eps_conds])
    ltc_rec = np.empty(b, dtype=np.float64)
    ltc_quant = np.empty(b, dtype=np.float64)
    ltc_halt = np.empty(b, dtype=np.float64)
    lat, omega = encode_t(model, grid_tokens_b, t_max, eps_idx)
    lat_q, quant_all, _ = bridge_t(model, lat)
    for t in sorted(set(task_T.tolist())):
        g_idx = np.flatnonzero(task_T == t)
        active = take0(lat_q, g_idx)[:, :t] if t < t_max else take0(lat_q, g_idx)
        pred = decode_t(model, active)
        sub_targets = {
            "tokens": grid_tokens_b[g_idx],
            "indices": None if targets["indices"] is None else targets["indices"][g_idx],
        }
        rec = recon_vec(base, pred, sub_targets, pixels[g_idx], stage)
        halt = halting_loss_t(take0(omega, g_idx), int(t), t_max - int(t))
        loss_terms.append((rec + cfg.lam * halt).sum())
        ltc_rec[g_idx] = rec.data
        ltc_halt[g_idx] = halt.data
    loss_terms.append(cfg.beta * quant_all.sum())
    ltc_quant[:] = quant_all.data

    total = loss_terms[0]
    for term in loss_terms[1:]:
        total = total + term
    total = total * (1.0 / b)

    if opt is not None:
        opt.zero_grad()
        total.backward()
        opt.step()

    records = []
    for i, im in enumerate(batch):
        t = int(task_T[i])
        records.append(IterationRecord(
            image_id=im.id,
            T=t,
            delta_T=t_max - t,
            eic_T=int(sampled_t[i]),
            eps0=float(eps0[i]),
            eps_cond=eps_conds[i],
            eic=LossBundle(float(eic_rec[i]), float(eic_quant[i]), 0.0, cfg.beta, cfg.lam),
            ltc=LossBundle(float(ltc_rec[i]), float(ltc_quant[i]), float(ltc_halt[i]),
                           cfg.beta, cfg.lam),
            labels=halting_labels(t, t_max - t),
        ))
    return model, records


def full_budget_val_l1(model, base, images, batch=32):
    """Mean pixel l1 of the all-active full-budget reconstruction."""
    errs = []
    for s in range(0, len(images), batch):
        chunk = images[s : s + batch]
        pixels, targets = _batch_arrays(base, chunk)
        with no_grad():
            lat, _ = encode_t(
                model, targets["tokens"], model.cfg.t_max,
                np.zeros(len(chunk), dtype=np.int64),
            )
            lat_q, _, _ = bridge_t(model, lat)
            pred = decode_t(model, lat_q)
        errs.extend(eps0_from_pred(base, pred.data, pixels).tolist())
    return float(np.mean(errs))


def train(model, base, dataset, cfg, val_dataset=None, log_path=None):
    """Stage-1 (token-space) then stage-2 (pixel) training.

    Writes one JSONL record per image per iteration plus eps0 histograms
    per budget and a final summary. Returns (model, summary dict).
    """
    if not dataset:
        raise InputError("train: empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 31)))
    if cfg.mode_1d == "discrete":
        seed_codebook(model, base, dataset[: min(len(dataset), 4 * cfg.batch_size)], rng)
        model.vq_stats = VQStats(cfg.codebook_size)
    opt = Adam(model.params, lr=cfg.lr)
    n = len(dataset)
    eps0_by_budget = {int(t): [] for t in cfg.budget_grid}
    out = open(log_path, "w") if log_path else None
    summary = {"stage1": {}, "stage2": {}}
    start = time.time()
    try:
        it_global = 0
        for stage, iters in ((1, cfg.stage1_iters), (2, cfg.stage2_iters)):
            first_total = None
            last_total = None
            for it in range(iters):
                # cosine decay to 0.1x within each stage
                opt.lr = cfg.lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * it / max(1, iters))))
                pick = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
                batch = [dataset[int(j)] for j in pick]
                _, records = train_iteration(model, base, batch, rng, cfg, opt, stage)
                it_global += 1
                mean_total = float(np.mean([r.eic.total + r.ltc.total for r in records]))
                if first_total is None:
                    first_total = mean_total
                last_total = mean_total
                for r in records:
                    eps0_by_budget[r.eic_T].append(r.eps0)
                    if out:
                        out.write(r.to_json(iteration=it_global, stage=stage) + "\n")
                if cfg.mode_1d == "discrete" and (it + 1) % REVIVE_EVERY == 0:
                    used = int((model.vq_stats.usage > 0).sum())
                    revived = revive_dead_codes(model, rng)
                    if out:
                        out.write(json.dumps({
                            "type": "codebook_revival", "iteration": it_global,
                            "codes_used": used, "revived": revived,
                        }) + "\n")
                if cfg.log_every and (it + 1) % cfg.log_every == 0:
                    log.info("stage %d iter %d/%d total %.4f", stage, it + 1, iters, mean_total)
            stage_sum = {
                "iters": iters,
                "first_total": first_total,
                "last_total": last_total,
            }
            if val_dataset:
                stage_sum["val_l1_full_budget"] = full_budget_val_l1(model, base, val_dataset)
            summary[f"stage{stage}"] = stage_sum
            if out:
                out.write(json.dumps({"type": "stage_summary", "stage": stage, **stage_sum}) + "\n")
        for t, vals in eps0_by_budget.items():
            if not vals:
                continue
            counts, edges = np.histogram(vals, bins=12, range=(0.0, 0.6))
            line = {
                "type": "eps0_histogram",
                "budget": t,
                "counts": counts.tolist(),
                "bin_edges": np.round(edges, 4).tolist(),
                "mean_eps0": float(np.mean(vals)),
            }
            if out:
                out.write(json.dumps(line) + "\n")
        summary["eps0_mean_by_budget"] = {
            str(t): (float(np.mean(v)) if v else None) for t, v in eps0_by_budget.items()
        }
        if out:
            # wall time stays out of the log so reruns are byte-identical
            out.write(json.dumps({"type": "train_summary", **summary}) + "\n")
        summary["wall_seconds"] = time.time() - start
    finally:
        if hasattr(model, "vq_stats"):
            del model.vq_stats
        if out:
            out.close()
    return model, summary
