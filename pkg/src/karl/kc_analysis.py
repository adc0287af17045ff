"""Complexity estimation and the structure-vs-noise probes.

The one-pass estimate reads active-token counts from halting
probabilities (one encoder pass, one decoder pass). The oracle sweeps
prefixes of a single full-budget encoding in ascending order and returns
the first token count whose clamped pixel reconstruction meets the
target error; re-encoding per candidate count is deliberately avoided so
the sweep isolates the token-count effect.

Sign convention for the delta probe: delta = err(min-grid prefix) -
err(max-grid prefix), so images whose reconstruction improves with more
tokens give delta > 0 and incompressible noise gives delta near 0.
"""

import dataclasses

import numpy as np

from .autodiff import Tensor, no_grad
from .base_tokenizer import decode_pred, encode2d
from .data import Image
from .errors import DataError
from .karl_model import bridge_t, decode_t, encode_t, reconstruct
from .metrics import pixel_l1
from .training import discretize_eps


@dataclasses.dataclass
class KCEstimate:
    t_hat: int
    eps: float
    budget: int
    satisfied: bool
    achieved_err: float


@dataclasses.dataclass
class DeltaProbe:
    err_low: float  # l1 with the minimum-grid prefix
    err_high: float  # l1 with the maximum-grid prefix
    delta: float  # err_low - err_high


def kc_one_pass(model, base, image, T, eps, threshold=0.75, return_image=False):
    """Single-pass estimate: t_hat = |omega < threshold| at budget T.

    eps is clamped into the loss table (smallest entry >= eps). Exactly
    one encoder and one decoder invocation.
    """
    cond = discretize_eps(float(eps), model.cfg.loss_table)
    img_hat, est = reconstruct(model, base, image, T, cond, threshold)
    if return_image:
        return est, img_hat
    return est


def full_budget_tokens(model, base, image, eps):
    """One full-budget encode conditioned on eps (table-clamped); returns
    decoder-ready tokens (T_max, D1) and omega (T_max,)."""
    cond = discretize_eps(float(eps), model.cfg.loss_table)
    grid = encode2d(base, image)
    with no_grad():
        lat, omega = encode_t(
            model, grid.tokens[None], model.cfg.t_max, np.array([cond.table_index])
        )
        lat_q, _, _ = bridge_t(model, lat)
    return lat_q.data[0], omega.data[0]


def decode_prefix(model, base, tokens, t):
    """Decode the first t of the given decoder-ready tokens to an Image."""
    with no_grad():
        pred = decode_t(model, Tensor(tokens[None, :t]))
    px = decode_pred(base, pred.data)[0]
    return Image(px.astype(np.float64), id=f"prefix-{t}", kind="")


def prefix_reconstructions(model, base, image, token_counts, eps=0.0):
    """{t: reconstruction} for prefixes of one full-budget encode."""
    tokens, _ = full_budget_tokens(model, base, image, eps)
    return {t: decode_prefix(model, base, tokens, int(t)) for t in token_counts}


def kc_oracle_search(model, base, image, eps, grid=None):
    """Exhaustive ascending prefix sweep: the smallest grid count whose
    clamped reconstruction reaches pixel l1 <= eps; max count with
    satisfied=False if none does."""
    grid = model.cfg.budget_grid if grid is None else tuple(grid)
    tokens, _ = full_budget_tokens(model, base, image, eps)
    last_err = None
    for t in grid:
        img_hat = decode_prefix(model, base, tokens, int(t))
        last_err = pixel_l1(image, img_hat)
        if last_err <= eps:
            return KCEstimate(
                t_hat=int(t), eps=float(eps), budget=int(grid[-1]),
                satisfied=True, achieved_err=float(last_err),
            )
    return KCEstimate(
        t_hat=int(grid[-1]), eps=float(eps), budget=int(grid[-1]),
        satisfied=False, achieved_err=float(last_err),
    )


def kc_invariance_probe(model, base, image, eps, T_small, T_large):
    """t_hat at two budgets plus their absolute difference; the estimate
    of a compressible image should not move when the budget grows."""
    est_small = kc_one_pass(model, base, image, T_small, eps)
    est_large = kc_one_pass(model, base, image, T_large, eps)
    return {
        "t_hat_small": est_small.t_hat,
        "t_hat_large": est_large.t_hat,
        "T_small": int(T_small),
        "T_large": int(T_large),
        "abs_diff": abs(est_small.t_hat - est_large.t_hat),
    }


def delta_probe(model, base, image):
    """l1 improvement from min-grid to max-grid prefix of a near-lossless
    (eps = 0 conditioned) full-budget encode."""
    grid = model.cfg.budget_grid
    tokens, _ = full_budget_tokens(model, base, image, 0.0)
    img_low = decode_prefix(model, base, tokens, int(grid[0]))
    img_high = decode_prefix(model, base, tokens, int(grid[-1]))
    err_low = pixel_l1(image, img_low)
    err_high = pixel_l1(image, img_high)
    return DeltaProbe(err_low=err_low, err_high=err_high, delta=err_low - err_high)


def bucket_complexity(model, base, dataset, eps, bucket_width):
    """t_hat per image, bucketed into [k*width, (k+1)*width).

    Returns {"buckets": {start: count}, "mean_t_hat": float, "n": int,
    "per_image": [(id, kind, t_hat), ...]}.
    """
    if not dataset:
        raise DataError("bucket_complexity: empty dataset")
    t_max = model.cfg.t_max
    per_image = []
    for image in dataset:
        est = kc_one_pass(model, base, image, t_max, eps)
        per_image.append((image.id, image.kind, est.t_hat))
    buckets = {}
    for _, _, t_hat in per_image:
        start = (t_hat // bucket_width) * bucket_width
        buckets[int(start)] = buckets.get(int(start), 0) + 1
    return {
        "buckets": dict(sorted(buckets.items())),
        "mean_t_hat": float(np.mean([t for _, _, t in per_image])),
        "n": len(per_image),
        "per_image": per_image,
    }
