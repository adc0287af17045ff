"""Reconstruction metrics and the fixed/variable-token evaluation protocols.

pixel_l1 is the image-level mean absolute error that defines both the
training condition and threshold satisfaction. PSNR reports ``math.inf``
for identical images (a sentinel distinct from every finite value). SSIM
is the windowed form with uniform 7x7 windows, population moments, and
the standard stabilizing constants, averaged over channels.
"""

import dataclasses
import math

import numpy as np

from . import kernels
from .errors import DataError, InputError
from .karl_model import reset_run_counters, run_counters

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pixels(x):
    return x.pixels if hasattr(x, "pixels") else np.asarray(x)


def pixel_l1(a, b):
    """Image-level mean absolute error."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InputError(f"pixel_l1: shape mismatch {pa.shape} vs {pb.shape}")
    return float(np.abs(pa.astype(np.float64) - pb.astype(np.float64)).mean())


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InputError(f"psnr: shape mismatch {pa.shape} vs {pb.shape}")
    mse = float(((pa.astype(np.float64) - pb.astype(np.float64)) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(a, b, window=7, c1=SSIM_C1, c2=SSIM_C2):
    """Mean local SSIM over uniform sliding windows, averaged over channels."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise InputError(f"ssim: shape mismatch {pa.shape} vs {pb.shape}")
    if pa.ndim == 2:
        pa, pb = pa[:, :, None], pb[:, :, None]
    h, w, ch = pa.shape
    if window > min(h, w):
        raise InputError(f"ssim: window {window} exceeds image side {min(h, w)}")
    vals = []
    for c in range(ch):
        mu_a, mu_b, var_a, var_b, cov = kernels.ssim_window_stats(
            pa[:, :, c].astype(np.float64), pb[:, :, c].astype(np.float64), window
        )
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


@dataclasses.dataclass
class MetricReport:
    l1_x10: float
    psnr: float
    ssim: float
    tokens_used: float
    runs: tuple  # (encoder passes per image, decoder passes per image)

    def to_dict(self):
        return {
            "l1_x10": self.l1_x10,
            "psnr": self.psnr if math.isfinite(self.psnr) else "inf",
            "ssim": self.ssim,
            "tokens_used": self.tokens_used,
            "runs": list(self.runs),
        }


@dataclasses.dataclass
class ThresholdReport:
    eps: float
    frac_exceed: dict  # margin -> fraction among masked images
    avg_err_exceed: float
    masked_images: int

    def to_dict(self):
        return {
            "eps": self.eps,
            "frac_exceed": {f"{m:.2f}": v for m, v in self.frac_exceed.items()},
            "avg_err_exceed": self.avg_err_exceed,
            "masked_images": self.masked_images,
        }


def _finite_mean(values):
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def _aggregate(pairs, tokens_used, runs):
    l1s = [pixel_l1(a, b) for a, b in pairs]
    psnrs = [psnr(a, b) for a, b in pairs]
    ssims = [ssim(a, b) for a, b in pairs]
    return MetricReport(
        l1_x10=float(np.mean(l1s)) * 10.0,
        psnr=_finite_mean(psnrs),
        ssim=float(np.mean(ssims)),
        tokens_used=float(tokens_used),
        runs=runs,
    )


def eval_fixed_tokens(model, base, dataset, token_counts):
    """Decode first-t prefixes of one full-budget encode per image, for
    each requested count t. Returns {t: MetricReport}.

    The budget condition is the zero-loss table entry; every image is
    encoded once and each count reuses that encoding's prefix, so the
    per-count cost is one amortized encoder pass plus one decoder pass.
    """
    from . import kc_analysis

    if not dataset:
        raise DataError("eval_fixed_tokens: empty dataset")
    cfg = model.cfg
    for t in token_counts:
        if t not in cfg.budget_grid:
            raise InputError(f"eval_fixed_tokens: count {t} not in grid {cfg.budget_grid}")
    recon = {t: [] for t in token_counts}
    for image in dataset:
        per_image = kc_analysis.prefix_reconstructions(model, base, image, token_counts)
        for t, img_hat in per_image.items():
            recon[t].append((image, img_hat))
    return {
        t: _aggregate(recon[t], tokens_used=float(t), runs=(1, 1))
        for t in token_counts
    }


def eval_variable_tokens(model, base, dataset, eps_list, threshold=0.75):
    """Per-image one-pass reconstruction at each eps; asserts the 1 + 1
    encoder/decoder run contract via the instrumented counters.

    Returns {eps: MetricReport} with tokens_used = mean active tokens.
    """
    from . import kc_analysis

    if not dataset:
        raise DataError("eval_variable_tokens: empty dataset")
    out = {}
    for eps in eps_list:
        reset_run_counters()
        pairs = []
        tokens = []
        for image in dataset:
            est, img_hat = kc_analysis.kc_one_pass(
                model, base, image, model.cfg.t_max, eps, threshold, return_image=True
            )
            pairs.append((image, img_hat))
            tokens.append(est.t_hat)
        enc, dec = run_counters()
        n = len(dataset)
        if enc != n or dec != n:
            raise AssertionError(
                f"single-pass contract broken: {enc} encoder / {dec} decoder "
                f"runs for {n} images"
            )
        out[eps] = _aggregate(pairs, tokens_used=float(np.mean(tokens)), runs=(enc / n, dec / n))
    return out


def threshold_satisfaction(model, base, dataset, eps_list, threshold=0.75,
                           margins=(0.0, 0.01, 0.02, 0.03, 0.04, 0.05)):
    """Among images where masking applied (t_hat < T), the fraction whose
    achieved error exceeds eps + margin, per margin; plus the mean error
    of the exceeders (0.0 when there are none)."""
    from . import kc_analysis

    if not dataset:
        raise DataError("threshold_satisfaction: empty dataset")
    reports = []
    for eps in eps_list:
        errs = []
        for image in dataset:
            est = kc_analysis.kc_one_pass(model, base, image, model.cfg.t_max, eps, threshold)
            if est.t_hat < est.budget:
                errs.append(est.achieved_err)
        errs = np.asarray(errs, dtype=np.float64)
        frac = {
            float(m): (float((errs > eps + m).mean()) if errs.size else 0.0)
            for m in margins
        }
        exceed = errs[errs > eps] if errs.size else errs
        reports.append(ThresholdReport(
            eps=float(eps),
            frac_exceed=frac,
            avg_err_exceed=float(exceed.mean()) if exceed.size else 0.0,
            masked_images=int(errs.size),
        ))
    return reports
