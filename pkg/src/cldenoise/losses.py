"""Objective terms: adversarial, L1, SSIM/DSSIM, anisotropic TV, NT-Xent.

Every function accepts torch tensors (and numpy arrays where noted) and is
differentiable end to end. Reductions are means so the weights do not depend
on image size or batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    BatchTooSmall,
    InvalidConfig,
    NonFiniteTerm,
    NonUnitNorm,
    ShapeMismatch,
    WindowTooLarge,
)

TERMS = ("gan", "l1", "ssim", "tv", "cl")


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_l1: float = 1.0
    lambda_ssim: float = 10.0
    lambda_tv: float = 1e-4
    lambda_cl: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        for term in TERMS:
            if getattr(self, f"lambda_{term}") < 0:
                raise InvalidConfig(f"lambda_{term} must be non-negative")
        if not self.tau > 0:
            raise InvalidConfig("tau must be positive")

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")


@dataclass(frozen=True)
class SSIMParams:
    win_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    # "gaussian": sliding window; "global": whole-image statistics
    mode: str = "gaussian"

    def __post_init__(self):
        if self.win_size < 1 or self.win_size % 2 == 0:
            raise InvalidConfig("SSIM window size must be odd")
        if self.mode not in ("gaussian", "global"):
            raise InvalidConfig(f"unknown SSIM mode {self.mode!r}")
        if not (self.k1 > 0 and self.k2 > 0 and self.data_range > 0):
            raise InvalidConfig("K1, K2 and L must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2


def _as_image_tensor(a) -> tuple[torch.Tensor, bool]:
    """Lift H x W, C x H x W or numpy input to B x C x H x W."""
    was_numpy = not isinstance(a, torch.Tensor)
    t = torch.as_tensor(np.asarray(a, dtype=np.float64)) if was_numpy else a
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t, was_numpy


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_loss(d_real_logits: Optional[torch.Tensor], d_fake_logits: torch.Tensor,
                     side: str = "generator") -> torch.Tensor:
    """Binary cross-entropy on patch logits.

    Discriminator: ``-[mean log s(real) + mean log(1 - s(fake))]``.
    Generator (non-saturating): ``-mean log s(fake)``.
    ``-log s(z) = softplus(-z)`` and ``-log(1 - s(z)) = softplus(z)`` keep it stable.
    """
    if side == "generator":
        return F.softplus(-d_fake_logits).mean()
    if side == "discriminator":
        if d_real_logits is None:
            raise ValueError("discriminator side needs real logits")
        return F.softplus(-d_real_logits).mean() + F.softplus(d_fake_logits).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', not {side!r}")


def l1_loss(generated, target):
    gen, was_numpy = _as_image_tensor(generated)
    tgt, _ = _as_image_tensor(target)
    _check_same_shape(gen, tgt)
    out = (gen - tgt).abs().mean()
    return float(out) if was_numpy else out


def gaussian_window(win_size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = win_size // 2
    coords = torch.arange(-r, r + 1, dtype=dtype)
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    w = window.to(x.dtype).expand(c, 1, *window.shape)
    return F.conv2d(x, w, groups=c)


def ssim_map(x: torch.Tensor, y: torch.Tensor, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    """Per-window SSIM over valid window positions, shape B x C x H' x W'."""
    _check_same_shape(x, y)
    h, w = x.shape[-2:]
    if params.win_size > min(h, w):
        raise WindowTooLarge(f"window {params.win_size} exceeds image {(h, w)}")
    window = gaussian_window(params.win_size, params.sigma)
    mu_x, mu_y = _filter(x, window), _filter(y, window)
    sxx = _filter(x * x, window) - mu_x * mu_x
    syy = _filter(y * y, window) - mu_y * mu_y
    sxy = _filter(x * y, window) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def _global_stats(x: torch.Tensor, y: torch.Tensor):
    xf, yf = x.flatten(2), y.flatten(2)
    n = xf.shape[-1]
    mu_x, mu_y = xf.mean(-1), yf.mean(-1)
    dx, dy = xf - mu_x[..., None], yf - mu_y[..., None]
    var_x = (dx * dx).sum(-1) / (n - 1)
    var_y = (dy * dy).sum(-1) / (n - 1)
    cov = (dx * dy).sum(-1) / (n - 1)
    return mu_x, mu_y, var_x, var_y, cov


def ssim_components(x, y, params: SSIMParams = SSIMParams(mode="global")):
    """Luminance, contrast and structure terms from whole-image statistics."""
    x, _ = _as_image_tensor(x)
    y, _ = _as_image_tensor(y)
    _check_same_shape(x, y)
    mu_x, mu_y, var_x, var_y, cov = _global_stats(x, y)
    sd_x, sd_y = var_x.sqrt(), var_y.sqrt()
    lum = (2 * mu_x * mu_y + params.c1) / (mu_x ** 2 + mu_y ** 2 + params.c1)
    con = (2 * sd_x * sd_y + params.c2) / (var_x + var_y + params.c2)
    struct = (cov + params.c3) / (sd_x * sd_y + params.c3)
    return lum, con, struct


def ssim_index(x, y, params: SSIMParams = SSIMParams()):
    """Mean SSIM. Numpy input gives a float, tensor input a 0-d tensor."""
    xt, was_numpy = _as_image_tensor(x)
    yt, _ = _as_image_tensor(y)
    _check_same_shape(xt, yt)
    if params.mode == "global":
        mu_x, mu_y, var_x, var_y, cov = _global_stats(xt, yt)
        c1, c2 = params.c1, params.c2
        val = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)
               / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))).mean()
    else:
        val = ssim_map(xt, yt, params).mean()
    return float(val) if was_numpy else val


def dssim_loss(generated, target, params: SSIMParams = SSIMParams()):
    return (1 - ssim_index(generated, target, params)) / 2


def tv_loss(y, normalize: bool = True):
    """Anisotropic total variation.

    Sum of absolute vertical and horizontal neighbour differences per image,
    divided by the pixel count when ``normalize``; averaged over the batch.
    """
    t, was_numpy = _as_image_tensor(y)
    dv = (t[..., 1:, :] - t[..., :-1, :]).abs().sum(dim=(1, 2, 3))
    dh = (t[..., :, 1:] - t[..., :, :-1]).abs().sum(dim=(1, 2, 3))
    per_image = dv + dh
    if normalize:
        per_image = per_image / (t.shape[-1] * t.shape[-2])
    out = per_image.mean()
    return float(out) if was_numpy else out


def default_pairs(n_total: int) -> torch.Tensor:
    """Partner of row i is i + N (mod 2N): first half views, second half their pairs."""
    half = n_total // 2
    return (torch.arange(n_total) + half) % n_total


def ntxent_loss(embeddings: torch.Tensor, pair_index=None, tau: float = 0.1,
                norm_tol: float = 1e-3) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over 2N embeddings.

    For anchor i with partner p(i):
    ``l_i = -log(exp(sim(i, p(i)) / tau) / sum_{k != i} exp(sim(i, k) / tau))``
    with cosine similarity; the result is the mean over all anchors.
    """
    z = embeddings
    if z.dim() != 2:
        raise ShapeMismatch("embeddings must be a 2N x d matrix")
    n = z.shape[0]
    if n < 4 or n % 2:
        raise BatchTooSmall(f"need an even number >= 4 of embeddings, got {n}")
    norms = z.detach().norm(dim=1)
    if torch.any((norms - 1).abs() > norm_tol):
        raise NonUnitNorm(f"embedding norms range {float(norms.min()):.6g}..{float(norms.max()):.6g}")
    pairs = default_pairs(n) if pair_index is None else torch.as_tensor(pair_index, dtype=torch.long)
    if pairs.shape != (n,) or torch.any(pairs[pairs] != torch.arange(n)) or torch.any(pairs == torch.arange(n)):
        raise ValueError("pair_index must pair every row with exactly one other row")
    zn = F.normalize(z, dim=1)
    logits = zn @ zn.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    positive = logits[torch.arange(n), pairs]
    return (torch.logsumexp(logits, dim=1) - positive).mean()


def composite_loss(terms: Mapping[str, object], weights: LossWeights = LossWeights()):
    """Weighted sum of the objective terms.

    ``terms`` maps any of ``gan, l1, ssim, tv, cl`` to a scalar; missing terms
    count as zero. Returns ``(total, breakdown)`` where breakdown holds the
    unweighted term values as floats.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = 0.0
    breakdown = {}
    for name in TERMS:
        value = terms.get(name, 0.0)
        as_float = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(as_float):
            raise NonFiniteTerm(name, as_float)
        breakdown[name] = as_float
        total = total + weights.weight(name) * value
    return total, breakdown
