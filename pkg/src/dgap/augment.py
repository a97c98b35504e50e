"""Gradient-guided amplitude mixing plus pixel-space blending.

Pipeline for a source image ``x1`` (label ``y``) and a partner ``x2``:

1. sensitivity map: |dL/dA(x1)| on the low-frequency square, obtained by
   back-propagating to pixels and chaining through the inverse DFT;
2. mixing map: standardise, sigmoid, clip to ``[d_min, d_max]``;
3. amplitude interpolation inside the square, phase of ``x1`` kept;
4. pixel blend with ratio ``lambda1`` and a final blend with ``lambda2``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import DimensionError
from .models import ModelState, batch_input_gradient
from .spectral import (
    AmplitudePhase,
    FrequencyMask,
    fft2,
    from_amp_phase,
    ifft2,
    low_freq_mask,
    to_amp_phase,
)

VARIANTS = ("full", "unified_ratio_v1", "frequency_only", "pixel_only", "none")


@dataclass(frozen=True)
class AugmentationConfig:
    r: float = 0.5
    d_min: float = 0.1
    d_max: float = 0.9
    eps: float = 1e-6
    lambda1_max: float = 0.5
    lambda2: float = 0.25
    # when set, lambda2 ~ Uniform(lambda2_low, lambda2) per image instead of fixed
    lambda2_low: float | None = None
    variant: str = "full"
    unified_ratio: float = 0.5
    per_channel_maps: bool = True

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ValueError(f"augment.r must lie in (0, 1], got {self.r}")
        if not 0.0 <= self.d_min <= self.d_max <= 1.0:
            raise ValueError(f"augment.d_min/d_max need 0 <= d_min <= d_max <= 1, got {self.d_min}, {self.d_max}")
        if self.eps <= 0:
            raise ValueError(f"augment.eps must be > 0, got {self.eps}")
        if not 0.0 <= self.lambda1_max <= 1.0:
            raise ValueError(f"augment.lambda1_max must lie in [0, 1], got {self.lambda1_max}")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError(f"augment.lambda2 must lie in [0, 1], got {self.lambda2}")
        if self.lambda2_low is not None and not 0.0 <= self.lambda2_low <= self.lambda2:
            raise ValueError(f"augment.lambda2_low must lie in [0, lambda2], got {self.lambda2_low}")
        if self.variant not in VARIANTS:
            raise ValueError(f"augment.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.unified_ratio <= 1.0:
            raise ValueError(f"augment.unified_ratio must lie in [0, 1], got {self.unified_ratio}")


@dataclass(frozen=True)
class SensitivityMap:
    """``G`` on the mask bins; entries outside the mask are NaN."""

    values: np.ndarray
    mask: FrequencyMask


@dataclass(frozen=True)
class MixingMap:
    values: np.ndarray
    mask: FrequencyMask


def _check_mask(x: np.ndarray, mask: FrequencyMask) -> None:
    if tuple(x.shape[-2:]) != tuple(mask.shape):
        raise DimensionError(f"mask {mask.shape} does not match image grid {x.shape[-2:]}")


def amplitude_grad_from_pixel_grad(pixel_grad: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Chain rule dL/dA from dL/dx when x = Re IDFT(A exp(jP)).

    dx(h,w)/dA(u,v) = Re[exp(jP(u,v)) exp(+j2pi(hu/H + wv/W))] / (HW), so
    dL/dA(u,v) = Re[exp(jP(u,v)) conj(DFT(g)(u,v))] / (HW).
    """
    h, w = pixel_grad.shape[-2:]
    gs = fft2(pixel_grad)
    return (np.cos(phase) * gs.re + np.sin(phase) * gs.im) / (h * w)


def amplitude_gradient(model: ModelState, x1: np.ndarray, y, mask: FrequencyMask, loss_scale: float = 1.0) -> SensitivityMap:
    """Sensitivity map for one image (``C x H x W``) or a batch (``N x C x H x W``)."""
    x1 = np.asarray(x1, dtype=np.float64)
    _check_mask(x1, mask)
    single = x1.ndim == 3
    xb = x1[None] if single else x1
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    g = batch_input_gradient(model, xb, yb, loss_scale)
    phase = to_amp_phase(fft2(xb)).phase
    G = np.abs(amplitude_grad_from_pixel_grad(g, phase))
    G = np.where(mask.grid, G, np.nan)
    return SensitivityMap(G[0] if single else G, mask)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mixing_map(G: SensitivityMap, cfg: AugmentationConfig) -> MixingMap:
    """Standardise G over the mask bins, squash with a sigmoid, clip.

    Statistics are taken per image and channel (``per_channel_maps``) or per
    image pooled over channels; sigma is the population standard deviation.
    """
    vals = G.values
    grid = G.mask.grid
    # collapse the mask axes so statistics run over the defined bins only
    inside = vals[..., grid]  # (..., C, nbins)
    axes = (-1,) if cfg.per_channel_maps else (-2, -1)
    mu = inside.mean(axis=axes, keepdims=True)
    sigma = inside.std(axis=axes, keepdims=True)
    z = (inside - mu) / (sigma + cfg.eps)
    # a constant map standardises to exactly zero, free of the mean's rounding error
    flat = inside.max(axis=axes, keepdims=True) == inside.min(axis=axes, keepdims=True)
    z = np.where(flat, 0.0, z)
    d_inside = np.clip(_sigmoid(z), cfg.d_min, cfg.d_max)
    D = np.full(vals.shape, np.nan)
    D[..., grid] = d_inside
    return MixingMap(D, G.mask)


def constant_mixing_map(shape, mask: FrequencyMask, value: float) -> MixingMap:
    D = np.where(mask.grid, float(value), np.nan)
    return MixingMap(np.broadcast_to(D, shape).copy(), mask)


def amplitude_mix(A1: np.ndarray, A2: np.ndarray, D: MixingMap | np.ndarray, mask: FrequencyMask) -> np.ndarray:
    """``(1 - D) A1 + D A2`` inside the mask, ``A1`` outside."""
    Dv = D.values if isinstance(D, MixingMap) else np.asarray(D)
    if A1.shape != A2.shape:
        raise DimensionError(f"amplitude_mix: A1 {A1.shape} vs A2 {A2.shape}")
    _check_mask(A1, mask)
    if Dv.shape != A1.shape:
        try:
            Dv = np.broadcast_to(Dv, A1.shape)
        except ValueError as exc:
            raise DimensionError(f"amplitude_mix: D {Dv.shape} vs amplitudes {A1.shape}") from exc
    Dz = np.where(mask.grid, Dv, 0.0)
    mixed = (1.0 - Dz) * A1 + Dz * A2
    return np.where(mask.grid, mixed, A1)


def reconstruct(A_mix: np.ndarray, phase: np.ndarray) -> np.ndarray:
    x = ifft2(from_amp_phase(AmplitudePhase(A_mix, phase, conj_symmetric=True)))
    return np.clip(x, 0.0, 1.0)


def freq_augment(x1, x2, model: ModelState | None, cfg: AugmentationConfig, y=None, D: MixingMap | None = None):
    """Amplitude-mixed reconstruction ``x_f``; accepts single images or batches.

    ``D`` overrides the gradient-derived mixing map (unified-ratio variant).
    Returns ``(x_f, G, D)``; ``G`` is ``None`` when no gradient was taken.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise DimensionError(f"freq_augment: x1 {x1.shape} vs x2 {x2.shape}")
    mask = low_freq_mask(x1.shape[-2], x1.shape[-1], cfg.r)
    ap1 = to_amp_phase(fft2(x1))
    ap2 = to_amp_phase(fft2(x2))
    G = None
    if D is None:
        if model is None or y is None:
            raise ValueError("freq_augment: a model and label are needed for the gradient-guided map")
        G = amplitude_gradient(model, x1, y, mask)
        D = mixing_map(G, cfg)
    A_mix = amplitude_mix(ap1.amplitude, ap2.amplitude, D, mask)
    return reconstruct(A_mix, ap1.phase), G, D


def _check_ratio(name: str, lam) -> None:
    lam = np.asarray(lam)
    if np.any(lam < 0.0) or np.any(lam > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {lam}")


def _bcast(lam, x: np.ndarray):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1 and x.ndim == 4:
        return lam[:, None, None, None]
    return lam


def pixel_mix(x1, x2, lam1):
    _check_ratio("lambda1", lam1)
    x1 = np.asarray(x1, dtype=np.float64)
    lam = _bcast(lam1, x1)
    return (1.0 - lam) * x1 + lam * np.asarray(x2, dtype=np.float64)


def fuse(x_f, x_p, lam2):
    _check_ratio("lambda2", lam2)
    x_f = np.asarray(x_f, dtype=np.float64)
    lam = _bcast(lam2, x_f)
    return (1.0 - lam) * x_f + lam * np.asarray(x_p, dtype=np.float64)


def draw_ratios(cfg: AugmentationConfig, rng: np.random.Generator, n: int | None = None):
    """lambda1 ~ U(0, lambda1_max); lambda2 fixed or U(lambda2_low, lambda2)."""
    size = n if n is not None else None
    lam1 = rng.uniform(0.0, cfg.lambda1_max, size=size)
    if cfg.lambda2_low is None:
        lam2 = cfg.lambda2 if n is None else np.full(n, cfg.lambda2)
    else:
        lam2 = rng.uniform(cfg.lambda2_low, cfg.lambda2, size=size)
    return lam1, lam2


@dataclass
class AugmentResult:
    image: np.ndarray
    x_f: np.ndarray | None = None
    x_p: np.ndarray | None = None
    G: SensitivityMap | None = None
    D: MixingMap | None = None
    lambda1: object = None
    lambda2: object = None


def dgap_augment_detailed(x1, y, x2, model: ModelState | None, cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentResult:
    """Run the configured variant; single images or batches (``y`` per example)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = x1.shape[0] if x1.ndim == 4 else None
    lam1, lam2 = draw_ratios(cfg, rng, n)
    v = cfg.variant
    if v == "none":
        return AugmentResult(x1.copy(), lambda1=lam1, lambda2=lam2)
    if v == "pixel_only":
        x_p = pixel_mix(x1, x2, lam1)
        return AugmentResult(x_p, x_p=x_p, lambda1=lam1, lambda2=lam2)
    fixed = None
    if v == "unified_ratio_v1":
        mask = low_freq_mask(x1.shape[-2], x1.shape[-1], cfg.r)
        fixed = constant_mixing_map(x1.shape, mask, cfg.unified_ratio)
    x_f, G, D = freq_augment(x1, x2, model, cfg, y=y, D=fixed)
    if v == "frequency_only":
        return AugmentResult(x_f, x_f=x_f, G=G, D=D, lambda1=lam1, lambda2=lam2)
    x_p = pixel_mix(x1, x2, lam1)
    return AugmentResult(fuse(x_f, x_p, lam2), x_f, x_p, G, D, lam1, lam2)


def dgap_augment(x1, y, x2, model: ModelState | None, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return dgap_augment_detailed(x1, y, x2, model, cfg, rng).image


def with_variant(cfg: AugmentationConfig, variant: str) -> AugmentationConfig:
    return replace(cfg, variant=variant)
