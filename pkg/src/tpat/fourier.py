"""Spectral analysis of patterns: unitary 2D DFT, thresholding, wavelength.

The transform is the unitary ("ortho") DFT so Parseval holds exactly:
sum |x|^2 == sum |X|^2. Threshold rules build filtered variants of a pattern
by zeroing every coefficient whose amplitude falls below a rule-specific bar
and inverting; the output is the real part of the inverse transform, not
re-signed, so filtering is idempotent.

Amplitudes are symmetrized over conjugate frequency pairs before masking.
Real inputs have |X(k)| == |X(-k)| up to rounding, and a mask must keep or
drop such a pair together or the inverse transform stops being real.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

# relative slack when deciding amplitude ties against a threshold bar
_REL_TIE_TOL = 1e-9


class NoDominantFrequencyError(ValueError):
    """The spectrum has no nonzero-frequency content to report a wavelength for."""


def dft2(grid: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT of a real or complex (H, W) array."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {grid.shape}")
    return np.fft.fft2(grid, norm="ortho")


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of dft2 (unitary, so the same scaling)."""
    spectrum = np.asarray(spectrum)
    if spectrum.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {spectrum.shape}")
    return np.fft.ifft2(spectrum, norm="ortho")


@dataclass(frozen=True)
class KeepMaxOnly:
    """Keep only coefficients attaining the maximal amplitude."""


@dataclass(frozen=True)
class MaxMinusOne:
    """Keep amplitudes >= max - 1.

    The subtraction is in linear amplitude units of the unitary DFT by
    default. log_scale=True subtracts one decade instead (keep >= max / 10),
    restricted to strictly positive amplitudes.
    """

    log_scale: bool = False


@dataclass(frozen=True)
class FractionOfMax:
    """Keep amplitudes >= fraction * max."""

    fraction: float = 0.9

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")


ThresholdRule = Union[KeepMaxOnly, MaxMinusOne, FractionOfMax]


def _symmetrized_amplitude(spectrum: np.ndarray) -> np.ndarray:
    """|X| averaged with its conjugate-reflected self, so +-k pairs tie exactly."""
    amp = np.abs(spectrum)
    H, W = amp.shape
    refl = amp[(-np.arange(H)) % H][:, (-np.arange(W)) % W]
    return 0.5 * (amp + refl)


def threshold_mask(amp: np.ndarray, rule: ThresholdRule) -> np.ndarray:
    """Boolean keep-mask for symmetrized amplitudes under a threshold rule."""
    peak = float(amp.max())
    if isinstance(rule, KeepMaxOnly):
        bar = peak
    elif isinstance(rule, MaxMinusOne):
        bar = peak / 10.0 if rule.log_scale else peak - 1.0
    elif isinstance(rule, FractionOfMax):
        bar = rule.fraction * peak
    else:
        raise TypeError(f"not a threshold rule: {type(rule).__name__}")
    mask = amp >= bar - _REL_TIE_TOL * max(peak, 1.0)
    if isinstance(rule, MaxMinusOne) and rule.log_scale:
        mask &= amp > 0.0
    return mask


def threshold_filter(pattern: np.ndarray, rule: ThresholdRule) -> np.ndarray:
    """Zero sub-threshold spectral content of a real grid, return the rest.

    The mask is decided on conjugate-symmetrized amplitudes, so the kept
    spectrum stays conjugate-symmetric and the returned inverse transform is
    real. Accepts (H, W) or (C, H, W); channels filter independently.
    """
    grid = np.asarray(pattern, dtype=float)
    if grid.ndim == 3:
        return np.stack([threshold_filter(ch, rule) for ch in grid])
    if grid.ndim != 2:
        raise ValueError(f"expected a 2D or 3D pattern, got shape {grid.shape}")
    spectrum = dft2(grid)
    mask = threshold_mask(_symmetrized_amplitude(spectrum), rule)
    back = idft2(np.where(mask, spectrum, 0.0))
    return back.real


def surviving_coefficients(pattern: np.ndarray, rule: ThresholdRule) -> int:
    """How many spectral coefficients a rule keeps (summed over channels)."""
    grid = np.asarray(pattern, dtype=float)
    if grid.ndim == 3:
        return sum(surviving_coefficients(ch, rule) for ch in grid)
    mask = threshold_mask(_symmetrized_amplitude(dft2(grid)), rule)
    return int(mask.sum())


def rule_label(rule: ThresholdRule) -> str:
    if isinstance(rule, KeepMaxOnly):
        return "keep-max-only"
    if isinstance(rule, MaxMinusOne):
        return "max-minus-one-log" if rule.log_scale else "max-minus-one"
    if isinstance(rule, FractionOfMax):
        return f"fraction-of-max-{rule.fraction:g}"
    raise TypeError(f"not a threshold rule: {type(rule).__name__}")


def sfa_report(pattern: np.ndarray, classifier, images,
               rules: Sequence[ThresholdRule], budget: float = 10.0):
    """Fooling rate of a pattern before and after spectral thresholding.

    For each rule the pattern is filtered, scaled by the budget (clipped back
    into the max-norm ball where ringing overshoots), and measured against
    the same images. Returns (report dict, {rule label: filtered pattern}).
    """
    from .attack import fooling_rate  # composition-only import
    from .classifiers import cached

    pattern = np.asarray(pattern, dtype=float)
    if pattern.ndim == 2:
        pattern = pattern[np.newaxis]
    if pattern.ndim != 3:
        raise ValueError(f"expected a (C,H,W) pattern, got shape {pattern.shape}")
    if budget <= 0:
        raise ValueError("budget must be positive")
    classifier = cached(classifier)
    base = fooling_rate(classifier, images,
                        np.clip(budget * pattern, -budget, budget), budget=budget)
    rows = []
    filtered = {}
    for rule in rules:
        label = rule_label(rule)
        filt = threshold_filter(pattern, rule)
        eps = np.clip(budget * filt, -budget, budget)
        after = fooling_rate(classifier, images, eps, budget=budget)
        rows.append({
            "rule": label,
            "fooling_rate": after.fooling_rate,
            "fooling_rate_drop": base.fooling_rate - after.fooling_rate,
            "surviving_coefficients": surviving_coefficients(pattern, rule),
        })
        filtered[label] = filt
    report = {
        "budget": budget,
        "n_images": base.n_images,
        "fooling_rate_original": base.fooling_rate,
        "rows": rows,
    }
    return report, filtered


def _channel_wavelength(grid: np.ndarray) -> float:
    H, W = grid.shape
    amp = _symmetrized_amplitude(dft2(grid))
    amp[0, 0] = 0.0
    peak = float(amp.max())
    if peak <= 0.0:
        raise NoDominantFrequencyError("constant channel has no dominant frequency")
    fy = np.fft.fftfreq(H)  # signed cycles per pixel
    fx = np.fft.fftfreq(W)
    freq = np.maximum(np.abs(fy)[:, None], np.abs(fx)[None, :])
    peaks = amp >= peak * (1.0 - _REL_TIE_TOL)
    return float(1.0 / freq[peaks].max())


def dominant_wavelength(pattern: np.ndarray) -> float:
    """Wavelength (cells) of the strongest non-DC frequency, channel-averaged.

    A bin's frequency is its larger per-axis cycles-per-pixel value
    max(|fy|/H, |fx|/W); the wavelength is the reciprocal. Stripes of period
    T report T and a checkerboard reports 2.0 (the Nyquist wavelength along
    both axes). Amplitude ties resolve to the smallest tied wavelength.
    Constant channels are skipped; an entirely constant pattern raises
    NoDominantFrequencyError.
    """
    grid = np.asarray(pattern, dtype=float)
    if grid.ndim == 2:
        grid = grid[np.newaxis]
    if grid.ndim != 3:
        raise ValueError(f"expected a 2D or 3D pattern, got shape {grid.shape}")
    values = []
    for ch in grid:
        try:
            values.append(_channel_wavelength(ch))
        except NoDominantFrequencyError:
            pass
    if not values:
        raise NoDominantFrequencyError("constant pattern has no dominant frequency")
    return float(np.mean(values))
