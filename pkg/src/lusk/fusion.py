"""Acoustic feature fusion preprocessing.

Builds the 10-channel per-frame representation used as network input:
log-Gabor bandpass -> monogenic signal -> local phase and phase symmetry,
weighted by the integrated-backscatter map, one channel per wavelength.
Also provides depth-dependent gain attenuation (TGA), the
normalized-grayscale alternative stack, and SSIM for frame-pair gating.

Frames are single-channel float arrays in [0, 1] with row index = depth.
All functions are pure; per-frame parallel extraction is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

DEFAULT_LAMBDAS = tuple(float(x) for x in range(3, 31, 3))


@dataclass
class FusionConfig:
    sigma0: float = 0.55
    lambdas: tuple = DEFAULT_LAMBDAS
    thresh: float = 0.01
    epsilon: float = 1e-6
    attenuation_a: float = 1.5
    # sqrt_energy divides by local amplitude; squared_energy divides by
    # squared energy, which favors low-energy sidelobes over line centers
    energy_denominator_mode: str = "sqrt_energy"

    def validate(self):
        if not 0.0 < self.sigma0 < 1.0:
            raise ValueError(f"sigma0 must be in (0,1), got {self.sigma0}")
        lam = tuple(self.lambdas)
        if any(l2 <= l1 for l1, l2 in zip(lam, lam[1:])):
            raise ValueError(f"lambdas must be strictly increasing, got {lam}")
        if any(l <= 2.0 for l in lam):
            raise ValueError(f"lambdas must all exceed 2 pixels, got {lam}")
        if self.thresh < 0:
            raise ValueError(f"thresh must be >= 0, got {self.thresh}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.attenuation_a < 0:
            raise ValueError(f"attenuation_a must be >= 0, got {self.attenuation_a}")
        if self.energy_denominator_mode not in ("squared_energy", "sqrt_energy"):
            raise ValueError(
                f"unknown energy_denominator_mode {self.energy_denominator_mode!r}")
        return self


@dataclass
class MonogenicTriple:
    """Bandpassed frame plus its two Riesz-transform components."""

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map normalizes to all zeros."""
    lo = x.min()
    span = x.max() - lo
    if span <= 0:
        return np.zeros_like(x)
    return (x - lo) / span


def tga(frame: np.ndarray, a: float) -> np.ndarray:
    """Depth-dependent gain decay: row r is scaled by exp(-a * r/(rows-1))."""
    if a < 0:
        raise ValueError(f"attenuation factor must be >= 0, got {a}")
    rows = frame.shape[0]
    depth = np.linspace(0.0, 1.0, rows) if rows > 1 else np.zeros(1)
    return frame * np.exp(-a * depth)[:, None]


def ibs(frame: np.ndarray) -> np.ndarray:
    """Integrated backscatter: cumulative down-column squared intensity,
    normalized per column so the bottom row is 1. All-zero columns stay 0."""
    energy = np.cumsum(frame.astype(np.float64) ** 2, axis=0)
    total = energy[-1]
    out = np.zeros_like(energy)
    np.divide(energy, total, out=out, where=total > 0)
    return out


def _frequency_grids(rows: int, cols: int):
    u = 2.0 * np.pi * np.fft.fftfreq(rows)
    v = 2.0 * np.pi * np.fft.fftfreq(cols)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    mag = np.hypot(uu, vv)
    return uu, vv, mag


def log_gabor_gain(omega: np.ndarray, lambda0: float, sigma0: float) -> np.ndarray:
    """Radial log-Gabor transfer function with zero DC gain."""
    if lambda0 <= 2.0:
        raise ValueError(f"lambda0 must exceed 2 pixels, got {lambda0}")
    omega0 = 2.0 * np.pi / lambda0
    with np.errstate(divide="ignore"):
        ratio = np.where(omega > 0, omega / omega0, 1.0)
        g = np.exp(-(np.log(ratio) ** 2) / (2.0 * np.log(sigma0) ** 2))
    g[omega == 0] = 0.0
    return g


def monogenic(frame: np.ndarray, lambda0: float, sigma0: float) -> MonogenicTriple:
    """Monogenic signal of a frame at one wavelength.

    m1 is the log-Gabor bandpass; m2/m3 are the Riesz components along
    rows/columns, computed with the frequency multipliers i*w_r/|w| and
    i*w_c/|w| (zero at DC).
    """
    uu, vv, mag = _frequency_grids(*frame.shape)
    spectrum = np.fft.fft2(frame) * log_gabor_gain(mag, lambda0, sigma0)
    safe = np.where(mag > 0, mag, 1.0)
    m1 = np.real(np.fft.ifft2(spectrum))
    m2 = np.real(np.fft.ifft2(spectrum * (1j * uu / safe)))
    m3 = np.real(np.fft.ifft2(spectrum * (1j * vv / safe)))
    return MonogenicTriple(m1=m1, m2=m2, m3=m3)


def log_gabor_response(frame: np.ndarray, lambda0: float, sigma0: float) -> np.ndarray:
    uu, vv, mag = _frequency_grids(*frame.shape)
    return np.real(np.fft.ifft2(np.fft.fft2(frame) * log_gabor_gain(mag, lambda0, sigma0)))


def monogenic_direct(frame: np.ndarray, lambda0: float, sigma0: float) -> MonogenicTriple:
    """O(N^4) direct-DFT oracle for monogenic(); test use only."""
    rows, cols = frame.shape
    r = np.arange(rows)
    c = np.arange(cols)
    er = np.exp(-2j * np.pi * np.outer(r, r) / rows)
    ec = np.exp(-2j * np.pi * np.outer(c, c) / cols)
    spectrum = er @ frame.astype(np.complex128) @ ec
    uu, vv, mag = _frequency_grids(rows, cols)
    spectrum *= log_gabor_gain(mag, lambda0, sigma0)
    safe = np.where(mag > 0, mag, 1.0)
    ier = np.conj(er) / rows
    iec = np.conj(ec) / cols
    def inv(s):
        return np.real(ier @ s @ iec)
    return MonogenicTriple(m1=inv(spectrum),
                           m2=inv(spectrum * (1j * uu / safe)),
                           m3=inv(spectrum * (1j * vv / safe)))


def local_phase_raw(m: MonogenicTriple, epsilon: float = 1e-6) -> np.ndarray:
    """1 - atan(odd / (even + eps)): maximal (= 1) at even, line-like
    structure, falling toward 1 - pi/2 where odd energy dominates."""
    odd = np.hypot(m.m2, m.m3)
    return 1.0 - np.arctan(odd / (np.abs(m.m1) + epsilon))


def local_phase(m: MonogenicTriple, epsilon: float = 1e-6) -> np.ndarray:
    """Local phase map, min-max normalized to [0, 1] per frame."""
    return minmax_normalize(local_phase_raw(m, epsilon))


def phase_symmetry(m: MonogenicTriple, thresh: float = 0.01,
                   epsilon: float = 1e-6,
                   mode: str = "squared_energy") -> np.ndarray:
    """Even-symmetry detector: floor(even - odd - thresh, 0) over local
    energy, min-max normalized to [0, 1].

    The even response is signed (bright-polarity), so dark troughs such as
    the negative sidelobes flanking a bright line do not respond.
    """
    if thresh < 0:
        raise ValueError(f"thresh must be >= 0, got {thresh}")
    even = m.m1
    odd = np.hypot(m.m2, m.m3)
    num = np.maximum(even - odd - thresh, 0.0)
    energy = m.m1 ** 2 + m.m2 ** 2 + m.m3 ** 2
    if mode == "squared_energy":
        den = energy + epsilon
    elif mode == "sqrt_energy":
        den = np.sqrt(energy) + epsilon
    else:
        raise ValueError(f"unknown energy denominator mode {mode!r}")
    return minmax_normalize(num / den)


def fuse(frame: np.ndarray, cfg: FusionConfig) -> np.ndarray:
    """Fused feature stack: per wavelength, LP * FS * (1 - IBS), each channel
    min-max normalized. Returns (len(lambdas), H, W) in [0, 1]."""
    cfg.validate()
    weight = 1.0 - ibs(frame)
    channels = []
    for lam in cfg.lambdas:
        m = monogenic(frame, lam, cfg.sigma0)
        lp = local_phase(m, cfg.epsilon)
        fs = phase_symmetry(m, cfg.thresh, cfg.epsilon, cfg.energy_denominator_mode)
        channels.append(minmax_normalize(lp * fs * weight))
    return np.stack(channels).astype(np.float32)


def norm_stack(frame: np.ndarray, n_channels: int = 10) -> np.ndarray:
    """Ablation alternative: (frame - mu_i) / 0.5 with mu_i linear in
    [0.3, 0.7] across channels."""
    mus = np.linspace(0.3, 0.7, n_channels)
    return np.stack([(frame - mu) / 0.5 for mu in mus]).astype(np.float32)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(frame_a: np.ndarray, frame_b: np.ndarray, *, window_size: int = 11,
         sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window over valid positions."""
    if frame_a.shape != frame_b.shape:
        raise ValueError(
            f"ssim: frame shapes differ, {frame_a.shape} vs {frame_b.shape}")
    a = frame_a.astype(np.float64)
    b = frame_b.astype(np.float64)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(window_size, sigma)

    def smooth(x):
        return fftconvolve(x, win, mode="valid")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a ** 2
    var_b = smooth(b * b) - mu_b ** 2
    cov = smooth(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def resize_bilinear(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinear resample of a 2-D image (align-corners convention)."""
    h, w = img.shape
    if (h, w) == (rows, cols):
        return img.astype(np.float64, copy=True)
    r = np.linspace(0, h - 1, rows)
    c = np.linspace(0, w - 1, cols)
    r0 = np.clip(np.floor(r).astype(int), 0, h - 2) if h > 1 else np.zeros(rows, int)
    c0 = np.clip(np.floor(c).astype(int), 0, w - 2) if w > 1 else np.zeros(cols, int)
    fr = (r - r0)[:, None]
    fc = (c - c0)[None, :]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def prepare_frame(frame: np.ndarray, size: int, attenuation_a: float | None = None) -> np.ndarray:
    """Resize to the working resolution and optionally apply TGA."""
    out = resize_bilinear(frame, size, size)
    if attenuation_a is not None:
        out = tga(out, attenuation_a)
    return out
