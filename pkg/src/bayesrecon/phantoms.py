"""Synthetic complex ellipse phantoms and measurement noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .numerics import make_rng


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int] = (32, 32)
    n_ellipses: int = 6
    intensity: tuple[float, float] = (0.2, 1.0)
    phase_amplitude: float = 1.0
    """Peak absolute phase in radians."""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", (32, 32)))
        d["intensity"] = tuple(d.get("intensity", (0.2, 1.0)))
        return cls(**d)


def _ellipse(p, q, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (p - cy) * c + (q - cx) * s
    v = -(p - cy) * s + (q - cx) * c
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.shape
    lo, hi = spec.intensity
    # normalised coordinates in [-1, 1]
    p, q = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    mag = np.zeros((h, w))
    outer = _ellipse(p, q, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                     rng.uniform(0.65, 0.9), rng.uniform(0.55, 0.85), rng.uniform(0, np.pi))
    mag[outer] = rng.uniform(lo, hi)
    for _ in range(int(rng.integers(1, spec.n_ellipses + 1))):
        inner = _ellipse(p, q, rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                         rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4), rng.uniform(0, np.pi))
        mag[inner & outer] = rng.uniform(0.0, hi)
    mag = np.clip(mag, 0.0, 1.0)
    # smooth phase: random quadratic polynomial scaled to the requested peak
    coef = rng.uniform(-1, 1, 5)
    phase = coef[0] * p + coef[1] * q + coef[2] * p * p + coef[3] * q * q + coef[4] * p * q
    peak = np.max(np.abs(phase))
    if peak > 0:
        phase = phase * (spec.phase_amplitude / peak)
    return mag * np.exp(1j * phase)


def generate_phantoms(spec: PhantomSpec, n: int) -> np.ndarray:
    """``(n, H, W)`` complex phantoms with magnitude in [0, 1]."""
    if n < 1:
        raise ValidationError("need at least one phantom")
    rng = make_rng(spec.seed)
    return np.stack([make_phantom(spec, rng) for _ in range(n)])


def add_noise(y, std: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise, std/sqrt(2) per real component."""
    if std < 0:
        raise ValidationError("noise std must be non-negative")
    y = np.asarray(y, dtype=np.complex128)
    if std == 0:
        return y.copy()
    sigma = std / np.sqrt(2.0)
    noise = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
    return y + sigma * noise
