"""MRI forward model A = G F S: sampling masks, spiral trajectories, coil
sensitivities, forward/adjoint application and data-consistency projection.

Cartesian k-space is stored centred: row index ``l`` of a (H, W) k-space
array is the frequency ``l - H // 2`` along the phase-encode axis (axis 0).
Readout (axis 1) is always fully sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ShapeError, ValidationError
from .numerics import (CGResult, as_complex, cg_solve, fft2c, ifft2c, make_rng,
                       nudft_matrix)

CARTESIAN = "cartesian"
NONCARTESIAN = "noncartesian"
PROJECTIONS = ("direct", "cg", "unit-gram")


@dataclass(frozen=True)
class SamplingMask:
    kind: str
    lines: tuple[int, ...]
    shape: tuple[int, int]
    acs: int = 0

    def __post_init__(self):
        h, _ = self.shape
        if not self.lines:
            raise ValidationError("sampling mask has no lines")
        if list(self.lines) != sorted(set(self.lines)):
            raise ValidationError("mask lines must be sorted and unique")
        if self.lines[0] < 0 or self.lines[-1] >= h:
            raise ValidationError(f"mask lines must lie in [0, {h})")

    @property
    def fraction(self) -> float:
        return len(self.lines) / self.shape[0]

    def as_array(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[list(self.lines), :] = True
        return m


@dataclass(frozen=True)
class Trajectory:
    coords: np.ndarray = field(repr=False)
    """(M, 2) coordinates in cycles/pixel; column 0 pairs with image axis 0."""

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ShapeError(f"trajectory must have shape (M, 2), got {c.shape}")
        if np.any(c < -0.5) or np.any(c >= 0.5):
            raise ValidationError("trajectory leaves the Nyquist box [-0.5, 0.5)")
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return len(self.coords)


def acs_lines(h: int, acs: int) -> list[int]:
    """Centred block floor(H/2)-ceil(acs/2) .. floor(H/2)+floor(acs/2)-1."""
    if acs < 0 or acs > h:
        raise ValidationError(f"ACS width {acs} must be in [0, {h}]")
    start = h // 2 - (acs + 1) // 2
    return list(range(start, start + acs))


def make_uniform_mask(h: int, w: int, r: int, acs: int) -> SamplingMask:
    if r < 1:
        raise ValidationError("undersampling factor must be >= 1")
    lines = set(range(0, h, r)) | set(acs_lines(h, acs))
    return SamplingMask("uniform", tuple(sorted(lines)), (h, w), acs)


def make_random_mask(h: int, w: int, rate: float, acs: int,
                     rng: np.random.Generator) -> SamplingMask:
    """ACS block plus floor(rate * H) random outer lines drawn without replacement."""
    if not 0.0 < rate <= 1.0:
        raise ValidationError(f"rate must be in (0, 1], got {rate}")
    center = acs_lines(h, acs)
    pool = np.setdiff1d(np.arange(h), center)
    n_outer = int(np.floor(rate * h))
    if n_outer > len(pool):
        raise ValidationError(
            f"{n_outer} random lines requested but only {len(pool)} lie outside the ACS")
    picks = rng.choice(pool, size=n_outer, replace=False) if n_outer else []
    lines = sorted(set(center) | {int(p) for p in picks})
    return SamplingMask("random", tuple(lines), (h, w), acs)


def make_full_mask(h: int, w: int) -> SamplingMask:
    return SamplingMask("full", tuple(range(h)), (h, w), h)


def make_spiral(h: int, w: int, interleaves_total: int, interleaves_used: int,
                samples_per_leaf: int | None = None) -> Trajectory:
    """Evenly rotated Archimedean arms sampled uniformly in arc length.

    Arm spacing in the fully sampled case is one k-space cell, so each arm
    winds ``r_max * max(H, W) / interleaves_total`` turns.
    """
    if not 1 <= interleaves_used <= interleaves_total:
        raise ValidationError("need 1 <= interleaves_used <= interleaves_total")
    n = max(h, w)
    samples = samples_per_leaf or 4 * n
    r_max = 0.5 * (1.0 - 1.0 / n)
    theta_max = 2 * np.pi * r_max * n / interleaves_total
    dense = np.linspace(0.0, theta_max, 64 * samples)
    radius = r_max * dense / theta_max
    # arc length of r = c*theta by trapezoid on a dense grid
    dr = np.gradient(radius, dense)
    ds = np.sqrt(radius ** 2 + dr ** 2)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(dense))])
    theta = np.interp(np.linspace(0.0, arc[-1], samples), arc, dense)
    rad = r_max * theta / theta_max
    arms = np.round(np.arange(interleaves_used) * interleaves_total / interleaves_used)
    coords = []
    for arm in arms:
        phi = theta + 2 * np.pi * arm / interleaves_total
        coords.append(np.stack([rad * np.cos(phi), rad * np.sin(phi)], axis=1))
    return Trajectory(np.concatenate(coords))


def synth_sensitivities(h: int, w: int, n_coils: int) -> np.ndarray:
    """Gaussian-lobe coil profiles with smooth phase, normalised to sum |S_c|^2 = 1.

    Coil centres sit evenly on the ellipse through the image border.
    """
    if n_coils < 1:
        raise ValidationError("need at least one coil")
    p, q = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2,
                       indexing="ij")
    width = 0.6 * max(h, w)
    maps = []
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils
        cp, cq = 0.5 * h * np.cos(ang), 0.5 * w * np.sin(ang)
        mag = np.exp(-((p - cp) ** 2 + (q - cq) ** 2) / (2 * width ** 2))
        phase = ang + np.pi * (np.cos(ang) * p / h + np.sin(ang) * q / w)
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))


@dataclass
class EncodingOperator:
    """Sensitivity weighting, Fourier encoding and sampling for one image shape.

    ``sens`` is ``(coils, H, W)``. Data ``y`` is ``(coils, lines, W)`` for a
    Cartesian mask and ``(coils, M)`` for a trajectory.
    """

    sens: np.ndarray
    sampling: SamplingMask | Trajectory
    projection: str = "direct"
    cg_tol: float = 1e-9
    cg_max_iter: int = 200
    rcond: float = 1e-10
    last_cg: CGResult | None = field(default=None, repr=False)

    def __post_init__(self):
        self.sens = as_complex(self.sens, "sensitivities")
        if self.sens.ndim != 3:
            raise ShapeError("sensitivities must have shape (coils, H, W)")
        if isinstance(self.sampling, SamplingMask):
            if tuple(self.sampling.shape) != self.shape:
                raise ShapeError(f"mask shape {self.sampling.shape} does not match "
                                 f"sensitivities {self.shape}")
        elif not isinstance(self.sampling, Trajectory):
            raise ValidationError("sampling must be a SamplingMask or a Trajectory")
        if self.projection not in PROJECTIONS:
            raise ValidationError(f"projection must be one of {PROJECTIONS}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.sens.shape[1:])

    @property
    def n_coils(self) -> int:
        return self.sens.shape[0]

    @property
    def mode(self) -> str:
        return CARTESIAN if isinstance(self.sampling, SamplingMask) else NONCARTESIAN

    @property
    def data_shape(self) -> tuple[int, ...]:
        if self.mode == CARTESIAN:
            return (self.n_coils, len(self.sampling.lines), self.shape[1])
        return (self.n_coils, len(self.sampling))

    @cached_property
    def _nudft(self) -> np.ndarray:
        return nudft_matrix(self.sampling.coords, self.shape)

    def _check_image(self, x) -> np.ndarray:
        x = as_complex(x, "image")
        if x.shape != self.shape:
            raise ShapeError(f"image shape {x.shape} does not match operator {self.shape}")
        return x

    def _check_data(self, y) -> np.ndarray:
        y = as_complex(y, "k-space")
        if y.shape != self.data_shape:
            raise ShapeError(f"data shape {y.shape} does not match operator "
                             f"{self.data_shape}")
        return y

    def forward(self, x) -> np.ndarray:
        x = self._check_image(x)
        coil_imgs = self.sens * x
        if self.mode == CARTESIAN:
            return fft2c(coil_imgs)[:, list(self.sampling.lines), :]
        return coil_imgs.reshape(self.n_coils, -1) @ self._nudft.T

    def adjoint(self, y) -> np.ndarray:
        y = self._check_data(y)
        if self.mode == CARTESIAN:
            full = np.zeros((self.n_coils,) + self.shape, dtype=np.complex128)
            full[:, list(self.sampling.lines), :] = y
            coil_imgs = ifft2c(full)
        else:
            coil_imgs = (y @ self._nudft.conj()).reshape((self.n_coils,) + self.shape)
        return np.sum(self.sens.conj() * coil_imgs, axis=0)

    def normal(self, x) -> np.ndarray:
        return self.adjoint(self.forward(x))

    # -- data-consistency projection ----------------------------------------

    def _encoding_blocks(self) -> np.ndarray:
        """Dense encoding matrices, one per independent block of unknowns.

        Cartesian: with the readout fully sampled, an inverse FFT along axis
        1 moves the data to (ky, x) hybrid space where every image column is
        encoded on its own by ``F_y[lines] diag(S_c[:, x])``; shape
        ``(W, coils*L, H)``. Non-Cartesian: one block ``(coils*M, H*W)``.
        """
        h, w = self.shape
        if self.mode == CARTESIAN:
            freqs = np.asarray(self.sampling.lines) - h // 2
            fy = np.exp(-2j * np.pi * np.outer(freqs, np.arange(h)) / h) / np.sqrt(h)
            blocks = fy[None, None] * np.transpose(self.sens, (2, 0, 1))[:, :, None, :]
            return blocks.reshape(w, -1, h)
        sens = self.sens.reshape(self.n_coils, 1, -1)
        return (self._nudft[None] * sens).reshape(1, -1, h * w)

    @cached_property
    def _svd(self):
        """Truncated SVD per block as ``(V, inverse singular values, U^*, keep)``.

        Applied in factored form; multiplying out ``V diag(1/s) U^*`` would
        cancel entries of size 1/s_min and lose the row-space structure.
        """
        u, s, vh = np.linalg.svd(self._encoding_blocks(), full_matrices=False)
        keep = s > self.rcond * s[:, :1]
        inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        return vh.conj().transpose(0, 2, 1), inv, u.conj().transpose(0, 2, 1), keep

    def _pinv_blocks(self, yb: np.ndarray) -> np.ndarray:
        v, inv, uh, _ = self._svd
        return np.einsum("bnk,bk->bn", v, inv * np.einsum("bkm,bm->bk", uh, yb))

    def _row_space_blocks(self, xb: np.ndarray) -> np.ndarray:
        v, _, _, keep = self._svd
        coef = np.einsum("bnk,bn->bk", v.conj(), xb) * keep
        return np.einsum("bnk,bk->bn", v, coef)

    def _to_blocks(self, y: np.ndarray) -> np.ndarray:
        if self.mode == CARTESIAN:
            hy = np.fft.ifft(np.fft.ifftshift(y, axes=-1), axis=-1, norm="ortho")
            return np.transpose(hy, (2, 0, 1)).reshape(self.shape[1], -1)
        return y.reshape(1, -1)

    def _from_blocks(self, xb: np.ndarray) -> np.ndarray:
        if self.mode == CARTESIAN:
            return xb.T.copy()
        return xb.reshape(self.shape)

    def _image_blocks(self, x: np.ndarray) -> np.ndarray:
        return x.T if self.mode == CARTESIAN else x.reshape(1, -1)

    def pinv_apply(self, r) -> np.ndarray:
        """Minimum-norm least-squares solution w of A w = r."""
        r = self._check_data(r)
        if self.projection == "direct":
            return self._from_blocks(self._pinv_blocks(self._to_blocks(r)))
        res = cg_solve(self.normal, self.adjoint(r), tol=self.cg_tol,
                       max_iter=self.cg_max_iter)
        self.last_cg = res
        return res.x

    def project(self, z, y) -> np.ndarray:
        """Closest point to ``z`` among the least-squares solutions of A x = y.

        For consistent data this is the orthogonal projection onto
        {x : A x = y}, i.e. z - A^*(A A^*)^{-1}(A z - y) wherever A A^* is
        invertible. The direct path evaluates the same map as
        ``(I - V V^*) z + A^+ y`` from a truncated SVD of the encoding
        blocks (singular values below ``rcond`` times the largest are
        dropped), which keeps it idempotent to rounding error however badly
        A is conditioned. The ``cg`` path runs CG on the normal equations
        and leaves its convergence record in ``last_cg``.
        """
        z = self._check_image(z)
        y = self._check_data(y)
        if self.projection == "cg":
            return z - self.pinv_apply(self.forward(z) - y)
        if self.projection == "unit-gram":
            return z - self.adjoint(self.forward(z) - y)
        zb = self._image_blocks(z)
        xb = zb - self._row_space_blocks(zb) + self._pinv_blocks(self._to_blocks(y))
        return self._from_blocks(xb)

    def with_projection(self, method: str) -> "EncodingOperator":
        return EncodingOperator(self.sens, self.sampling, method, self.cg_tol,
                                self.cg_max_iter, self.rcond)


def apply_forward(op: EncodingOperator, x) -> np.ndarray:
    return op.forward(x)


def apply_adjoint(op: EncodingOperator, y) -> np.ndarray:
    return op.adjoint(y)


def project_onto_data(op: EncodingOperator, z, y) -> np.ndarray:
    return op.project(z, y)


def data_residual(op: EncodingOperator, x, y) -> float:
    """Squared residual ||A x - y||^2."""
    return float(np.sum(np.abs(op.forward(x) - y) ** 2))


def random_operator(shape, n_coils: int, kind: str, seed: int = 0, r: int = 2,
                    rate: float = 0.15, acs: int = 4, interleaves: tuple[int, int] = (24, 6),
                    ) -> EncodingOperator:
    """Convenience constructor used by the harness and tests."""
    h, w = shape
    if kind == "uniform":
        sampling = make_uniform_mask(h, w, r, acs)
    elif kind == "random":
        sampling = make_random_mask(h, w, rate, acs, make_rng(seed))
    elif kind == "full":
        sampling = make_full_mask(h, w)
    elif kind == "spiral":
        sampling = make_spiral(h, w, *interleaves)
    else:
        raise ValidationError(f"unknown sampling kind {kind!r}")
    return EncodingOperator(synth_sensitivities(h, w, n_coils), sampling)
