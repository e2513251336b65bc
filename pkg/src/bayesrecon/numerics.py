"""Array primitives: unitary FFTs, exact non-uniform DFT, CG, shifts, tiling.

Images are plain ``complex128`` numpy arrays indexed ``[row, col]``. Axis 0
is the phase-encode direction throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

PHASE_AXIS = 0


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG used anywhere in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_complex(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def _check_2d(img: np.ndarray, name: str = "image") -> None:
    if img.ndim != 2 or min(img.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {img.shape}")


def fft2(img) -> np.ndarray:
    """Unitary 2-D DFT (scale 1/sqrt(H*W)), DC at index (0, 0)."""
    img = as_complex(img, "image")
    _check_2d(img)
    return np.fft.fft2(img, norm="ortho")


def ifft2(ksp) -> np.ndarray:
    ksp = as_complex(ksp, "k-space")
    _check_2d(ksp, "k-space")
    return np.fft.ifft2(ksp, norm="ortho")


def fft2c(img: np.ndarray) -> np.ndarray:
    """Unitary DFT over the last two axes with the DC term at (H//2, W//2)."""
    return np.fft.fftshift(np.fft.fft2(img, norm="ortho"), axes=(-2, -1))


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(ksp, axes=(-2, -1)), norm="ortho")


def vdot(a: np.ndarray, b: np.ndarray) -> complex:
    """Inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(np.ravel(a), np.ravel(b)))


# -- exact non-uniform DFT ----------------------------------------------------


def _check_traj(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"trajectory must have shape (M, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValidationError("trajectory contains non-finite coordinates")
    if np.any(coords < -0.5) or np.any(coords >= 0.5):
        raise ValidationError("trajectory coordinates must lie in [-0.5, 0.5) cycles/pixel")
    return coords


def nudft_matrix(coords, shape: tuple[int, int]) -> np.ndarray:
    """Dense (M, H*W) matrix of the forward non-uniform DFT.

    Row m holds exp(-2*pi*i*(kx_m*p + ky_m*q)) / sqrt(H*W) for the pixel
    (p, q) in row-major order; kx pairs with axis 0.
    """
    coords = _check_traj(coords)
    h, w = shape
    p = np.arange(h, dtype=np.float64)
    q = np.arange(w, dtype=np.float64)
    # separable: exp(a*p) * exp(b*q)
    ep = np.exp(-2j * np.pi * np.outer(coords[:, 0], p))
    eq = np.exp(-2j * np.pi * np.outer(coords[:, 1], q))
    mat = (ep[:, :, None] * eq[:, None, :]).reshape(len(coords), h * w)
    return mat / np.sqrt(h * w)


def nudft_forward(img, coords, matrix: np.ndarray | None = None) -> np.ndarray:
    img = as_complex(img, "image")
    _check_2d(img)
    if matrix is None:
        matrix = nudft_matrix(coords, img.shape)
    elif matrix.shape[1] != img.size:
        raise ShapeError("precomputed NUDFT matrix does not match image size")
    return matrix @ img.ravel()


def nudft_adjoint(samples, coords, shape: tuple[int, int],
                  matrix: np.ndarray | None = None) -> np.ndarray:
    samples = as_complex(samples, "samples")
    if matrix is None:
        matrix = nudft_matrix(coords, shape)
    if samples.ndim != 1 or samples.shape[0] != matrix.shape[0]:
        raise ShapeError(
            f"expected {matrix.shape[0]} samples, got array of shape {samples.shape}")
    return (matrix.conj().T @ samples).reshape(shape)


# -- conjugate gradient -------------------------------------------------------


@dataclass
class CGResult:
    x: np.ndarray
    residual: float
    """Achieved relative residual ||A x - b|| / ||b||."""
    iterations: int
    converged: bool
    stalled: bool = False
    history: list[float] = field(default_factory=list)


def cg_solve(apply_op: Callable[[np.ndarray], np.ndarray], rhs, tol: float = 1e-9,
             max_iter: int = 200, x0=None) -> CGResult:
    """Conjugate gradients for a Hermitian positive semi-definite map.

    Works on arrays of any shape; ``apply_op`` must preserve it. Starting
    from zero on a singular but consistent system the iterates stay in the
    range of the operator, so the minimum-norm solution is returned.

    Raises NumericalError when an iterate or the curvature turns non-finite.
    A zero or negative curvature ends the loop with ``stalled=True``.
    """
    b = as_complex(rhs, "rhs")
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else as_complex(x0, "x0").copy()
    if bnorm == 0.0:
        return CGResult(x=np.zeros_like(b), residual=0.0, iterations=0, converged=True)
    r = b - apply_op(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    history = [np.sqrt(rr) / bnorm]
    if history[-1] <= tol:
        return CGResult(x=x, residual=history[-1], iterations=0, converged=True,
                        history=history)
    for it in range(1, max_iter + 1):
        ap = apply_op(p)
        curv = np.vdot(p, ap).real
        if not np.isfinite(curv):
            raise NumericalError(f"cg_solve: non-finite curvature at iteration {it}")
        if curv <= 0.0:
            return CGResult(x=x, residual=history[-1], iterations=it - 1,
                            converged=False, stalled=True, history=history)
        step = rr / curv
        x = x + step * p
        r = r - step * ap
        rr_new = np.vdot(r, r).real
        if not np.isfinite(rr_new):
            raise NumericalError(f"cg_solve: non-finite residual at iteration {it}")
        history.append(np.sqrt(rr_new) / bnorm)
        if history[-1] <= tol:
            return CGResult(x=x, residual=history[-1], iterations=it, converged=True,
                            history=history)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x=x, residual=history[-1], iterations=max_iter, converged=False,
                    history=history)


# -- shifts and tiles ---------------------------------------------------------


def circ_shift(img: np.ndarray, offset: int, axis: int = PHASE_AXIS) -> np.ndarray:
    return np.roll(img, int(offset) % img.shape[axis], axis=axis)


def patch_split(img: np.ndarray, patch: int) -> list[np.ndarray]:
    """Non-overlapping ``patch x patch`` tiles in row-major tile order."""
    _check_2d(img)
    h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image shape {img.shape}")
    th, tw = h // patch, w // patch
    blocks = img.reshape(th, patch, tw, patch).swapaxes(1, 2)
    return [blocks[i, j].copy() for i in range(th) for j in range(tw)]


def patch_merge(tiles, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    tiles = np.asarray(tiles)
    if tiles.ndim != 3 or tiles.shape[1] != tiles.shape[2]:
        raise ShapeError("tiles must be a sequence of square 2-D arrays")
    patch = tiles.shape[1]
    if h % patch or w % patch or tiles.shape[0] != (h // patch) * (w // patch):
        raise ShapeError(f"{tiles.shape[0]} tiles of size {patch} cannot form {shape}")
    th, tw = h // patch, w // patch
    return tiles.reshape(th, tw, patch, patch).swapaxes(1, 2).reshape(h, w)
