"""MAP reconstruction by projected (sub)gradient ascent on log g(x), plus the
zero-filled and CG-SENSE baselines.

One MAP iteration: circularly shift the iterate along phase-encode by a
random offset, cut it into tiles, take a dropout-masked prior-gradient step
on every tile, stitch, shift back, and project onto the data-consistent set.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .encoding import EncodingOperator
from .errors import NumericalError, ValidationError
from .mixture import Discretization
from .numerics import (CGResult, as_complex, cg_solve, circ_shift, make_rng,
                       patch_merge, patch_split, PHASE_AXIS)
from .prior import PriorNet, dropout_mask, forward, input_grad
from .mixture import pixel_terms

CSV_HEADER = ("iter", "neg_log_prior", "resid_pre", "resid_post", "step", "ms")


class Prior(Protocol):
    def grad(self, tiles: np.ndarray) -> np.ndarray: ...

    def log_prob(self, tiles: np.ndarray) -> float: ...


class NetPrior:
    """Adapter exposing a trained network as a tile-batch prior."""

    def __init__(self, net: PriorNet, disc: Discretization | None = None):
        self.net = net
        self.disc = disc or net.disc

    def grad(self, tiles):
        return input_grad(self.net, tiles)

    def log_prob(self, tiles):
        params = forward(self.net, tiles)
        return pixel_terms(tiles.real, tiles.imag, params, self.disc).total


class NullPrior:
    """Constant prior: zero gradient, zero log-density."""

    def grad(self, tiles):
        return np.zeros_like(tiles)

    def log_prob(self, tiles):
        return 0.0


@dataclass
class ReconConfig:
    max_iter: int = 200
    stop_tol: float | None = None
    """Threshold on ||A z - y||^2; ``None`` resolves to 1e-10 * ||y||^2."""
    step_mode: str = "fixed"
    step_size: float = 1e-3
    dropout_rate: float = 0.5
    patch: int | None = None
    init: str = "zero-filled"
    seed: int = 0
    fresh_dropout: bool = True
    literal_sign: bool = False
    """Step along -grad log g (descent) as the update is literally written."""

    def validate(self, shape) -> None:
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.step_size > 0:
            raise ValidationError("step_size must be positive")
        if self.step_mode not in ("fixed", "harmonic"):
            raise ValidationError("step_mode must be 'fixed' or 'harmonic'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.init not in ("zero-filled", "random", "provided"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.patch is not None:
            if self.patch < 1 or shape[0] % self.patch or shape[1] % self.patch:
                raise ValidationError(f"patch {self.patch} does not divide image {shape}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterRecord:
    iter: int
    neg_log_prior: float
    resid_pre: float
    resid_post: float
    step: float
    ms: float


@dataclass
class ConvergenceLog:
    records: list[IterRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path=None, timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow([r.iter, repr(r.neg_log_prior), repr(r.resid_pre),
                             repr(r.resid_post), repr(r.step),
                             f"{r.ms:.3f}" if timing else "0"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def zero_filled(op: EncodingOperator, y) -> np.ndarray:
    return op.adjoint(y)


def cg_sense(op: EncodingOperator, y, tol: float = 1e-6, max_iter: int = 100):
    """Least squares min ||A x - y|| by CG on A^* A x = A^* y from x = 0.

    Returns ``(x, CGResult)``; the result carries the residual history.
    """
    res = cg_solve(op.normal, op.adjoint(y), tol=tol, max_iter=max_iter)
    return res.x, res


def _as_prior(net) -> Prior:
    if isinstance(net, PriorNet):
        return NetPrior(net)
    if net is None:
        return NullPrior()
    return net


def _tiles(x: np.ndarray, patch: int | None) -> np.ndarray:
    if patch is None:
        return x[None]
    return np.stack(patch_split(x, patch))


def _merge(tiles: np.ndarray, shape, patch: int | None) -> np.ndarray:
    if patch is None:
        return tiles[0]
    return patch_merge(tiles, shape)


def map_reconstruct(net, op: EncodingOperator, y, cfg: ReconConfig | None = None,
                    disc: Discretization | None = None, x0=None):
    """Maximise log g(x) subject to A x = y; returns ``(x, ConvergenceLog)``.

    ``net`` is a :class:`PriorNet`, any object with ``grad``/``log_prob`` on
    tile batches, or ``None`` for a constant prior.
    """
    cfg = cfg or ReconConfig()
    cfg.validate(op.shape)
    if isinstance(net, PriorNet) and disc is not None:
        prior = NetPrior(net, disc)
    else:
        prior = _as_prior(net)
    y = as_complex(y, "k-space")
    rng = make_rng(cfg.seed)
    stop_tol = cfg.stop_tol if cfg.stop_tol is not None else 1e-10 * float(
        np.sum(np.abs(y) ** 2))

    if cfg.init == "zero-filled":
        x = zero_filled(op, y)
    elif cfg.init == "random":
        x = 0.5 * (rng.standard_normal(op.shape) + 1j * rng.standard_normal(op.shape))
    else:
        if x0 is None:
            raise ValidationError("init='provided' needs an initial image")
        x = as_complex(x0, "initial image").copy()

    shift_range = cfg.patch if cfg.patch is not None else op.shape[PHASE_AXIS]
    sign = -1.0 if cfg.literal_sign else 1.0
    fixed_mask = None
    log = ConvergenceLog()
    for k in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        d = int(rng.integers(0, shift_range))
        tiles = _tiles(circ_shift(x, d), cfg.patch)
        grad = prior.grad(tiles)
        if cfg.dropout_rate > 0.0:
            if cfg.fresh_dropout or fixed_mask is None:
                fixed_mask = dropout_mask(grad.shape, cfg.dropout_rate, rng)
            grad = grad * fixed_mask
        step = cfg.step_size / k if cfg.step_mode == "harmonic" else cfg.step_size
        z = circ_shift(_merge(tiles + sign * step * grad, op.shape, cfg.patch), -d)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"iteration {k}: non-finite image after the prior step")
        # huge but finite steps can still overflow below; checked explicitly after
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            resid_pre = float(np.sum(np.abs(op.forward(z) - y) ** 2))
            x = op.project(z, y)
            resid_post = float(np.sum(np.abs(op.forward(x) - y) ** 2))
            nlp = -prior.log_prob(_tiles(x, cfg.patch))
        if not (np.isfinite(resid_pre) and np.isfinite(nlp) and np.all(np.isfinite(x))):
            raise NumericalError(f"iteration {k}: non-finite "
                                 f"{'residual' if not np.isfinite(resid_pre) else 'iterate'}")
        log.records.append(IterRecord(k, float(nlp), resid_pre, resid_post, step,
                                      1e3 * (time.perf_counter() - t0)))
        if resid_pre < stop_tol:
            break
    return x, log
