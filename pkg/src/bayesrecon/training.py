"""Maximum-likelihood training of the prior network with Adam."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .mixture import Discretization
from .numerics import as_complex, make_rng
from .prior import LN2, PriorNet, _to_tensor, dropout_mask, mixture_loglik, nll_bits_per_dim


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    dropout: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ValidationError("epochs and batch must be >= 1")
        if not self.lr >= 0:
            raise ValidationError("learning rate must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "version"}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    monitor_loss: list[float] = field(default_factory=list)
    """Bits/dim of a fixed monitor set (no dropout) at init and after early steps."""
    epoch_loss: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self) -> str:
        lines = ["step,bits_per_dim"]
        lines += [f"{i},{v!r}" for i, v in enumerate(self.step_loss, 1)]
        return "\n".join(lines) + "\n"


def mean_bits_per_dim(net: PriorNet, images, disc: Discretization | None = None) -> float:
    """Average over images of the per-image bits/dim of the snapped data."""
    images = as_complex(images, "dataset")
    return float(np.mean([nll_bits_per_dim(net, im, disc) for im in images]))


def _monitor(net: PriorNet, data: torch.Tensor, dims: int) -> float:
    with torch.no_grad():
        net.eval()
        ll = mixture_loglik(net, data, net(data))
        net.train()
    return -float(ll) / (data.shape[0] * dims * LN2)


def train(net: PriorNet, images, cfg: TrainConfig | None = None,
          disc: Discretization | None = None, monitor=None,
          monitor_steps: int = 0, on_epoch=None) -> TrainHistory:
    """Fit ``net`` in place on a stack ``(N, H, W)`` of complex images.

    Images are snapped to bin centres once. Each step minimises the batch mean
    negative log-likelihood in bits per real dimension. When ``monitor``
    images are given, their mean bits/dim is recorded before training and
    after each of the first ``monitor_steps`` steps. ``on_epoch(epoch, net)``
    is called after every epoch.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    disc = disc or net.disc
    if disc != net.disc:
        net.disc = disc
    images = as_complex(images, "dataset")
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValidationError("training needs a non-empty (N, H, W) image stack")
    data = _to_tensor(disc.snap_complex(images))
    n, _, h, w = data.shape
    dims = 2 * h * w
    mon = _to_tensor(disc.snap_complex(as_complex(monitor, "monitor set"))) \
        if monitor is not None else None
    rng = make_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    hist = TrainHistory()
    t0 = time.perf_counter()
    net.train()
    if mon is not None and monitor_steps > 0:
        hist.monitor_loss.append(_monitor(net, mon, dims))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = data[idx]
            masks = None
            if cfg.dropout > 0:
                masks = [torch.from_numpy(dropout_mask(s, cfg.dropout, rng))
                         for s in net.dropout_shapes(len(idx), h, w)]
            opt.zero_grad(set_to_none=True)
            loss = -mixture_loglik(net, xb, net(xb, masks)) / (len(idx) * dims * LN2)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at step {len(hist.step_loss) + 1}")
            loss.backward()
            opt.step()
            hist.step_loss.append(loss.item())
            if mon is not None and len(hist.step_loss) <= monitor_steps:
                hist.monitor_loss.append(_monitor(net, mon, dims))
            losses.append(hist.step_loss[-1] * len(idx))
        hist.epoch_loss.append(sum(losses) / n)
        if on_epoch is not None:
            net.eval()
            on_epoch(len(hist.epoch_loss), net)
            net.train()
    net.eval()
    hist.seconds = time.perf_counter() - t0
    return hist
