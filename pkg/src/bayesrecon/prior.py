"""Autoregressive image prior: a causal convolutional network emitting
per-pixel logistic-mixture parameters.

The network follows the two-stream layout of PixelCNN++ without striding:
a vertical stream that only sees rows strictly above the current pixel,
and a horizontal stream that additionally sees the pixels to the left in
the current row. Causality comes from padding and shifting rather than
weight masks, so there is no blind spot in the receptive field.

All tensors are float64. Randomness (weight init, dropout masks) is drawn
from numpy generators so runs are reproducible from one integer seed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, ShapeError, ValidationError
from .mixture import Discretization, MixtureParams, pixel_terms
from .numerics import as_complex, make_rng

torch.set_default_dtype(torch.float64)

MAGIC = b"BPRIOR1"
LN2 = math.log(2.0)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def down_shift(x: torch.Tensor) -> torch.Tensor:
    return F.pad(x, (0, 0, 1, 0))[:, :, :-1, :]


def right_shift(x: torch.Tensor) -> torch.Tensor:
    return F.pad(x, (1, 0, 0, 0))[:, :, :, :-1]


class DownShiftedConv(nn.Conv2d):
    """Output (i, j) sees input rows i-kh+1..i and columns j-kw//2..j+kw//2."""

    def __init__(self, c_in, c_out, size=(2, 3)):
        super().__init__(c_in, c_out, size)
        kh, kw = size
        self.pad = ((kw - 1) // 2, (kw - 1) // 2, kh - 1, 0)

    def forward(self, x):
        return super().forward(F.pad(x, self.pad))


class DownRightShiftedConv(nn.Conv2d):
    """Output (i, j) sees input rows i-kh+1..i and columns j-kw+1..j."""

    def __init__(self, c_in, c_out, size=(2, 2)):
        super().__init__(c_in, c_out, size)
        kh, kw = size
        self.pad = (kw - 1, 0, kh - 1, 0)

    def forward(self, x):
        return super().forward(F.pad(x, self.pad))


class GatedResnet(nn.Module):
    def __init__(self, n_filters, conv_cls, size, with_aux=False):
        super().__init__()
        self.conv_in = conv_cls(n_filters, n_filters, size)
        self.aux = nn.Conv2d(n_filters, n_filters, 1) if with_aux else None
        self.conv_out = conv_cls(n_filters, 2 * n_filters, size)

    def forward(self, x, aux=None, drop=None):
        c = self.conv_in(F.elu(x))
        if self.aux is not None:
            c = c + self.aux(F.elu(aux))
        c = F.elu(c)
        if drop is not None:
            c = c * drop
        a, b = self.conv_out(c).chunk(2, dim=1)
        return x + a * torch.sigmoid(b)


@dataclass(frozen=True)
class Topology:
    n_filters: int = 32
    n_blocks: int = 4
    kernel: int = 3
    n_mix: int = 5

    def __post_init__(self):
        if self.kernel < 2 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be an odd integer >= 3")
        if not 1 <= self.n_mix <= 10:
            raise ValidationError("number of mixture components must be in 1..10")
        if self.n_filters < 1 or self.n_blocks < 0:
            raise ValidationError("n_filters must be >= 1 and n_blocks >= 0")


class PriorNet(nn.Module):
    """Causal network mapping a complex image to per-pixel mixture parameters.

    Input is ``(B, 2, H, W)`` (real, imaginary); the output has shape
    ``(B, H, W, 6K)`` and unpacks with :meth:`MixtureParams.from_array`.
    """

    def __init__(self, topology: Topology | None = None, seed: int = 0,
                 disc: Discretization | None = None):
        super().__init__()
        self.topology = topology or Topology()
        self.disc = disc or Discretization()
        self.seed = int(seed)
        t = self.topology
        f, k = t.n_filters, t.kernel
        half = k // 2
        # input gets a constant ones channel so zero padding is distinguishable
        self.u_init = DownShiftedConv(3, f, (half + 1, k))
        self.ul_init_v = DownShiftedConv(3, f, (1, k))
        self.ul_init_h = DownRightShiftedConv(3, f, (half + 1, 1))
        self.u_blocks = nn.ModuleList(
            GatedResnet(f, DownShiftedConv, (half + 1, k)) for _ in range(t.n_blocks))
        self.ul_blocks = nn.ModuleList(
            GatedResnet(f, DownRightShiftedConv, (half + 1, half + 1), with_aux=True)
            for _ in range(t.n_blocks))
        self.head = nn.Conv2d(f, 6 * t.n_mix, 1)
        self._init_weights(make_rng(self.seed))

    @property
    def n_mix(self) -> int:
        return self.topology.n_mix

    def _init_weights(self, rng):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape), 0.05)))

    def dropout_shapes(self, batch: int, h: int, w: int) -> list[tuple[int, ...]]:
        n = 2 * self.topology.n_blocks
        return [(batch, self.topology.n_filters, h, w)] * n

    def forward(self, x: torch.Tensor, drop_masks=None) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 2:
            raise ShapeError(f"expected input of shape (B, 2, H, W), got {tuple(x.shape)}")
        ones = torch.ones_like(x[:, :1])
        xin = torch.cat([x, ones], dim=1)
        u = down_shift(self.u_init(xin))
        ul = down_shift(self.ul_init_v(xin)) + right_shift(self.ul_init_h(xin))
        masks = iter(drop_masks) if drop_masks is not None else None
        for ub, ulb in zip(self.u_blocks, self.ul_blocks):
            u = ub(u, drop=next(masks) if masks else None)
            ul = ulb(ul, aux=u, drop=next(masks) if masks else None)
        out = self.head(F.elu(ul))
        return out.permute(0, 2, 3, 1)


def _to_tensor(x) -> torch.Tensor:
    """Complex ``(H, W)`` or ``(B, H, W)`` array to a ``(B, 2, H, W)`` tensor."""
    x = as_complex(x, "image")
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected a 2-D image or a batch of them, got shape {x.shape}")
    return torch.from_numpy(np.stack([x.real, x.imag], axis=1).copy())


class _MixtureLogLik(torch.autograd.Function):
    """Sum of pixel log-probabilities with the hand-derived gradients."""

    @staticmethod
    def forward(ctx, x, out, n_mix, disc):
        xn = x.detach().numpy()
        params = MixtureParams.from_array(out.detach().numpy(), n_mix)
        terms = pixel_terms(xn[:, 0], xn[:, 1], params, disc, need_grad=True)
        ctx.grad_x = np.stack([terms.grad_re, terms.grad_im], axis=1)
        ctx.grad_out = terms.grad_params.to_array()
        return torch.tensor(terms.total)

    @staticmethod
    def backward(ctx, g):
        return (g * torch.from_numpy(ctx.grad_x), g * torch.from_numpy(ctx.grad_out),
                None, None)


def mixture_loglik(net: PriorNet, x: torch.Tensor, out: torch.Tensor) -> torch.Tensor:
    return _MixtureLogLik.apply(x, out, net.n_mix, net.disc)


def forward(net: PriorNet, x) -> MixtureParams:
    """Mixture parameters for a complex image (grid axes ``(H, W)``)."""
    xt = _to_tensor(x)
    with torch.no_grad():
        out = net(xt)
    params = MixtureParams.from_array(out.numpy(), net.n_mix)
    return params[0] if np.ndim(x) == 2 else params


def log_prior(net: PriorNet, x, disc: Discretization | None = None,
              snap: bool = False) -> float:
    """log g(x); the network sees the same (optionally snapped) image it scores."""
    disc = disc or net.disc
    x = as_complex(x, "image")
    if snap:
        x = disc.snap_complex(x)
    params = forward(net, x)
    re, im = x.real, x.imag
    return pixel_terms(re, im, params, disc).total


def nll_bits_per_dim(net: PriorNet, x, disc: Discretization | None = None,
                     snap: bool = True) -> float:
    x = as_complex(x, "image")
    return -log_prior(net, x, disc, snap=snap) / (2 * x.size * LN2)


def backward(net: PriorNet, x, disc: Discretization | None = None):
    """Gradients of log g(x) with respect to every weight and to the image.

    The image enters both through the bin formula and through the network's
    causal context; both paths are included. Returns ``(grad_weights,
    grad_input)`` where ``grad_weights`` maps parameter names to arrays and
    ``grad_input`` is complex (d/dRe + i d/dIm).
    """
    if disc is not None and disc != net.disc:
        net = _with_disc(net, disc)
    xt = _to_tensor(x).requires_grad_(True)
    net.zero_grad(set_to_none=True)
    ll = mixture_loglik(net, xt, net(xt))
    ll.backward()
    grad_weights = {n: p.grad.detach().numpy().copy() for n, p in net.named_parameters()}
    gx = xt.grad.numpy()
    grad_input = gx[:, 0] + 1j * gx[:, 1]
    net.zero_grad(set_to_none=True)
    return grad_weights, (grad_input[0] if np.ndim(x) == 2 else grad_input)


def input_grad(net: PriorNet, x) -> np.ndarray:
    """Gradient of log g with respect to a batch ``(B, H, W)`` of images only."""
    xt = _to_tensor(x).requires_grad_(True)
    ll = mixture_loglik(net, xt, net(xt))
    (gx,) = torch.autograd.grad(ll, xt)
    gx = gx.numpy()
    return gx[:, 0] + 1j * gx[:, 1]


def _with_disc(net: PriorNet, disc: Discretization) -> PriorNet:
    clone = PriorNet(net.topology, net.seed, disc)
    clone.load_state_dict(net.state_dict())
    return clone


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def prior_grad(net: PriorNet, x, disc: Discretization | None = None,
               dropout_rate: float = 0.5, rng: np.random.Generator | None = None):
    """Input gradient of log g with inverted-dropout applied to the gradient itself.

    Accepts one image or a batch ``(B, H, W)``; each complex entry is kept
    with probability ``1 - dropout_rate`` and rescaled by its inverse.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    single = np.ndim(x) == 2
    if disc is not None and disc != net.disc:
        net = _with_disc(net, disc)
    g = input_grad(net, x)
    if dropout_rate > 0.0:
        rng = rng if rng is not None else make_rng(0)
        g = g * dropout_mask(g.shape, dropout_rate, rng)
    return g[0] if single else g


def sample_images(net: PriorNet, n: int, shape: tuple[int, int],
                  disc: Discretization | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Raster-order ancestral sampling of ``n`` images, one batched forward pass per pixel."""
    from .mixture import sample_pixel

    disc = disc or net.disc
    rng = rng if rng is not None else make_rng(0)
    h, w = shape
    imgs = np.zeros((n, h, w), dtype=np.complex128)
    for i in range(h):
        for j in range(w):
            # rows below i cannot influence row i, so they are left out of the pass
            params = forward(net, imgs[:, :i + 1])
            for b in range(n):
                re, im = sample_pixel(params[b, i, j], disc, rng)
                imgs[b, i, j] = re + 1j * im
    return imgs


def sample_image(net: PriorNet, shape: tuple[int, int], disc: Discretization | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    return sample_images(net, 1, shape, disc, rng)[0]


# -- persistence --------------------------------------------------------------


def save(net: PriorNet, path) -> None:
    """Write ``BPRIOR1`` + text header + blank line + little-endian float64 weights.

    Weights follow ``net.state_dict()`` order, each tensor flattened in C order;
    the ``tensor`` header lines list that order with shapes.
    """
    t = net.topology
    lines = [f"{k}={v}" for k, v in asdict(t).items()]
    lines += [f"disc_d={net.disc.d!r}", f"disc_lo={net.disc.lo!r}",
              f"disc_hi={net.disc.hi!r}", f"seed={net.seed}"]
    state = net.state_dict()
    lines += [f"tensor={name}:{'x'.join(map(str, v.shape)) or '1'}"
              for name, v in state.items()]
    payload = np.concatenate([v.numpy().ravel() for v in state.values()])
    buf = io.BytesIO()
    buf.write(MAGIC + b"\n")
    buf.write(("\n".join(lines) + "\n\n").encode("ascii"))
    buf.write(payload.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load(path, expect_n_mix: int | None = None) -> PriorNet:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read prior weights: {exc}") from exc
    if not raw.startswith(MAGIC + b"\n"):
        raise FormatError(f"{path}: not a prior weight file (bad magic)")
    end = raw.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise FormatError(f"{path}: header not terminated")
    body = raw[end + 2:]
    fields: dict[str, str] = {}
    tensors = []
    try:
        for line in raw[len(MAGIC) + 1:end].decode("ascii").splitlines():
            key, _, value = line.partition("=")
            if key == "tensor":
                name, _, shape = value.partition(":")
                tensors.append((name, tuple(int(s) for s in shape.split("x"))))
            else:
                fields[key] = value
        topo = Topology(int(fields["n_filters"]), int(fields["n_blocks"]),
                        int(fields["kernel"]), int(fields["n_mix"]))
        disc = Discretization(float(fields["disc_d"]), float(fields["disc_lo"]),
                              float(fields["disc_hi"]))
        seed = int(fields["seed"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if expect_n_mix is not None and topo.n_mix != expect_n_mix:
        raise FormatError(f"{path}: K mismatch (file has {topo.n_mix}, "
                          f"expected {expect_n_mix})")
    net = PriorNet(topo, seed, disc)
    state = net.state_dict()
    expected = [(n, tuple(v.shape) or (1,)) for n, v in state.items()]
    if tensors != expected:
        raise FormatError(f"{path}: tensor layout does not match the declared topology")
    n_vals = sum(int(np.prod(s)) for _, s in expected)
    if len(body) != 8 * n_vals:
        raise FormatError(f"{path}: expected {8 * n_vals} payload bytes, got {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{path}: non-finite weights")
    offset = 0
    new_state = {}
    for name, v in state.items():
        n = v.numel()
        new_state[name] = torch.from_numpy(flat[offset:offset + n].reshape(v.shape).copy())
        offset += n
    net.load_state_dict(new_state)
    return net
