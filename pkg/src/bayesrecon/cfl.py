"""``.hdr``/``.cfl`` array container and PGM previews.

The header is two text lines, ``# Dimensions`` then the space-separated
extents. The payload is little-endian float32 (real, imag) pairs in
column-major order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _base(name) -> Path:
    p = Path(name)
    return p.with_suffix("") if p.suffix in (".cfl", ".hdr") else p


def write_cfl(name, array) -> None:
    base = _base(name)
    arr = np.asarray(array, dtype=np.complex128)
    dims = arr.shape or (1,)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".hdr"), "w") as fh:
        fh.write("# Dimensions\n")
        fh.write(" ".join(str(d) for d in dims) + "\n")
    arr.astype("<c8").ravel(order="F").tofile(base.with_suffix(".cfl"))


def read_cfl(name) -> np.ndarray:
    base = _base(name)
    try:
        lines = base.with_suffix(".hdr").read_text().splitlines()
        payload = base.with_suffix(".cfl").read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {base}: {exc}") from exc
    if len(lines) < 2 or lines[0].strip() != "# Dimensions":
        raise FormatError(f"{base}.hdr: missing '# Dimensions' line")
    try:
        dims = tuple(int(t) for t in lines[1].split())
    except ValueError as exc:
        raise FormatError(f"{base}.hdr: bad extents {lines[1]!r}") from exc
    if not dims or any(d < 1 for d in dims):
        raise FormatError(f"{base}.hdr: extents must be positive")
    n = int(np.prod(dims))
    if len(payload) != 8 * n:
        raise FormatError(f"{base}.cfl: header implies {n} values but payload holds "
                          f"{len(payload) / 8:g}")
    data = np.frombuffer(payload, dtype="<c8").astype(np.complex128)
    return data.reshape(dims, order="F")


def _write_pgm(path, img8: np.ndarray) -> None:
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img8.astype(np.uint8).tobytes())


def export_magnitude_pgm(path, image) -> None:
    mag = np.abs(np.asarray(image))
    span = mag.max() - mag.min()
    scaled = (mag - mag.min()) / span if span > 0 else np.zeros_like(mag)
    _write_pgm(path, np.round(255 * scaled))


def export_phase_pgm(path, image) -> None:
    phase = np.angle(np.asarray(image))
    _write_pgm(path, np.round(255 * (phase + np.pi) / (2 * np.pi)))
