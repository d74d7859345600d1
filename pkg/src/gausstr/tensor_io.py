"""Binary tensor files (GTSR) and PNM image previews."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

GTSR_MAGIC = b"GTSR"
GTSR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, array, dtype=1):
    """Write ``array`` as GTSR (dtype 0=f32, 1=f64)."""
    arr = np.asarray(array, dtype=_DTYPES[dtype])
    header = GTSR_MAGIC + struct.pack("<III", GTSR_VERSION, dtype, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_tensor(path):
    """Read a GTSR file; always returns float64."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(raw, source=str(path))


def decode_tensor(raw, source="<bytes>"):
    if len(raw) < 16 or raw[:4] != GTSR_MAGIC:
        raise DataError(f"{source}: not a GTSR file")
    version, dtype, ndim = struct.unpack_from("<III", raw, 4)
    if version != GTSR_VERSION:
        raise DataError(f"{source}: unsupported GTSR version {version}")
    if dtype not in _DTYPES:
        raise DataError(f"{source}: unknown dtype code {dtype}")
    off = 16 + 8 * ndim
    if len(raw) < off:
        raise DataError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 16)
    dt = _DTYPES[dtype]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(raw) - off != count * dt.itemsize:
        raise DataError(f"{source}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).astype(np.float64)


def _pnm_header(magic, width, height, maxval, comment):
    lines = [magic]
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines += [f"{width} {height}", str(maxval)]
    return ("\n".join(lines) + "\n").encode("ascii")


def save_depth_pgm(path, depth_m, comment=None):
    """16-bit PGM with millimetre quantization; invalid (<=0) pixels become 0."""
    d = np.asarray(depth_m, dtype=np.float64)
    mm = np.where(np.isfinite(d) & (d > 0), np.round(d * 1000.0), 0)
    mm = np.clip(mm, 0, 65535).astype(">u2")
    h, w = mm.shape
    Path(path).write_bytes(_pnm_header("P5", w, h, 65535, comment) + mm.tobytes())


def _read_pnm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    return tokens, raw[pos + 1:]


def load_depth_pgm(path):
    (magic, w, h, maxval), payload = _read_pnm(path)
    if magic != "P5" or int(maxval) != 65535:
        raise DataError(f"{path}: expected 16-bit P5 PGM")
    mm = np.frombuffer(payload, dtype=">u2").reshape(int(h), int(w))
    return mm.astype(np.float64) / 1000.0


def save_ppm(path, rgb, comment=None):
    """``rgb`` is HxWx3 in [0,1]."""
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(_pnm_header("P6", w, h, 255, comment) + img.tobytes())


def load_ppm(path):
    (magic, w, h, _), payload = _read_pnm(path)
    if magic != "P6":
        raise DataError(f"{path}: expected P6 PPM")
    return np.frombuffer(payload, dtype=np.uint8).reshape(int(h), int(w), 3)


def features_to_rgb(feat, basis=None):
    """Map HxWxC features to colors via their top-3 principal directions."""
    f = np.asarray(feat, dtype=np.float64)
    h, w, c = f.shape
    flat = f.reshape(-1, c)
    if not np.any(flat):
        return np.zeros((h, w, 3))
    if basis is None:
        centered = flat - flat.mean(0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        basis = vt[:3]
        flat = centered
    proj = flat @ basis.T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(0), proj.max(0)
    rgb = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    return rgb.reshape(h, w, 3)
