"""Binary checkpoint for a trained SNGP head.

Layout, all little-endian::

    b"SNGP"  u16 version
    u32 n_dims, u32 layer_dims[n_dims]
    u32 rff_dim, u32 n_classes, u8 residual, u32 power_iters
    f64 tau, f64 c, f64 lengthscale
    per hidden layer: f64 W (out x in, row-major), f64 b (out)
    f64 rff W (rff_dim x penultimate), f64 rff b (rff_dim)
    f64 beta (rff_dim x n_classes)
    f64 precision (rff_dim x rff_dim)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from truecam.sngp_head.sngp import GpPosterior, RffProjection, SngpHead, SnMlp, SnMlpConfig

MAGIC = b"SNGP"
VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def dumps_head(head: SngpHead) -> bytes:
    if not head.trained:
        raise ValueError("cannot checkpoint an untrained head")
    cfg = head.mlp.cfg
    post = head.posterior
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<I", len(cfg.layer_dims)),
        struct.pack(f"<{len(cfg.layer_dims)}I", *cfg.layer_dims),
        struct.pack("<IIBI", head.rff.dim, post.n_classes, int(cfg.residual), cfg.power_iters),
        struct.pack("<ddd", post.tau, cfg.c, head.rff.lengthscale),
    ]
    arrays = []
    for W, b in zip(head.mlp.weights, head.mlp.biases):
        arrays += [W, b]
    arrays += [head.rff.W, head.rff.b, post.beta, post.precision]
    parts += [np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays]
    return b"".join(parts)


def loads_head(data: bytes) -> SngpHead:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def array(*shape: int) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(take(8 * n), dtype=_F64).astype(np.float64).reshape(shape)

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not an SNGP checkpoint")
    (version,) = unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_dims,) = unpack("<I")
    dims = unpack(f"<{n_dims}I")
    d_l, k, residual, power_iters = unpack("<IIBI")
    tau, c, lengthscale = unpack("<ddd")
    cfg = SnMlpConfig(tuple(dims), c=c, power_iters=power_iters, residual=bool(residual))
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        ws.append(array(d_out, d_in))
        bs.append(array(d_out))
    rW = array(d_l, dims[-1])
    rb = array(d_l)
    rW.flags.writeable = False
    rb.flags.writeable = False
    beta = array(d_l, k)
    precision = array(d_l, d_l)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return SngpHead(SnMlp(cfg, ws, bs), RffProjection(rW, rb, lengthscale), GpPosterior(beta, precision, tau))


def save_head(head: SngpHead, path) -> None:
    Path(path).write_bytes(dumps_head(head))


def load_head(path) -> SngpHead:
    return loads_head(Path(path).read_bytes())
