"""Portable binary export of a generated cascade.

All integers and floats are little-endian. Layout::

    magic      8 bytes  b"MSBOCASC"
    version    u32      (1)
    master     i64      master seed
    name_len   u32, then name (utf-8)
    mode       u8       0 = standard surrogate layout, 1 = residual
    n_stages   u32
    per stage:
        x_dim, h_dim, n_obs            u32 x 3
        observed indices (0-based)     u32 x n_obs
        process_noise_std              f64
        measurement_noise_std          f64
        stage_seed                     u64
        seed_size                      u32
        output_scaling                 u8   0 = none, 1 = sigmoid
        n_layers                       u32
        layer dims                     u32 x (n_layers + 1)
        per layer: weights (in x out, row-major) f64, then biases (out) f64
    has_optimum u8; if 1: y_opt f64, then x_opt f64 x sum(x_dim)

Stage ``i`` input is ``[x_i, h_{i-1}]``; hidden layers use LeakyReLU with
slope 0.01.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile

import numpy as np

from .generator import CascadeConfig, SyntheticCascade
from .mlp import MlpFunction

MAGIC = b"MSBOCASC"
VERSION = 1
_SCALING = {"none": 0, "sigmoid": 1}
_SCALING_INV = {v: k for k, v in _SCALING.items()}


def _u32(buf, *vals):
    buf.write(struct.pack(f"<{len(vals)}I", *vals))


def _f64_array(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dumps(cascade: SyntheticCascade) -> bytes:
    cfg = cascade.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    buf.write(struct.pack("<q", cascade.master_seed))
    name = cfg.name.encode("utf-8")
    _u32(buf, len(name))
    buf.write(name)
    buf.write(struct.pack("<B", 1 if cfg.surrogate_mode == "residual" else 0))
    _u32(buf, cascade.n_stages)
    for i, f in enumerate(cascade.stages):
        obs = cfg.observed[i]
        _u32(buf, cfg.x_dims[i], cfg.h_dims[i], len(obs))
        _u32(buf, *obs)
        buf.write(struct.pack("<dd", cfg.process_noise_std[i], cfg.measurement_noise_std[i]))
        buf.write(struct.pack("<Q", f.seed))
        _u32(buf, f.seed_size)
        buf.write(struct.pack("<B", _SCALING[f.output_scaling]))
        _u32(buf, len(f.weights))
        _u32(buf, *f.layer_dims)
        for w, b in zip(f.weights, f.biases):
            _f64_array(buf, w)
            _f64_array(buf, b)
    if cascade.y_opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<Bd", 1, cascade.y_opt))
        _f64_array(buf, cascade.x_opt)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError("truncated weight file")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def floats(self, count, shape=None):
        size = 8 * count
        if self.pos + size > len(self.data):
            raise ValueError("truncated weight file")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(float)
        self.pos += size
        return arr.reshape(shape) if shape is not None else arr


def loads(data: bytes) -> SyntheticCascade:
    if data[:8] != MAGIC:
        raise ValueError("not a cascade weight file (bad magic)")
    r = _Reader(data)
    r.pos = 8
    (version,) = r.take("<I")
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    (master,) = r.take("<q")
    (name_len,) = r.take("<I")
    name = data[r.pos:r.pos + name_len].decode("utf-8")
    r.pos += name_len
    (mode,) = r.take("<B")
    (n_stages,) = r.take("<I")
    x_dims, h_dims, observed, sp, sm, seeds, stages = [], [], [], [], [], [], []
    for _ in range(n_stages):
        x_dim, h_dim, n_obs = r.take("<3I")
        obs = r.take(f"<{n_obs}I")
        p_std, m_std = r.take("<dd")
        (seed,) = r.take("<Q")
        (seed_size,) = r.take("<I")
        (scaling,) = r.take("<B")
        (n_layers,) = r.take("<I")
        dims = r.take(f"<{n_layers + 1}I")
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(r.floats(a * b, (a, b)))
            biases.append(r.floats(b))
        stages.append(MlpFunction(tuple(dims), weights, biases, _SCALING_INV[scaling], seed, seed_size))
        x_dims.append(x_dim)
        h_dims.append(h_dim)
        observed.append(tuple(obs))
        sp.append(p_std)
        sm.append(m_std)
        seeds.append(seed_size)
    cfg = CascadeConfig(name, tuple(x_dims), tuple(h_dims), tuple(seeds), tuple(observed), tuple(sp), tuple(sm),
                        "residual" if mode else "standard")
    cascade = SyntheticCascade(cfg, stages, master)
    (has_opt,) = r.take("<B")
    if has_opt:
        (cascade.y_opt,) = r.take("<d")
        cascade.x_opt = r.floats(sum(x_dims))
    if r.pos != len(data):
        raise ValueError("trailing bytes in weight file")
    return cascade


def export_weights(cascade: SyntheticCascade, path) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(cascade))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def import_weights(path) -> SyntheticCascade:
    with open(path, "rb") as fh:
        return loads(fh.read())
