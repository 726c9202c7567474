"""Flat binary checkpoints.

Layout, all little-endian::

    b"ODM1"
    int64 x 6   num_layers, num_experts, top_k, hidden_dim, vocab_size, seed (as uint64)
    int64       precision bits (0 = full precision)
    float64 ... every matrix in ToyMoEModel.iter_matrices() order, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .moe_core import ModelConfig, ToyMoEModel, assemble_model, matrix_shapes

MAGIC = b"ODM1"
_HEADER = struct.Struct("<4s5qQq")


def save_model(model: ToyMoEModel, path) -> None:
    cfg = model.config
    header = _HEADER.pack(
        MAGIC, cfg.num_layers, cfg.num_experts, cfg.top_k, cfg.hidden_dim, cfg.vocab_size, cfg.seed, model.bits or 0
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for _, m in model.iter_matrices():
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_model(path) -> ToyMoEModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise InputError(f"{path}: not an ODM1 checkpoint")
    _, L, E, k, d, V, seed, bits = _HEADER.unpack_from(data)
    config = ModelConfig(L, E, k, d, V, seed)
    offset = _HEADER.size
    matrices = []
    for shape in matrix_shapes(config):
        n = shape[0] * shape[1]
        if offset + 8 * n > len(data):
            raise InputError(f"{path}: truncated checkpoint")
        matrices.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += 8 * n
    if offset != len(data):
        raise InputError(f"{path}: {len(data) - offset} trailing bytes")
    return assemble_model(config, matrices, bits or None)
