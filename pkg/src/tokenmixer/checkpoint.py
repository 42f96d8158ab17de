"""Binary checkpoint: magic "MMOT1", embedded config, named tensor tables.

All multi-byte values are little-endian; tensor payloads are raw 32-bit
floats. A checkpoint restores training bit-identically in the fixed-thread
configuration: parameters, Adam moments, scheduler EMAs, history, seed, step.
Truncated or wrong-magic files are rejected before any state is touched.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .config import parse_config, serialize_config
from .model import Model
from .training import SubsetScheduler, TrainState

MAGIC = b"MMOT1"


def _w_bytes(fh, b):
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _w_str(fh, s):
    _w_bytes(fh, s.encode("utf-8"))


def _w_tensor_table(fh, table):
    fh.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f4")
        _w_str(fh, name)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes())


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def _r_bytes(fh):
    (n,) = struct.unpack("<I", _read(fh, 4))
    return _read(fh, n)


def _r_str(fh):
    return _r_bytes(fh).decode("utf-8")


def _r_tensor_table(fh):
    (count,) = struct.unpack("<I", _read(fh, 4))
    table = {}
    for _ in range(count):
        name = _r_str(fh)
        (ndim,) = struct.unpack("<B", _read(fh, 1))
        shape = tuple(struct.unpack("<I", _read(fh, 4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read(fh, 4 * n), dtype="<f4").reshape(shape)
        table[name] = data.copy()
    return table


def save_checkpoint(path, state, run_config):
    buf = io.BytesIO()
    buf.write(MAGIC)
    _w_str(buf, serialize_config(run_config))
    buf.write(struct.pack("<Q", state.step))
    buf.write(struct.pack("<q", state.seed))
    sched = state.scheduler
    _w_str(buf, sched.mode)
    buf.write(struct.pack("<ddd", sched.min_prob, sched.decay, sched.init_nll))
    buf.write(struct.pack("<I", sched.n))
    buf.write(np.ascontiguousarray(sched.loss_ema, dtype="<f8").tobytes())
    _w_tensor_table(buf, {p.name: p.value.data for p in state.model.parameters()})
    _w_tensor_table(buf, state.adam_m)
    _w_tensor_table(buf, state.adam_v)
    buf.write(struct.pack("<I", len(state.history)))
    for step, idx, loss in state.history:
        buf.write(struct.pack("<IBd", step, idx, loss))
    _w_str(buf, "pcg64")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (TrainState, RunConfig). Never partially loads: any format
    error raises before state construction completes."""
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise ValueError("not a checkpoint: bad magic")
        cfg = parse_config(_r_str(fh))
        (step,) = struct.unpack("<Q", _read(fh, 8))
        (seed,) = struct.unpack("<q", _read(fh, 8))
        mode = _r_str(fh)
        min_prob, decay, init_nll = struct.unpack("<ddd", _read(fh, 24))
        (n_subsets,) = struct.unpack("<I", _read(fh, 4))
        loss_ema = np.frombuffer(_read(fh, 8 * n_subsets), dtype="<f8").copy()
        params = _r_tensor_table(fh)
        adam_m = _r_tensor_table(fh)
        adam_v = _r_tensor_table(fh)
        (hist_n,) = struct.unpack("<I", _read(fh, 4))
        history = []
        for _ in range(hist_n):
            s, idx, loss = struct.unpack("<IBd", _read(fh, 13))
            history.append((s, idx, float(loss)))
        algorithm = _r_str(fh)
        trailing = fh.read(1)
    if trailing:
        raise ValueError("trailing bytes after checkpoint payload")
    if algorithm != "pcg64":
        raise ValueError(f"unknown rng algorithm {algorithm!r}")

    model = Model(cfg.model, seed=cfg.seed)
    names = {p.name for p in model.parameters()}
    if names != set(params):
        missing = sorted(names - set(params))[:3]
        extra = sorted(set(params) - names)[:3]
        raise ValueError(f"tensor table mismatch (missing {missing}, unexpected {extra})")
    for p in model.parameters():
        if params[p.name].shape != p.value.data.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.value.data = params[p.name]

    scheduler = SubsetScheduler(
        image_vocab=cfg.model.image_vocab,
        mode=mode,
        min_prob=min_prob,
        decay=decay,
    )
    if scheduler.n != n_subsets:
        raise ValueError("scheduler size mismatch")
    scheduler.init_nll = init_nll
    scheduler.loss_ema = loss_ema
    state = TrainState(model, cfg.optimizer, scheduler, seed=seed)
    state.step = step
    for name in adam_m:
        if name not in names:
            raise ValueError(f"moment tensor {name} has no parameter")
    state.adam_m = adam_m
    state.adam_v = adam_v
    state.history = history
    return state, cfg
