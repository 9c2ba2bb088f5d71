"""Binary checkpoint files for trained models.

Layout (little-endian): magic 'VFCK', u32 format version, length-prefixed
kind tag, length-prefixed JSON config block, named parameter tensors
(weights plus batch-norm running stats), optional Adam optimizer state,
u64 RNG seed and u32 epoch counter. Writing the same state twice produces
byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IoError, MissingCheckpoint
from .nets import Classifier, ClassifierConfig, Simulator, SimulatorConfig

_MAGIC = b"VFCK"
_VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_str(fh):
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def _write_array(fh, name, arr):
    _write_str(fh, name)
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[np.dtype(arr.dtype)]
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(_DTYPES[code]).tobytes())


def _read_array(fh):
    name = _read_str(fh)
    code, rank = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    dt = np.dtype(_DTYPES[code])
    arr = np.frombuffer(fh.read(dt.itemsize * n), dtype=dt).reshape(shape).copy()
    return name, arr


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict
    opt_state: "object | None"
    seed: int
    epoch: int

    @property
    def placeholder_type(self):
        return self.config.get("placeholder_type")


def save_checkpoint(path, model, opt_state=None, seed=0, epoch=0):
    """Serialize a model (and optionally its Adam state) to ``path``."""
    cfg = dataclasses.asdict(model.config)
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _write_str(fh, model.kind)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        arrays = model.state_arrays()
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            _write_array(fh, name, arr)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state.step))
            fh.write(struct.pack("<4d", opt_state.lr, opt_state.beta1,
                                 opt_state.beta2, opt_state.eps))
            fh.write(struct.pack("<I", len(opt_state.m)))
            for i, (m, v) in enumerate(zip(opt_state.m, opt_state.v)):
                _write_array(fh, f"m{i}", m)
                _write_array(fh, f"v{i}", v)
        fh.write(struct.pack("<Q", seed))
        fh.write(struct.pack("<I", epoch))


def load_checkpoint(path) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise MissingCheckpoint(str(exc)) from exc
    with fh:
        if fh.read(4) != _MAGIC:
            raise IoError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise IoError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(fh)
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blob_len).decode("utf-8"))
        (n,) = struct.unpack("<I", fh.read(4))
        arrays = dict(_read_array(fh) for _ in range(n))
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if has_opt:
            from .train import AdamState

            (step,) = struct.unpack("<Q", fh.read(8))
            lr, b1, b2, eps = struct.unpack("<4d", fh.read(32))
            (count,) = struct.unpack("<I", fh.read(4))
            m, v = [], []
            for _ in range(count):
                m.append(_read_array(fh)[1])
                v.append(_read_array(fh)[1])
            opt_state = AdamState(m=m, v=v, step=step, lr=lr, beta1=b1, beta2=b2, eps=eps)
        (seed,) = struct.unpack("<Q", fh.read(8))
        (epoch,) = struct.unpack("<I", fh.read(4))
    return Checkpoint(kind, config, arrays, opt_state, seed, epoch)


def build_model(ckpt: Checkpoint, dtype=np.float64):
    """Reconstruct a model instance from a loaded checkpoint."""
    if ckpt.kind == "classifier":
        cfg = ClassifierConfig(**ckpt.config)
        model = Classifier(cfg, dtype=dtype)
    elif ckpt.kind == "simulator":
        cfg = SimulatorConfig(**ckpt.config)
        model = Simulator(cfg, dtype=dtype)
    else:
        raise IoError(f"unknown checkpoint kind {ckpt.kind!r}")
    model.load_state(ckpt.arrays)
    return model
