"""CKPT1 checkpoint files.

Layout (little-endian)::

    b"CKPT" u8 version=1
    u32 n_tensors, then per tensor:
        u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], float32 payload
    u32 json_len, json (utf-8): {"meta", "optimizer", "rng"}

Tensors named ``param/<name>`` are model parameters, ``opt.m/<name>`` and
``opt.v/<name>`` Adam moments, ``aux/<name>`` fixed arrays such as feature
normalisation statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import OptimizerState
from .errors import FormatError, UnsupportedError

MAGIC = b"CKPT"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    aux: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    tensors.update({f"aux/{k}": v for k, v in ckpt.aux.items()})
    opt = None
    if ckpt.optimizer is not None:
        st = ckpt.optimizer
        tensors.update({f"opt.m/{k}": v for k, v in st.m.items()})
        tensors.update({f"opt.v/{k}": v for k, v in st.v.items()})
        opt = {**st.hyperparameters(), "step": st.step, "history": st.history}
    body = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(tensors))]
    body += [_pack_tensor(name, np.asarray(arr)) for name, arr in tensors.items()]
    doc = json.dumps({"meta": ckpt.meta, "optimizer": opt, "rng": ckpt.rng_state}).encode("utf-8")
    body += [struct.pack("<I", len(doc)), doc]
    Path(path).write_bytes(b"".join(body))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError("not a CKPT1 file", path=str(path))
    if data[4] != VERSION:
        raise UnsupportedError(f"unsupported checkpoint version {data[4]}", path=str(path))
    pos = 5
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            pos += 4 * n
        (jlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        doc = json.loads(data[pos:pos + jlen].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}", path=str(path)) from exc

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    opt = None
    if doc.get("optimizer"):
        o = doc["optimizer"]
        opt = OptimizerState(kind=o["kind"], step_size=o["step_size"], clip_norm=o["clip_norm"],
                             beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                             m=group("opt.m/"), v=group("opt.v/"), history=o.get("history", []))
    return Checkpoint(group("param/"), group("aux/"), doc.get("meta") or {}, opt, doc.get("rng"))
