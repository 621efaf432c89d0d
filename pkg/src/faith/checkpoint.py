"""Binary checkpoints: parameters, Adam moments and the run config.

Layout: b"FTH1", a little-endian uint64 header length, the UTF-8 JSON
header, then every tensor as raw little-endian float64 in header order.
"""

import json
import os
import struct

import numpy as np

from faith import tensor as T
from faith.trainer import Adam, ModelState, TrainConfig

MAGIC = b"FTH1"
VERSION = 1
_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    pass


def _tensors(state):
    opt = state.optimizer
    for name in sorted(state.params):
        yield f"param/{name}", state.params[name].data
    for name in sorted(opt.m):
        yield f"adam.m/{name}", opt.m[name]
        yield f"adam.v/{name}", opt.v[name]


def to_bytes(state):
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(state):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    opt = state.optimizer
    header = {
        "version": VERSION,
        "config": state.config.to_dict(),
        "num_features": state.num_features,
        "num_base_classes": state.num_base_classes,
        "meta": state.meta,
        "adam": {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(blobs)


def from_bytes(buf):
    if len(buf) < len(MAGIC) + _LEN.size or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (hlen,) = _LEN.unpack_from(buf, 4)
    start = 4 + _LEN.size
    if len(buf) < start + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
    body = memoryview(buf)[start + hlen:]
    need = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"])
    if len(body) != need:
        raise FormatError(f"checkpoint body is {len(body)} bytes, header describes {need}")

    arrays = {}
    for e in header["tensors"]:
        if e["dtype"] != "<f8":
            raise FormatError(f"unsupported dtype {e['dtype']} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.astype(np.float64).reshape(e["shape"])

    a = header["adam"]
    opt = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
    opt.t = a["t"]
    params = {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            params[name] = T.parameter(arr, name)
        elif kind == "adam.m":
            opt.m[name] = arr
        elif kind == "adam.v":
            opt.v[name] = arr
        else:
            raise FormatError(f"unknown tensor kind {kind!r}")
    for name in opt.m:
        if name not in params or opt.m[name].shape != params[name].shape:
            raise FormatError(f"moment {name} does not match any parameter")
    config = TrainConfig.from_dict(header["config"])
    return ModelState(config, params, opt, header["num_features"], header["num_base_classes"],
                      header["meta"])


def save_checkpoint(state, path):
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(state))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
