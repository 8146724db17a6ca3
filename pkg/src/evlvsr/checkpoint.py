"""Versioned checkpoint container.

Layout (little-endian)::

    b"EVSRCKPT" | u32 version | u64 header length | JSON header | tensor payload | sha256

The JSON header carries the config snapshot, its hash, the step counter and
an index of named arrays into the payload. The trailing digest covers every
preceding byte.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatchError, IntegrityError

MAGIC = b"EVSRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    step: int = 0
    optimizer_state: dict = None
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return hash_config(self.config)


def hash_config(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _flatten_optimizer(state):
    tensors, plain = {}, {"state": {}, "param_groups": state["param_groups"]}
    for idx, entry in state["state"].items():
        plain["state"][str(idx)] = {}
        for key, value in entry.items():
            if torch.is_tensor(value):
                tensors[f"optimizer.{idx}.{key}"] = value
            else:
                plain["state"][str(idx)][key] = value
    return tensors, plain


def _unflatten_optimizer(plain, tensors):
    state = {}
    for idx, entry in plain["state"].items():
        state[int(idx)] = dict(entry)
    for name, value in tensors.items():
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = value
    return {"state": state, "param_groups": plain["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` atomically (temp file then rename)."""
    tensors = {f"model.{k}": v for k, v in ckpt.model_state.items()}
    optim_plain = None
    if ckpt.optimizer_state is not None:
        opt_tensors, optim_plain = _flatten_optimizer(ckpt.optimizer_state)
        tensors.update(opt_tensors)

    index, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        buf = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)

    header = json.dumps({
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "optimizer": optim_plain,
        "tensors": index,
    }, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: dict = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises:
        IntegrityError: Truncated or corrupt file.
        ConfigMismatchError: ``expected_config`` hashes differently.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + _DIGEST:
        raise IntegrityError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    magic, version, header_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")

    start = _PREFIX.size
    header = json.loads(body[start:start + header_len])
    payload = memoryview(body)[start + header_len:]
    model_state, opt_tensors = {}, {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("model."):
            model_state[name[len("model."):]] = tensor
        else:
            opt_tensors[name] = tensor

    if header["config_hash"] != hash_config(header["config"]):
        raise IntegrityError(f"{path}: stored config hash is inconsistent")
    if expected_config is not None and hash_config(expected_config) != header["config_hash"]:
        diff = sorted(k for k in set(expected_config) | set(header["config"])
                      if expected_config.get(k) != header["config"].get(k))
        raise ConfigMismatchError(
            f"{path}: checkpoint config differs from the requested one in {diff}")

    optimizer_state = None
    if header["optimizer"] is not None:
        optimizer_state = _unflatten_optimizer(header["optimizer"], opt_tensors)
    return Checkpoint(model_state, header["config"], header["step"], optimizer_state,
                      header["meta"])
