"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian tensor bytes. The header lists every tensor as
(name, shape, dtype, offset, nbytes) with offsets relative to the data start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import AdapterSet, ModelConfig, Policy

MAGIC = b"EVSCKPT\x00"
VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, policy: Policy, optimizer=None, meta: dict | None = None,
                    rng_state: dict | None = None) -> None:
    tensors: dict[str, torch.Tensor] = {f"params/{k}": v for k, v in policy.params.items()}
    adapters = policy.adapters
    if not adapters.is_empty():
        for k, v in adapters.tensors().items():
            tensors[f"adapters/{k}"] = v
    if optimizer is not None:
        for k, v in optimizer.m.items():
            tensors[f"optim/m/{k}"] = v
        for k, v in optimizer.v.items():
            tensors[f"optim/v/{k}"] = v
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = tensors[name].detach().cpu().numpy()
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "model_config": policy.cfg.to_dict(),
        "adapter": None if adapters.is_empty() else {"rank": adapters.rank, "alpha": adapters.alpha,
                                                    "enabled": adapters.enabled},
        "optimizer": None if optimizer is None else {"t": optimizer.t, "lr": optimizer.lr,
                                                    "betas": list(optimizer.betas), "eps": optimizer.eps},
        "rng_state": rng_state,
        "meta": meta or {},
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=e["nbytes"] // dtype.itemsize, offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))).clone()
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[Policy, dict]:
    """Policy (with adapters if stored) and the header; optimizer tensors stay in ``header['optim_state']``."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig(**header["model_config"])
    params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
    adapters = None
    if header.get("adapter"):
        a = header["adapter"]
        factors = {}
        for k, v in tensors.items():
            if k.startswith("adapters/") and k.endswith(".down"):
                name = k[len("adapters/"):-len(".down")]
                factors[name] = (v, tensors[f"adapters/{name}.up"])
        adapters = AdapterSet(factors, a["rank"], a["alpha"], a["enabled"])
    m = {k[len("optim/m/"):]: v for k, v in tensors.items() if k.startswith("optim/m/")}
    v = {k[len("optim/v/"):]: t for k, t in tensors.items() if k.startswith("optim/v/")}
    header["optim_state"] = {"m": m, "v": v}
    return Policy(cfg, params, adapters), header
