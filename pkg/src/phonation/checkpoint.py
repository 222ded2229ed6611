"""Versioned checkpoint container for trained networks.

Layout::

    b"PHCKPT\\n"                       magic
    <u4 header length> <JSON header>  format version, network config, dtype,
                                      epoch, rng state, optimizer step,
                                      tensor index (name, shape, offset)
    payload                           little-endian float64 tensor data

Parameters are widened to float64 on disk and narrowed back to the
recorded dtype on load, which is lossless for float32 training runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .model import NetworkConfig, PhonationNet, build_network

FORMAT_VERSION = 1
MAGIC = b"PHCKPT\n"


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class CheckpointRecord:
    network: PhonationNet
    optimizer: AdamState | None = None
    epoch: int | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, record: CheckpointRecord) -> None:
    net = record.network
    tensors: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in net.params.items()]
    opt = record.optimizer
    if opt is not None:
        tensors += [(f"adam.m.{k}", m) for k, m in zip(net.params, opt.first_moment)]
        tensors += [(f"adam.v.{k}", v) for k, v in zip(net.params, opt.second_moment)]

    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "network_config": net.config.to_dict(),
        "dtype": str(net.dtype),
        "epoch": record.epoch,
        "rng_state": record.rng_state,
        "optimizer": None if opt is None else {
            "step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay,
        },
        "extra": record.extra,
        "tensors": index,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> CheckpointRecord:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise CorruptCheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    pos += hlen

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = raw[pos:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header declares {header['payload_bytes']}"
        )

    dtype = np.dtype(header["dtype"])
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        chunk = payload[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(dtype)

    config = NetworkConfig.from_dict(header["network_config"])
    template = build_network(config, dtype=dtype)
    params = {}
    for name, p in template.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arrays[name].shape}, config implies {p.shape}"
            )
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    net = PhonationNet(config, params)

    opt = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        opt = AdamState([arrays[f"adam.m.{k}"] for k in params], [arrays[f"adam.v.{k}"] for k in params],
                        step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                        weight_decay=o["weight_decay"])
    return CheckpointRecord(net, opt, header.get("epoch"), header.get("rng_state"), header.get("extra") or {})
