"""Binary checkpoint container.

Layout::

    b"DFEICKPT" | uint64 LE header length | UTF-8 JSON header | payload

The payload is the concatenation of little-endian float64 arrays described by
the header's tensor directory (name, kind, shape, offset in values).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, build_model
from .numcore.optim import Adam, AdamState

MAGIC = b"DFEICKPT"
FORMAT_VERSION = 1


def config_hash(model_config: dict, mode: str) -> str:
    blob = json.dumps({"model": model_config, "mode": mode}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(model, optimizer: Adam | None, path, *, global_step: int = 0, epoch: int = 0,
                    best_metric: float | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    groups = model.group_of()
    directory = []
    chunks = []
    offset = 0

    def put(name: str, kind: str, arr: np.ndarray, group: str | None = None):
        nonlocal offset
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        entry = {"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset}
        if group is not None:
            entry["group"] = group
        directory.append(entry)
        chunks.append(flat.tobytes())
        offset += flat.size

    for name, tensor in model.params.items():
        put(name, "param", tensor.data, groups[name])
    bank = None
    if model.bank is not None:
        put("bank.vectors", "bank", model.bank.vectors)
        bank = {
            "alpha": model.bank.alpha,
            "initialized": model.bank.initialized.tolist(),
            "steps": model.bank.steps.tolist(),
        }
    adam = None
    if optimizer is not None:
        adam = {"beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps, "t": {}}
        for name, st in optimizer.states.items():
            put(name, "adam_m", st.m)
            put(name, "adam_v", st.v)
            adam["t"][name] = st.t

    payload = b"".join(chunks)
    cfg = model.config.to_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": cfg,
        "mode": model.mode,
        "seed": model.seed,
        "config_hash": config_hash(cfg, model.mode),
        "tensors": directory,
        "bank": bank,
        "adam": adam,
        "rng_state": model.rng.bit_generator.state,
        "global_step": int(global_step),
        "epoch": int(epoch),
        "best_metric": best_metric,
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, raw[16 + n:]


def load_checkpoint(path):
    """Restore ``(model, optimizer, header)`` from ``path``."""
    header, payload = read_header(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("payload checksum mismatch; file is corrupt")
    cfg, mode = header["model_config"], header["mode"]
    if config_hash(cfg, mode) != header.get("config_hash"):
        raise CheckpointError("config hash mismatch; header was modified")
    try:
        model = build_model(ModelConfig(**cfg), header["seed"], mode)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None
    values = np.frombuffer(payload, dtype="<f8")
    params = model.params
    adam_m, adam_v = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + count > values.size:
            raise CheckpointError(f"tensor {entry['name']!r} runs past the payload")
        arr = values[start:start + count].reshape(shape).astype(np.float64)
        kind, name = entry["kind"], entry["name"]
        if kind == "param":
            if name not in params or params[name].shape != shape:
                raise CheckpointError(f"parameter {name!r} does not match the model structure")
            params[name].data[...] = arr
        elif kind == "bank":
            if model.bank is None or model.bank.vectors.shape != shape:
                raise CheckpointError("bank tensor does not match the model structure")
            model.bank.vectors[...] = arr
        elif kind == "adam_m":
            adam_m[name] = arr
        elif kind == "adam_v":
            adam_v[name] = arr
        else:
            raise CheckpointError(f"unknown tensor kind {kind!r}")
    if model.bank is not None and header.get("bank"):
        model.bank.initialized[...] = header["bank"]["initialized"]
        model.bank.steps[...] = header["bank"]["steps"]
    optimizer = None
    if header.get("adam") is not None:
        a = header["adam"]
        optimizer = Adam(a["beta1"], a["beta2"], a["eps"])
        for name, t in a["t"].items():
            optimizer.states[name] = AdamState(adam_m[name], adam_v[name], int(t), a["beta1"], a["beta2"], a["eps"])
    model.rng.bit_generator.state = header["rng_state"]
    return model, optimizer, header
