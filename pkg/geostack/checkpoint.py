"""SSTK checkpoint files.

Layout, all integers little-endian::

    b"SSTK" | u32 version | u64 manifest length | UTF-8 JSON manifest
    | float64 payload | u64 FNV-1a checksum of the payload

The payload holds every model parameter in manifest order followed by the
AdamW moments (``exp_avg`` then ``exp_avg_sq``) of every parameter that has
optimizer state.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import ChecksumError, FileError

logger = logging.getLogger(__name__)

MAGIC = b"SSTK"
VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1
_HEADER = struct.Struct("<4sIQ")
_TRAILER = struct.Struct("<Q")


def fnv1a64(data: bytes) -> int:
    value = FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * FNV_PRIME) & _MASK
    return value


def _pack(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float64).numpy().astype("<f8", copy=False).tobytes()


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, torch.Tensor]
    optimizer_state: dict[str, dict] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def config(self) -> dict | None:
        return self.manifest.get("config")

    @property
    def rng(self) -> dict | None:
        return self.manifest.get("rng")

    def restore(self, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None):
        """Copy parameters (and optimizer moments) into live objects; names and shapes must match."""
        params = dict(model.named_parameters())
        if set(params) != set(self.tensors):
            missing = sorted(set(params) ^ set(self.tensors))
            raise ChecksumError(f"checkpoint parameters do not match the model: {missing[:5]}")
        with torch.no_grad():
            for name, param in params.items():
                if tuple(param.shape) != tuple(self.tensors[name].shape):
                    raise ChecksumError(f"{name}: checkpoint shape {tuple(self.tensors[name].shape)} != {tuple(param.shape)}")
                param.copy_(self.tensors[name])
            for entry in self.manifest["parameters"]:
                params[entry["name"]].requires_grad_(entry["trainable"])
        if optimizer is not None:
            for name, state in self.optimizer_state.items():
                optimizer.state[params[name]] = {
                    "step": torch.tensor(float(state["step"]), dtype=torch.float32),
                    "exp_avg": state["exp_avg"].clone(),
                    "exp_avg_sq": state["exp_avg_sq"].clone(),
                }


def save_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None, *,
                    step: int = 0, config: dict | None = None, rng: dict | None = None):
    params = list(model.named_parameters())
    names = {id(param): name for name, param in params}
    moments = []
    if optimizer is not None:
        for group in optimizer.param_groups:
            for param in group["params"]:
                state = optimizer.state.get(param)
                if state:
                    moments.append((names[id(param)], state))

    manifest = {
        "format": "sstk",
        "step": step,
        "config": config,
        "rng": rng,
        "parameters": [
            {"name": name, "shape": list(param.shape), "trainable": param.requires_grad}
            for name, param in params
        ],
        "optimizer": [
            {"name": name, "step": int(state["step"]), "shape": list(state["exp_avg"].shape)}
            for name, state in moments
        ],
    }
    chunks = [_pack(param) for _, param in params]
    for _, state in moments:
        chunks.append(_pack(state["exp_avg"]))
        chunks.append(_pack(state["exp_avg_sq"]))
    payload = b"".join(chunks)
    checksum = fnv1a64(payload)
    manifest["payload_bytes"] = len(payload)
    manifest["checksum"] = f"{checksum:016x}"

    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with path.open("wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, len(body)))
            f.write(body)
            f.write(payload)
            f.write(_TRAILER.pack(checksum))
    except OSError as e:
        raise FileError(f"cannot write checkpoint {path}: {e}")
    logger.info("saved checkpoint %s (step %d, %d bytes of payload)", path, step, len(payload))


_MANIFEST_FIELDS = {
    "payload_bytes": int,
    "checksum": str,
    "step": int,
    "parameters": list,
    "optimizer": list,
}


def _check_manifest(manifest, path):
    if not isinstance(manifest, dict):
        raise ChecksumError(f"{path}: manifest is not a JSON object")
    for key, kind in _MANIFEST_FIELDS.items():
        value = manifest.get(key)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise ChecksumError(f"{path}: manifest missing {key!r} ({kind.__name__})")
    if manifest["payload_bytes"] < 0 or manifest["payload_bytes"] % 8:
        raise ChecksumError(f"{path}: payload of {manifest['payload_bytes']} bytes is not a float64 array")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FileError(f"cannot read checkpoint {path}: {e}")

    if len(data) < _HEADER.size + _TRAILER.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, manifest_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ChecksumError(f"{path}: not an SSTK file")
    if version != VERSION:
        raise ChecksumError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + manifest_len
    if start > len(data):
        raise ChecksumError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumError(f"{path}: unreadable manifest")
    _check_manifest(manifest, path)

    end = start + manifest["payload_bytes"]
    if end + _TRAILER.size != len(data):
        raise ChecksumError(f"{path}: payload is {len(data) - start - _TRAILER.size} bytes, manifest says {manifest['payload_bytes']}")
    payload = data[start:end]
    (stored,) = _TRAILER.unpack_from(data, end)
    if stored != fnv1a64(payload) or f"{stored:016x}" != manifest["checksum"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    values = np.frombuffer(payload, dtype="<f8")
    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape, dtype=np.int64))
        if offset + size > values.shape[0]:
            raise ChecksumError(f"{path}: manifest shapes overrun the payload")
        chunk = torch.from_numpy(values[offset:offset + size].astype(np.float64).reshape(shape))
        offset += size
        return chunk

    try:
        tensors = {entry["name"]: take(entry["shape"]) for entry in manifest["parameters"]}
        optimizer_state = {}
        for entry in manifest["optimizer"]:
            exp_avg = take(entry["shape"])
            optimizer_state[entry["name"]] = {"step": entry["step"], "exp_avg": exp_avg, "exp_avg_sq": take(entry["shape"])}
    except (KeyError, TypeError, ValueError) as e:
        raise ChecksumError(f"{path}: malformed manifest entry ({e!r})")
    logger.info("loaded checkpoint %s (step %d)", path, manifest["step"])
    return Checkpoint(manifest, tensors, optimizer_state)
