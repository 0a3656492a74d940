"""Checkpoint and memory-dump files, and the flat key=value run configuration.

Binary files share one layout::

    magic (8 bytes) | u32 header length | JSON header | tensor blob | sha256 (32 bytes)

The digest covers every preceding byte, so any corruption is detected before
anything is parsed.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ValidationError

CKPT_MAGIC = b"MEMCKPT\x00"
MEMDUMP_MAGIC = b"MEMDUMP\x00"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def write_tensor_file(path, magic: bytes, header: dict, tensors: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, format_version=header.get("format_version", FORMAT_VERSION), tensors=entries)
    head = json.dumps(header, sort_keys=True).encode()
    body = magic + struct.pack("<I", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_tensor_file(path, magic: bytes):
    data = Path(path).read_bytes()
    if len(data) < len(magic) + 4 + 32 or data[:len(magic)] != magic:
        raise FormatError(f"{path}: not a recognised file (bad magic or truncated)")
    body, digest = data[:-32], data[-32:]
    (hlen,) = struct.unpack_from("<I", data, len(magic))
    start = len(magic) + 4
    if hashlib.sha256(body).digest() != digest:
        try:
            header = json.loads(data[start:start + hlen])
            expected = start + hlen + sum(e["nbytes"] for e in header["tensors"]) + 32
        except Exception:
            expected = None
        if expected is not None and expected != len(data):
            raise FormatError(f"{path}: file is truncated")
        raise FormatError(f"{path}: hash mismatch, file is corrupted")
    header = json.loads(data[start:start + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    base = start + hlen
    tensors = {}
    for e in header.pop("tensors"):
        arr = np.frombuffer(data, e["dtype"], int(np.prod(e["shape"], dtype=np.int64)), base + e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return header, tensors


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    policy_config: dict
    policy_state: dict
    memory_config: dict | None = None
    memory_state: dict | None = None
    provenance: dict = field(default_factory=dict)
    optimizer_state: dict | None = None

    def build_policy(self):
        from .policy import Policy, PolicyConfig
        policy = Policy(PolicyConfig(**self.policy_config))
        policy.load_state_dict(self.policy_state)
        return policy

    def build_memory_net(self):
        from .memory import MemoryNet
        if self.memory_state is None:
            return None
        net = MemoryNet(**self.memory_config)
        net.load_state_dict(self.memory_state)
        return net

    @classmethod
    def from_models(cls, policy, memory_net=None, provenance=None) -> "Checkpoint":
        mem_cfg = None if memory_net is None else {
            "subset": memory_net.subset, "hidden": memory_net.out.in_features,
            "n_layers": sum(isinstance(m, torch.nn.Linear) for m in memory_net.hidden)}
        return cls(policy.config.to_dict(), {k: v.detach().clone() for k, v in policy.state_dict().items()},
                   mem_cfg, None if memory_net is None else
                   {k: v.detach().clone() for k, v in memory_net.state_dict().items()},
                   dict(provenance or {}))


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {f"policy/{k}": v for k, v in ckpt.policy_state.items()}
    if ckpt.memory_state is not None:
        tensors.update({f"memory/{k}": v for k, v in ckpt.memory_state.items()})
    if ckpt.optimizer_state:
        tensors.update({f"optim/{k}": v for k, v in ckpt.optimizer_state.items()})
    header = {"format": "memento-ckpt", "policy_config": ckpt.policy_config,
              "memory_config": ckpt.memory_config, "provenance": ckpt.provenance}
    write_tensor_file(path, CKPT_MAGIC, header, tensors)


def load_checkpoint(path, expect_policy_config: dict | None = None) -> Checkpoint:
    header, tensors = read_tensor_file(path, CKPT_MAGIC)
    if expect_policy_config is not None and dict(expect_policy_config) != header["policy_config"]:
        raise ValidationError(f"{path}: architecture mismatch: checkpoint has {header['policy_config']}, "
                              f"expected {dict(expect_policy_config)}")

    def part(prefix):
        out = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        return out or None

    return Checkpoint(header["policy_config"], part("policy/"), header.get("memory_config"),
                      part("memory/"), header.get("provenance", {}), part("optim/"))


def save_memory(path, memory) -> None:
    write_tensor_file(path, MEMDUMP_MAGIC, {"format": "memento-memory", "shared": memory.shared},
                      memory.state_tensors())


def load_memory(path):
    from .memory import Memory
    header, tensors = read_tensor_file(path, MEMDUMP_MAGIC)
    return Memory.from_tensors(tensors, shared=bool(header["shared"]))


# ---------------------------------------------------------------- run config

REQUIRED = object()

SCHEMA = {
    "run.seed": (int, 0),
    "run.workers": (int, 1),
    "run.out_dir": (str, "runs"),
    "run.timing": (bool, True),
    "problem.kind": (str, REQUIRED),
    "problem.n": (int, REQUIRED),
    "model.embed_dim": (int, 64),
    "model.n_layers": (int, 2),
    "model.n_heads": (int, 4),
    "model.ff_dim": (int, 128),
    "model.clip": (float, 10.0),
    "pretrain.steps": (int, 2000),
    "pretrain.batch_size": (int, 64),
    "pretrain.starts": (int, 20),
    "pretrain.lr": (float, 1e-3),
    "train.budget": (int, 50),
    "train.batch_size": (int, 16),
    "train.starts": (int, 20),
    "train.accumulation": (int, 4),
    "train.lr_memory": (float, 0.004),
    "train.lr_encoder": (float, 1e-4),
    "train.lr_decoder": (float, 1e-4),
    "train.epsilon": (float, 0.01),
    "train.steps": (int, 100),
    "train.refine": (bool, False),
    "train.memory_size": (int, 40),
    "train.features": (str, "D"),
    "train.shared_memory": (bool, False),
    "train.hidden": (int, 8),
    "train.checkpoint_every": (int, 0),
    "train.val_every": (int, 0),
    "train.val_size": (int, 16),
    "train.val_budget": (int, 50),
    "search.budget": (int, 200),
    "search.starts": (int, 0),
    "search.temperature": (float, 1.0),
    "search.memory_size": (int, 40),
    "search.chunk_size": (int, 25),
    "eas.lr": (float, 0.01),
    "eas.imitation": (float, 0.1),
    "data.count": (int, 100),
    "data.seed": (int, 1234),
}


def _coerce(key, typ, raw):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ValidationError(f"config key {key!r}: expected {typ.__name__}, got {text!r}") from None


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict
    path: str | None = None
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def workers(self) -> int:
        return self.values["run.workers"]

    def to_text(self) -> str:
        return "".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n"
                       for k, v in sorted(self.values.items()))

    def snapshot(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.txt"
        path.write_text(self.to_text())
        return path


def resolve(raw: dict, path=None, overrides=None) -> RunConfig:
    values = {}
    for key in raw:
        if key not in SCHEMA:
            raise ValidationError(f"unknown config key {key!r}")
    for key, (typ, default) in SCHEMA.items():
        if key in raw:
            values[key] = _coerce(key, typ, raw[key])
        elif default is REQUIRED:
            raise ValidationError(f"missing required config key {key!r}")
        else:
            values[key] = default
    return RunConfig(values, None if path is None else str(path), dict(overrides or {}))


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a key=value file, apply ``overrides`` ('key=value' strings or a dict), validate."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {path} does not exist")
        raw = parse_kv(p.read_text(), str(p))
    if isinstance(overrides, dict):
        ov = {k: v for k, v in overrides.items()}
    else:
        ov = parse_kv("\n".join(overrides or []), "<overrides>")
    raw.update(ov)
    return resolve(raw, path, ov)
