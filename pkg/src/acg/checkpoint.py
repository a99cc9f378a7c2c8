"""``ACGCKPT1`` checkpoint files.

Layout: 8 magic bytes, a little-endian u64 descriptor length, the UTF-8 JSON
descriptor (architecture, shape table, step, seed), then every tensor as raw
little-endian float64 in shape-table order.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FormatError
from .policy_net import DTYPE, NetConfig, PolicyNet

CKPT_MAGIC = b"ACGCKPT1"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: NetConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    action_scale: float = 1.0
    version: int = CKPT_VERSION

    @classmethod
    def from_net(cls, net: PolicyNet, step=0, seed=0, action_scale=1.0) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
        return cls(net.cfg, tensors, int(step), int(seed), float(action_scale))

    def to_net(self) -> PolicyNet:
        net = PolicyNet(self.config)
        net.load_state_dict({k: torch.from_numpy(v.copy()).to(DTYPE) for k, v in self.tensors.items()})
        return net

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor plus identical metadata."""
        if (self.config, self.step, self.seed, self.action_scale, self.version) != (
            other.config, other.step, other.seed, other.action_scale, other.version
        ):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def expected_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    net = PolicyNet(cfg)
    return [(k, tuple(v.shape)) for k, v in net.state_dict().items()]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    desc = {
        "format_version": ckpt.version,
        "arch": dataclasses.asdict(ckpt.config),
        "tensors": [[name, list(arr.shape)] for name, arr in ckpt.tensors.items()],
        "step": ckpt.step,
        "seed": ckpt.seed,
        "action_scale": ckpt.action_scale,
    }
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("truncated", "header cut short")
    if raw[:8] != CKPT_MAGIC:
        raise FormatError("magic", f"{path} is not an ACGCKPT1 file")
    (n,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + n:
        raise FormatError("truncated", "descriptor cut short")
    try:
        desc = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("descriptor", str(exc)) from None
    if desc.get("format_version") != CKPT_VERSION:
        raise FormatError("version", f"expected version {CKPT_VERSION}, got {desc.get('format_version')}")
    try:
        cfg = NetConfig(**desc["arch"])
    except (TypeError, ValueError) as exc:
        raise FormatError("descriptor", f"bad architecture: {exc}") from None

    table = [(name, tuple(shape)) for name, shape in desc["tensors"]]
    if table != expected_shapes(cfg):
        raise FormatError("shape-table", "tensor table does not match the declared architecture")
    sizes = [int(np.prod(shape)) for _, shape in table]
    body = len(raw) - 16 - n
    if body < 8 * sum(sizes):
        raise FormatError("truncated", f"expected {8 * sum(sizes)} tensor bytes, found {body}")
    if body > 8 * sum(sizes):
        raise FormatError("trailing", f"{body - 8 * sum(sizes)} unexpected trailing bytes")

    tensors, pos = {}, 16 + n
    for (name, shape), size in zip(table, sizes):
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return Checkpoint(cfg, tensors, desc["step"], desc["seed"], desc["action_scale"], desc["format_version"])
