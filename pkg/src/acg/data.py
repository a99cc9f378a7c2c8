"""Demonstration episodes and the ``ACGDEMO1`` dataset file."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEMO_MAGIC = b"ACGDEMO1"
DEMO_VERSION = 1


class FormatError(ValueError):
    """Malformed or inconsistent file. ``kind`` names the failure class."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass
class Episode:
    """One demonstration: per-step instruction ids, observations and actions."""

    instructions: np.ndarray  # (T,) int
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, action_dim)

    def __post_init__(self):
        self.instructions = np.asarray(self.instructions, dtype=np.int64).reshape(-1)
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        T = len(self.instructions)
        if T < 1:
            raise ValueError("episode must have at least one step")
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D")
        if len(self.observations) != T or len(self.actions) != T:
            raise ValueError("episode arrays disagree in length")
        if not (np.isfinite(self.observations).all() and np.isfinite(self.actions).all()):
            raise ValueError("episode contains non-finite values")

    def __len__(self):
        return len(self.instructions)


@dataclass
class DemoDataset:
    episodes: list[Episode]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.episodes:
            return
        M = self.episodes[0].actions.shape[1]
        O = self.episodes[0].observations.shape[1]
        for ep in self.episodes:
            if ep.actions.shape[1] != M or ep.observations.shape[1] != O:
                raise ValueError("inconsistent action/observation width across episodes")
        self.metadata.setdefault("action_dim", M)
        self.metadata.setdefault("obs_dim", O)
        self.metadata.setdefault("vocab", int(max(ep.instructions.max() for ep in self.episodes)) + 1)
        self.metadata.setdefault("action_scale", 1.0)
        if self.metadata["action_dim"] != M or self.metadata["obs_dim"] != O:
            raise ValueError("metadata disagrees with episode contents")
        for ep in self.episodes:
            if ep.instructions.min() < 0 or ep.instructions.max() >= self.metadata["vocab"]:
                raise ValueError("instruction id outside vocabulary")

    @property
    def action_dim(self) -> int:
        return self.metadata["action_dim"]

    @property
    def obs_dim(self) -> int:
        return self.metadata["obs_dim"]

    @property
    def vocab(self) -> int:
        return self.metadata["vocab"]

    def __len__(self):
        return len(self.episodes)


def _descriptor_bytes(desc: dict) -> bytes:
    return json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_dataset(ds: DemoDataset, path) -> None:
    desc = dict(ds.metadata, format_version=DEMO_VERSION, num_episodes=len(ds.episodes))
    blob = _descriptor_bytes(desc)
    with open(path, "wb") as fh:
        fh.write(DEMO_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for ep in ds.episodes:
            fh.write(struct.pack("<Q", len(ep)))
            rows = np.concatenate(
                [ep.instructions[:, None].astype(np.float64), ep.observations, ep.actions], axis=1
            )
            fh.write(rows.astype("<f8").tobytes())


def load_dataset(path) -> DemoDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DEMO_MAGIC:
        raise FormatError("magic", f"{path} is not an ACGDEMO1 file")
    if len(raw) < 16:
        raise FormatError("truncated", "header cut short")
    (n,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + n:
        raise FormatError("truncated", "descriptor cut short")
    try:
        desc = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("descriptor", str(exc)) from None
    if desc.pop("format_version", None) != DEMO_VERSION:
        raise FormatError("version", "unsupported dataset version")
    count = desc.pop("num_episodes")
    width = 1 + desc["obs_dim"] + desc["action_dim"]
    pos = 16 + n
    episodes = []
    for i in range(count):
        if len(raw) < pos + 8:
            raise FormatError("truncated", f"episode {i} header missing")
        (T,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        nbytes = 8 * T * width
        if len(raw) < pos + nbytes:
            raise FormatError("truncated", f"episode {i} records cut short")
        rows = np.frombuffer(raw, dtype="<f8", count=T * width, offset=pos).reshape(T, width)
        pos += nbytes
        O = desc["obs_dim"]
        episodes.append(Episode(rows[:, 0].astype(np.int64), rows[:, 1 : 1 + O].copy(), rows[:, 1 + O :].copy()))
    if pos != len(raw):
        raise FormatError("trailing", f"{len(raw) - pos} unexpected trailing bytes")
    return DemoDataset(episodes, desc)
