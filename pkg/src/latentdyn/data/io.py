"""Binary trajectory dataset format.

Little-endian layout:
  magic "AFRO" | u32 version=1 | u32 n_traj
  per trajectory: u32 L | u32 n_points | u32 action_dim | u64 seed |
                  f32 frames [L * n_points * 3] | f32 actions [(L-1) * action_dim]

A sidecar "<path>.meta.json" carries the generator config, the global
seed, and the per-trajectory scene descriptors (not representable in the
fixed binary layout).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import DataError, PointCloud
from .synthetic import SceneConfig, Trajectory

MAGIC = b"AFRO"
VERSION = 1


class DatasetFormatError(DataError):
    """Bad magic, unsupported version, or truncated payload."""


def write_dataset(trajs: list[Trajectory], path, config: SceneConfig | None = None,
                  seed: int | None = None) -> None:
    if not trajs:
        raise DataError("refusing to write an empty dataset")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(trajs)))
        for traj in trajs:
            frames = np.stack([fr.points for fr in traj.frames]).astype("<f4")
            actions = np.asarray(traj.actions, dtype="<f4")
            f.write(struct.pack("<IIIQ", traj.length, traj.n_points,
                                actions.shape[1], traj.seed & 0xFFFFFFFFFFFFFFFF))
            f.write(frames.tobytes())
            f.write(actions.tobytes())
    meta = {
        "config": asdict(config) if config is not None else None,
        "seed": seed,
        "descriptors": [t.descriptor for t in trajs],
    }
    with open(f"{path}.meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def read_dataset(path) -> list[Trajectory]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, n_traj = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}, reader supports {VERSION}")
        trajs = []
        for i in range(n_traj):
            length, n_points, action_dim, traj_seed = struct.unpack(
                "<IIIQ", _read_exact(f, 20, f"trajectory {i} header"))
            frames_bytes = _read_exact(f, length * n_points * 3 * 4, f"trajectory {i} frames")
            actions_bytes = _read_exact(f, (length - 1) * action_dim * 4, f"trajectory {i} actions")
            frames = np.frombuffer(frames_bytes, dtype="<f4").reshape(length, n_points, 3)
            actions = np.frombuffer(actions_bytes, dtype="<f4").reshape(length - 1, action_dim)
            trajs.append(Trajectory(
                frames=[PointCloud(frames[t].copy()) for t in range(length)],
                actions=actions.copy(),
                seed=traj_seed,
            ))
        trailing = f.read(1)
        if trailing:
            raise DatasetFormatError("trailing bytes after last trajectory")

    meta_path = Path(f"{path}.meta.json")
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
        descriptors = meta.get("descriptors")
        if descriptors and len(descriptors) == len(trajs):
            for traj, desc in zip(trajs, descriptors):
                traj.descriptor = desc
    return trajs
