"""Trajectory logs as JSON Lines plus an optional raw float32 frame sidecar.

One JSON object per tick::

    {"tick": 0, "y": 128.0, "vy": 0.0, "action": 1, "reward": 0, "collision": false, "frame_idx": 0}

Episodes are concatenated; a tick counter that does not increase starts a
new episode. ``frame_idx`` indexes the sidecar globally (-1 when absent).

Sidecar layout: ``b"IPPF1"``, then ``u32 count, u32 width, u32 height``, then
``count * height * width`` little-endian float32 values, row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .physics_env import TickRecord, TrajectoryLog

FRAME_MAGIC = b"IPPF1"
_HEADER = struct.Struct("<III")


class LogFormatError(ValueError):
    pass


def dump_record(rec: TickRecord) -> str:
    return json.dumps(rec.to_json(), separators=(",", ":"))


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("frames must have shape (count, height, width)")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(_HEADER.pack(n, w, h))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_frames(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[: len(FRAME_MAGIC)] != FRAME_MAGIC:
        raise LogFormatError(f"{path}: bad frame-file magic")
    start = len(FRAME_MAGIC) + _HEADER.size
    if len(buf) < start:
        raise LogFormatError(f"{path}: truncated header")
    n, w, h = _HEADER.unpack_from(buf, len(FRAME_MAGIC))
    expected = start + 4 * n * w * h
    if len(buf) != expected:
        raise LogFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(n, h, w).astype(np.float32)


def write_logs(logs: Sequence[TrajectoryLog], path, frames_path=None) -> None:
    """Write episodes to ``path``; frames go to ``frames_path`` when given."""
    offset = 0
    chunks = []
    with open(path, "w") as fh:
        for log in logs:
            has_frames = frames_path is not None and log.frames is not None
            for rec in log.records:
                out = TickRecord(**rec.to_json())
                out.frame_idx = rec.frame_idx + offset if has_frames and rec.frame_idx >= 0 else -1
                fh.write(dump_record(out) + "\n")
            if has_frames:
                chunks.append(log.frames)
                offset += len(log.frames)
    if frames_path is not None:
        frames = np.concatenate(chunks) if chunks else np.zeros((0, 80, 80), np.float32)
        write_frames(frames_path, frames)


def _parse(line: str, lineno: int) -> TickRecord:
    try:
        d = json.loads(line)
        return TickRecord(
            tick=int(d["tick"]),
            y=float(d["y"]),
            vy=None if d.get("vy") is None else float(d["vy"]),
            action=int(d["action"]),
            reward=int(d["reward"]),
            collision=bool(d["collision"]),
            frame_idx=int(d.get("frame_idx", -1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LogFormatError(f"line {lineno}: {exc}") from exc


def split_episodes(records: Iterable[TickRecord]) -> list[list[TickRecord]]:
    episodes: list[list[TickRecord]] = []
    for rec in records:
        if not episodes or rec.tick <= episodes[-1][-1].tick or episodes[-1][-1].collision:
            episodes.append([])
        episodes[-1].append(rec)
    return episodes


def read_logs(path, frames_path=None) -> list[TrajectoryLog]:
    """Parse a JSONL log; frame indices are rebased per episode when frames load."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"log file not found: {path}")
    with open(path) as fh:
        records = [_parse(line, i + 1) for i, line in enumerate(fh) if line.strip()]
    frames = read_frames(frames_path) if frames_path is not None else None
    logs = []
    for recs in split_episodes(records):
        log = TrajectoryLog(records=recs)
        if frames is not None:
            idx = [r.frame_idx for r in recs]
            if min(idx) < 0 or max(idx) >= len(frames):
                raise LogFormatError("frame_idx out of range of the frame sidecar")
            base = min(idx)
            log.frames = frames[base : max(idx) + 1]
            for r in recs:
                r.frame_idx -= base
        logs.append(log)
    return logs
