"""Offline transition sets: normalization, sampling, mixing and the GORLDS01 file format.

File layout (all little-endian)::

    8 bytes   magic  b"GORLDS01"
    u32       length L of the JSON header
    L bytes   UTF-8 JSON header {"version", "n", "state_dim", "action_dim", "columns", "meta"}
    float64   columns in header order: states (n*ds), actions (n*da),
              next_states (n*ds), rewards (n), dones (n)
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import Rng

MAGIC = b"GORLDS01"
FORMAT_VERSION = 1
COLUMNS = ("states", "actions", "next_states", "rewards", "dones")
STD_FLOOR = 1e-3
BUCKETS = {"random": 0, "medium": 1, "expert": 2}


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Malformed GORLDS01 file; ``offset`` is the byte position where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        self.next_states = np.ascontiguousarray(self.next_states, dtype=np.float64)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float64).reshape(-1)
        self.dones = np.ascontiguousarray(self.dones, dtype=np.float64).reshape(-1)
        n = self.states.shape[0]
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.next_states.shape != self.states.shape:
            raise DatasetError("states/actions/next_states must be 2-D with matching state shapes")
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.dones.shape[0] == n):
            raise DatasetError("all columns must share the same length")
        for name in COLUMNS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"non-finite entries in {name}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def subset(self, idx: np.ndarray) -> "OfflineDataset":
        idx = np.asarray(idx)
        meta = {k: v for k, v in self.meta.items() if k != "segments"}
        buckets = self.buckets()[idx]
        # keep per-row provenance as runs of equal kind
        segs, start = [], 0
        inv = {v: k for k, v in BUCKETS.items()}
        for i in range(1, len(idx) + 1):
            if i == len(idx) or buckets[i] != buckets[start]:
                segs.append({"kind": inv.get(int(buckets[start]), "unknown"), "start": start, "length": i - start})
                start = i
        meta["segments"] = segs
        return OfflineDataset(
            self.states[idx], self.actions[idx], self.next_states[idx], self.rewards[idx], self.dones[idx], meta
        )

    def buckets(self) -> np.ndarray:
        """Per-transition quality bucket id (-1 where provenance is unknown)."""
        out = np.full(len(self), -1, dtype=np.int64)
        for seg in self.meta.get("segments", []):
            out[seg["start"]:seg["start"] + seg["length"]] = BUCKETS.get(seg["kind"], -1)
        return out

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of each episode, split at ``done`` flags."""
        ends = np.flatnonzero(self.dones > 0.5)
        out, start = [], 0
        for e in ends:
            out.append(self.rewards[start:e + 1].sum())
            start = e + 1
        return np.asarray(out)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def compute_norm_stats(data: OfflineDataset) -> NormStats:
    if len(data) < 2:
        raise DatasetError("need at least 2 transitions for normalization statistics")
    mean = data.states.mean(axis=0)
    std = np.maximum(data.states.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def normalize(data: OfflineDataset, stats: NormStats) -> OfflineDataset:
    return OfflineDataset(
        stats.apply(data.states),
        data.actions,
        stats.apply(data.next_states),
        data.rewards,
        data.dones,
        dict(data.meta, normalized=True),
    )


def sample_batch(data: OfflineDataset | int, rng: Rng, n: int) -> np.ndarray:
    """``n`` indices drawn uniformly with replacement."""
    size = data if isinstance(data, int) else len(data)
    if n < 1 or n > size:
        raise DatasetError(f"batch size {n} outside [1, {size}]")
    return rng.integers(size, size=n)


def mix(a: OfflineDataset, b: OfflineDataset) -> OfflineDataset:
    """Concatenate two datasets, keeping segment provenance."""
    if len(b) == 0:
        return a
    if a.state_dim != b.state_dim or a.action_dim != b.action_dim:
        raise DatasetError("cannot mix datasets with different dimensions")
    segs = [dict(s) for s in a.meta.get("segments", [])]
    for s in b.meta.get("segments", []):
        s = dict(s)
        s["start"] = s["start"] + len(a)
        if "episode_starts" in s:
            s["episode_starts"] = [e + len(a) for e in s["episode_starts"]]
        segs.append(s)
    meta = {"env": a.meta.get("env", b.meta.get("env")), "env_hash": a.meta.get("env_hash"), "segments": segs,
            "sources": [a.meta.get("name", "a"), b.meta.get("name", "b")]}
    return OfflineDataset(
        np.concatenate([a.states, b.states]),
        np.concatenate([a.actions, b.actions]),
        np.concatenate([a.next_states, b.next_states]),
        np.concatenate([a.rewards, b.rewards]),
        np.concatenate([a.dones, b.dones]),
        meta,
    )


def empty_like(data: OfflineDataset) -> OfflineDataset:
    z = np.zeros((0, data.state_dim))
    return OfflineDataset(z, np.zeros((0, data.action_dim)), z, np.zeros(0), np.zeros(0), {"segments": []})


def sample_tuples(data: OfflineDataset, count: int, rng: Rng, contiguous: bool = False) -> OfflineDataset:
    """Pick ``count`` transitions: i.i.d. without replacement, or one contiguous run."""
    if count > len(data):
        raise DatasetError(f"cannot take {count} tuples from {len(data)}")
    if contiguous:
        start = int(rng.integers(len(data) - count + 1))
        idx = np.arange(start, start + count)
    else:
        idx = np.sort(rng.choice(len(data), count, replace=False))
    sub = data.subset(idx)
    sub.meta["tuples"] = {"count": count, "contiguous": contiguous}
    return sub


def save(data: OfflineDataset, path: str | Path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "n": len(data),
        "state_dim": data.state_dim,
        "action_dim": data.action_dim,
        "columns": list(COLUMNS),
        "meta": data.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in COLUMNS:
            fh.write(np.ascontiguousarray(getattr(data, name), dtype="<f8").tobytes())


def load(path: str | Path) -> OfflineDataset:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic, not a GORLDS01 file", 0)
    off = len(MAGIC)
    if len(raw) < off + 4:
        raise DatasetFormatError("truncated header length", off)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise DatasetFormatError("truncated JSON header", off)
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable JSON header: {exc}", off) from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {header.get('version')!r}", off)
    off += hlen
    n, ds, da = header["n"], header["state_dim"], header["action_dim"]
    widths = {"states": ds, "actions": da, "next_states": ds, "rewards": 1, "dones": 1}
    cols = {}
    for name in header["columns"]:
        count = n * widths[name]
        nbytes = 8 * count
        if len(raw) < off + nbytes:
            raise DatasetFormatError(f"truncated column {name!r}", off)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        cols[name] = arr
        off += nbytes
    if off != len(raw):
        raise DatasetFormatError(f"{len(raw) - off} trailing bytes", off)
    return OfflineDataset(
        cols["states"].reshape(n, ds),
        cols["actions"].reshape(n, da),
        cols["next_states"].reshape(n, ds),
        cols["rewards"],
        cols["dones"],
        header["meta"],
    )


def export_csv(data: OfflineDataset, path: str | Path) -> None:
    ds, da = data.state_dim, data.action_dim
    head = [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + [f"s_next{i}" for i in range(ds)]
    head += ["reward", "done", "bucket"]
    buckets = data.buckets()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i in range(len(data)):
            row = [repr(float(x)) for x in data.states[i]] + [repr(float(x)) for x in data.actions[i]]
            row += [repr(float(x)) for x in data.next_states[i]]
            row += [repr(float(data.rewards[i])), int(data.dones[i]), int(buckets[i])]
            w.writerow(row)
