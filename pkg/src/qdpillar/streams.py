"""Per-channel photon timestamp streams and their on-disk formats.

QDTS binary layout::

    b"QDTS" | version (u8) | channel count (u8) | records...

Each record is 9 bytes: channel (u8) then timestamp in picoseconds
(u64, little endian).  Records are sorted by timestamp across channels.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

MAGIC = b"QDTS"
VERSION = 1
RECORD_DTYPE = np.dtype([("channel", "u1"), ("timestamp", "<u8")])  # packed, 9 bytes
PS = 1e-12


@dataclass(frozen=True, eq=False)
class TimestampStream:
    """Strictly increasing integer-picosecond detection times on one channel.

    ``duration`` (seconds) is the acquisition length the stream was recorded
    over; it defaults to just past the last timestamp when unknown.
    """

    channel: int
    timestamps: np.ndarray = field(repr=False)
    duration: float = 0.0

    def __post_init__(self):
        ts = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        if not 0 <= self.channel < 256:
            raise DataError(f"channel id must fit in one byte, got {self.channel}")
        if ts.size and ts[0] < 0:
            raise DataError("negative timestamp")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise DataError(f"channel {self.channel}: timestamps not strictly increasing")
        if self.duration <= 0:
            object.__setattr__(self, "duration", (int(ts[-1]) + 1) * PS if ts.size else 0.0)
        elif ts.size and ts[-1] * PS > self.duration * (1 + 1e-12):
            raise DataError(f"channel {self.channel}: timestamp beyond stream duration")

    def __len__(self):
        return int(self.timestamps.size)

    def __eq__(self, other):
        if not isinstance(other, TimestampStream):
            return NotImplemented
        return (self.channel == other.channel and self.duration == other.duration
                and np.array_equal(self.timestamps, other.timestamps))

    @property
    def rate(self) -> float:
        return len(self) / self.duration if self.duration > 0 else 0.0


def write_qdts(path, streams: Sequence[TimestampStream]) -> None:
    path = Path(path)
    path.write_bytes(qdts_bytes(streams))


def qdts_bytes(streams: Sequence[TimestampStream]) -> bytes:
    channels = [s.channel for s in streams]
    if len(set(channels)) != len(channels):
        raise DataError("duplicate channel ids")
    n = sum(len(s) for s in streams)
    rec = np.empty(n, dtype=RECORD_DTYPE)
    if n:
        ch = np.concatenate([np.full(len(s), s.channel, dtype=np.uint8) for s in streams])
        ts = np.concatenate([s.timestamps for s in streams])
        order = np.lexsort((ch, ts))
        rec["channel"] = ch[order]
        rec["timestamp"] = ts[order].astype(np.uint64)
    header = MAGIC + bytes([VERSION, len(streams)])
    return header + rec.tobytes()


def read_qdts(path, duration: float = 0.0) -> list[TimestampStream]:
    """Parse a QDTS file into one stream per channel, ordered by channel id."""
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != MAGIC:
        raise DataError(f"{path}: not a QDTS file")
    version, n_channels = data[4], data[5]
    if version != VERSION:
        raise DataError(f"{path}: unsupported QDTS version {version}")
    body = data[6:]
    if len(body) % RECORD_DTYPE.itemsize:
        raise DataError(f"{path}: truncated record")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    if rec.size > 1 and np.any(np.diff(rec["timestamp"].astype(np.int64)) < 0):
        raise DataError(f"{path}: records not sorted by timestamp")
    ids = sorted(set(np.unique(rec["channel"]).tolist()))
    if len(ids) > n_channels:
        raise DataError(f"{path}: header declares {n_channels} channels, found {len(ids)}")
    out = [TimestampStream(c, rec["timestamp"][rec["channel"] == c].astype(np.int64), duration)
           for c in ids]
    return out


def write_csv(path_or_buf, streams: Iterable[TimestampStream]) -> None:
    """CSV export with header ``channel,timestamp_ps``, sorted by timestamp."""
    streams = list(streams)
    text = io.StringIO()
    w = csv.writer(text, lineterminator="\n")
    w.writerow(["channel", "timestamp_ps"])
    rec = np.frombuffer(qdts_bytes(streams)[6:], dtype=RECORD_DTYPE)
    for c, t in zip(rec["channel"].tolist(), rec["timestamp"].tolist()):
        w.writerow([c, t])
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text.getvalue())
    else:
        Path(path_or_buf).write_text(text.getvalue())


def read_csv(path, duration: float = 0.0) -> list[TimestampStream]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["channel", "timestamp_ps"]:
            raise DataError(f"{path}: expected header 'channel,timestamp_ps'")
        per: dict[int, list[int]] = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                c, t = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: bad row {row!r}") from exc
            per.setdefault(c, []).append(t)
    return [TimestampStream(c, np.asarray(per[c], dtype=np.int64), duration)
            for c in sorted(per)]


def read_streams(path, duration: float = 0.0) -> list[TimestampStream]:
    """Read a stream file, choosing the format from the extension."""
    if str(path).lower().endswith(".csv"):
        return read_csv(path, duration)
    return read_qdts(path, duration)
