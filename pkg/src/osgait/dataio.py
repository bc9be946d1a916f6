"""Recording format, windowing, point resampling, centering and partitions."""
from __future__ import annotations

import enum
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"MMGT"
VERSION = 1
_HEADER = struct.Struct("<4sIIBfI")


class Modality(enum.IntEnum):
    free_walk = 0
    smartphone = 1
    hands_in_pockets = 2


class RecordingFormatError(ValueError):
    pass


@dataclass
class PointFrame:
    points: np.ndarray              # (n, 4) float32: x, y, z [m], v [m/s]
    timestamp_index: int = 0

    def __len__(self):
        return len(self.points)


@dataclass
class RecordingSegment:
    subject_id: int
    modality: Modality
    frames: list[PointFrame]
    frame_rate_hz: float = 10.0
    segment_id: int = 0

    def __post_init__(self):
        self.modality = Modality(self.modality)
        ts = [f.timestamp_index for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frames must be strictly ordered by timestamp_index")

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# Binary / CSV I/O
# ---------------------------------------------------------------------------

def encode_recording(seg: RecordingSegment) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, int(seg.subject_id), int(seg.modality),
                           float(seg.frame_rate_hz), len(seg.frames)))
    for fr in seg.frames:
        pts = np.ascontiguousarray(fr.points, dtype="<f4").reshape(-1, 4)
        buf.write(struct.pack("<I", len(pts)))
        buf.write(pts.tobytes())
    return buf.getvalue()


def decode_recording(raw: bytes, segment_id: int = 0) -> RecordingSegment:
    if len(raw) < _HEADER.size:
        raise RecordingFormatError(f"truncated header at byte offset {len(raw)}")
    magic, version, subject, modality, rate, n_frames = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise RecordingFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise RecordingFormatError(f"unsupported version {version} at byte offset 4")
    if modality not in (0, 1, 2):
        raise RecordingFormatError(f"bad modality {modality} at byte offset 12")
    off = _HEADER.size
    frames = []
    for t in range(n_frames):
        if off + 4 > len(raw):
            raise RecordingFormatError(f"truncated payload at byte offset {off} (frame {t})")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        nbytes = 16 * n
        if off + nbytes > len(raw):
            raise RecordingFormatError(f"truncated payload at byte offset {off} (frame {t})")
        pts = np.frombuffer(raw, dtype="<f4", count=4 * n, offset=off).reshape(n, 4).astype(np.float32)
        if not np.isfinite(pts).all():
            bad = int(np.argmax(~np.isfinite(pts).reshape(-1)))
            raise RecordingFormatError(f"non-finite value at byte offset {off + 4 * bad}")
        frames.append(PointFrame(pts, t))
        off += nbytes
    if off != len(raw):
        raise RecordingFormatError(f"{len(raw) - off} trailing bytes at byte offset {off}")
    return RecordingSegment(subject, Modality(modality), frames, rate, segment_id)


def write_recording(path, seg: RecordingSegment):
    Path(path).write_bytes(encode_recording(seg))


def load_recording(path, segment_id: int = 0) -> RecordingSegment:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        raise RecordingFormatError("CSV recordings need metadata; use load_csv_recording")
    return decode_recording(path.read_bytes(), segment_id)


def load_csv_recording(path, subject_id: int, modality: int = 0,
                       frame_rate_hz: float = 10.0, segment_id: int = 0) -> RecordingSegment:
    """Read a ``frame,x,y,z,v`` CSV; frame indices missing from the file become empty frames."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.size == 0:
        return RecordingSegment(subject_id, modality, [], frame_rate_hz, segment_id)
    if arr.shape[1] != 5:
        raise RecordingFormatError(f"expected 5 columns frame,x,y,z,v, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise RecordingFormatError("non-finite value in CSV")
    idx = arr[:, 0].astype(int)
    order = np.argsort(idx, kind="stable")
    idx, pts = idx[order], arr[order, 1:].astype(np.float32)
    n_frames = int(idx.max()) + 1
    cuts = np.searchsorted(idx, np.arange(n_frames + 1))
    frames = [PointFrame(pts[cuts[t]:cuts[t + 1]], t) for t in range(n_frames)]
    return RecordingSegment(subject_id, modality, frames, frame_rate_hz, segment_id)


def write_csv_recording(path, seg: RecordingSegment):
    rows = [np.column_stack([np.full(len(f.points), f.timestamp_index), f.points])
            for f in seg.frames if len(f.points)]
    data = np.concatenate(rows) if rows else np.zeros((0, 5))
    np.savetxt(path, data, delimiter=",", header="frame,x,y,z,v", comments="",
               fmt=["%d", "%.9g", "%.9g", "%.9g", "%.9g"])


def load_directory(directory, pattern: str = "*.mmgt") -> list[RecordingSegment]:
    paths = sorted(Path(directory).glob(pattern))
    return [load_recording(p, segment_id=i) for i, p in enumerate(paths)]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def window_starts(length: int, N_f: int, s: int) -> list[int]:
    if N_f < 1 or s < 1:
        raise ValueError("N_f and s must be >= 1")
    if length < N_f:
        return []
    return list(range(0, length - N_f + 1, s))


def window_segment(seg: RecordingSegment, N_f: int, s: int) -> list[tuple[int, list[PointFrame]]]:
    """(start, frames) for windows starting at 0, s, 2s, ... fully inside the segment."""
    return [(t0, seg.frames[t0:t0 + N_f]) for t0 in window_starts(len(seg), N_f, s)]


def resample_frame(frame: PointFrame, N_p: int, rng: np.random.Generator) -> PointFrame:
    """Random subset when too many points, every point plus random repeats when too few."""
    pts = frame.points
    n = len(pts)
    if n == N_p:
        return frame
    if n > N_p:
        idx = rng.choice(n, size=N_p, replace=False)
    else:
        if n == 0:
            raise ValueError("cannot resample an empty frame")
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=N_p - n)])
        rng.shuffle(idx)
    return PointFrame(pts[idx], frame.timestamp_index)


def center_window(frames: np.ndarray, center_velocity: bool = True) -> np.ndarray:
    """Subtract per-frame, per-feature means. frames: (N_f, N_p, 4)."""
    out = np.array(frames, dtype=np.float64)
    mean = out.mean(axis=1, keepdims=True)
    if not center_velocity:
        mean[..., 3] = 0.0
    return out - mean


def window_seed(seed: int, segment_id: int, start: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, segment_id, start])


@dataclass
class WindowSet:
    """Stack of preprocessed windows plus per-window metadata."""

    data: np.ndarray        # (n, N_f, N_p, 4)
    labels: np.ndarray      # subject ids
    modality: np.ndarray
    segment: np.ndarray
    start: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.data[idx], self.labels[idx], self.modality[idx],
                         self.segment[idx], self.start[idx])

    def time_order(self) -> np.ndarray:
        """Indices sorted by (segment, start)."""
        return np.lexsort((self.start, self.segment))

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.labels))


def build_windows(segments: Sequence[RecordingSegment], N_f: int, N_p: int, s: int,
                  seed: int = 0, center_velocity: bool = True, dtype="float32") -> WindowSet:
    data, labels, mods, segs, starts = [], [], [], [], []
    dropped = 0
    for seg in segments:
        for t0, frames in window_segment(seg, N_f, s):
            if any(len(f) == 0 for f in frames):
                dropped += 1
                continue
            rng = np.random.default_rng(window_seed(seed, seg.segment_id, t0))
            pts = np.stack([resample_frame(f, N_p, rng).points for f in frames])
            data.append(center_window(pts, center_velocity))
            labels.append(seg.subject_id)
            mods.append(int(seg.modality))
            segs.append(seg.segment_id)
            starts.append(t0)
    if dropped:
        log.info("dropped %d windows containing empty frames", dropped)
    arr = np.stack(data).astype(dtype) if data else np.zeros((0, N_f, N_p, 4), dtype=dtype)
    return WindowSet(arr, np.array(labels, dtype=int), np.array(mods, dtype=int),
                     np.array(segs, dtype=int), np.array(starts, dtype=int))


# ---------------------------------------------------------------------------
# Partitions and splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetPartition:
    known: tuple[int, ...]
    unknown: tuple[int, ...]
    calibration_subject: int
    seed: int
    # split indices into the known-subject windows, filled once a split is drawn
    train: tuple[int, ...] = ()
    val: tuple[int, ...] = ()
    test: tuple[int, ...] = ()

    @property
    def evaluated_unknown(self) -> tuple[int, ...]:
        return tuple(s for s in self.unknown if s != self.calibration_subject)


def make_partition(subjects: Iterable[int], n_unknown: int, seed: int) -> DatasetPartition:
    """Random known/unknown split; the calibration subject is drawn from the unknowns.

    A single permutation drives everything: the first ``n_unknown`` entries are
    unknown and the first of those is the calibration subject. For a fixed seed
    the unknown sets are therefore nested as ``n_unknown`` grows.
    """
    S = sorted(int(s) for s in subjects)
    if not 1 <= n_unknown <= len(S) - 1:
        raise ValueError(f"need 1 <= n_unknown <= {len(S) - 1}, got {n_unknown}")
    perm = np.random.default_rng(seed).permutation(S)
    unknown = tuple(sorted(int(s) for s in perm[:n_unknown]))
    known = tuple(sorted(int(s) for s in perm[n_unknown:]))
    return DatasetPartition(known, unknown, int(perm[0]), seed)


def split_known(labels: np.ndarray, seed: int, ratios=(0.8, 0.1, 0.1)):
    """Stratified random (train, val, test) index arrays over the given windows."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    parts = ([], [], [])
    for sid in np.unique(labels):
        idx = np.flatnonzero(labels == sid)
        if len(idx) < 3:
            raise ValueError(f"subject {sid} has only {len(idx)} windows; need >= 3")
        idx = rng.permutation(idx)
        n = len(idx)
        n_val = max(1, int(round(ratios[1] * n)))
        n_test = max(1, int(round(ratios[2] * n)))
        n_train = n - n_val - n_test
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split_known_by_chunk(ws: WindowSet, N_f: int, seed: int, ratios=(0.8, 0.1, 0.1),
                         chunk_frames: int | None = None):
    """Leak-free split: whole non-overlapping time chunks go to one split.

    Each segment is cut into chunks of ``chunk_frames`` frames (default 5*N_f);
    a window is kept only if it lies inside a single chunk. Chunks are assigned
    per subject with the given ratios.
    """
    chunk_frames = chunk_frames or 5 * N_f
    chunk = ws.start // chunk_frames
    inside = (ws.start + N_f - 1) // chunk_frames == chunk
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for sid in np.unique(ws.labels):
        mask = (ws.labels == sid) & inside
        keys = sorted(set(zip(ws.segment[mask].tolist(), chunk[mask].tolist())))
        if len(keys) < 3:
            raise ValueError(f"subject {sid} has only {len(keys)} chunks; need >= 3")
        order = rng.permutation(len(keys))
        n = len(keys)
        n_val = max(1, int(round(ratios[1] * n)))
        n_test = max(1, int(round(ratios[2] * n)))
        groups = (order[:n - n_val - n_test], order[n - n_val - n_test:n - n_test], order[n - n_test:])
        for part, g in zip(parts, groups):
            chosen = {keys[i] for i in g}
            sel = [i for i in np.flatnonzero(mask) if (ws.segment[i], chunk[i]) in chosen]
            part.append(np.array(sel, dtype=int))
    return tuple(np.sort(np.concatenate(p)) for p in parts)
