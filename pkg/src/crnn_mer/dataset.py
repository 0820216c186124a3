"""Per-song feature/annotation sequences, CSV ingestion, synthetic fixtures,
fixed-length windowing and mini-batching.

CSV schemas (header row required, ``,`` or ``;`` delimited, lines starting
with ``#`` ignored)::

    features:     song_id,segment_start_ms,f0,f1,...,f{F-1}
    annotations:  song_id,segment_start_ms,valence,arousal

A file may hold one or several songs. Segments are 500 ms apart.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import DTYPE, Rng, Tensor

SEGMENT_MS = 500


class DataError(ValueError):
    """Malformed, missing or out-of-range input data."""


@dataclass
class FeatureSequence:
    song_id: str
    times_ms: np.ndarray
    features: Tensor  # (T, F)

    def __post_init__(self):
        self.times_ms = np.asarray(self.times_ms, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim != 2 or len(self.times_ms) != self.features.shape[0]:
            raise DataError(f"{self.song_id}: {len(self.times_ms)} timestamps for features of shape {self.features.shape}")
        if len(self.times_ms) > 1 and not np.all(np.diff(self.times_ms) == SEGMENT_MS):
            raise DataError(f"{self.song_id}: segment times must advance in {SEGMENT_MS} ms steps")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class AnnotationSequence:
    song_id: str
    valence: Tensor
    arousal: Tensor
    times_ms: np.ndarray | None = None

    def __post_init__(self):
        self.valence = np.asarray(self.valence, dtype=DTYPE)
        self.arousal = np.asarray(self.arousal, dtype=DTYPE)
        if self.valence.shape != self.arousal.shape or self.valence.ndim != 1:
            raise DataError(f"{self.song_id}: valence/arousal length mismatch")
        for name, v in (("valence", self.valence), ("arousal", self.arousal)):
            bad = np.flatnonzero(~(np.abs(v) <= 1.0))
            if bad.size:
                raise DataError(f"{self.song_id}: {name} value {v[bad[0]]} at row {bad[0]} outside [-1, 1]")
        if self.times_ms is None:
            self.times_ms = np.arange(len(self.valence), dtype=np.int64) * SEGMENT_MS

    def __len__(self):
        return len(self.valence)

    @property
    def targets(self) -> Tensor:
        """(T, 2) in (valence, arousal) order."""
        return np.stack([self.valence, self.arousal], axis=1)


Pair = tuple[FeatureSequence, AnnotationSequence]


@dataclass
class Window:
    inputs: Tensor   # (L, F)
    targets: Tensor  # (L, 2)
    mask: Tensor     # (L,)
    song_id: str = ""
    start: int = 0   # segment index of the first row

    @property
    def length(self) -> int:
        return int(self.mask.sum())


@dataclass
class Batch:
    inputs: Tensor   # (B, L, F)
    targets: Tensor  # (B, L, 2)
    mask: Tensor     # (B, L)
    windows: list = field(default_factory=list, repr=False)


# --------------------------------------------------------------------------
# CSV I/O


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return [], []
    delim = ";" if lines[0].count(";") > lines[0].count(",") else ","
    rows = list(csv.reader(io.StringIO("\n".join(lines)), delimiter=delim))
    header = [h.strip() for h in rows[0]]
    return header, rows[1:]


def _group_by_song(path, header, rows):
    if header[:2] != ["song_id", "segment_start_ms"]:
        raise DataError(f"{path}: header must start with song_id,segment_start_ms, got {header[:2]}")
    songs: dict[str, list] = {}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            songs.setdefault(row[0].strip(), []).append(
                (int(float(row[1])), [float(v) for v in row[2:]], lineno))
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return songs


def read_feature_csv(path) -> list[FeatureSequence]:
    path = Path(path)
    header, rows = _read_rows(path)
    if not header:
        return []
    out = []
    for sid, recs in _group_by_song(path, header, rows).items():
        recs.sort(key=lambda r: r[0])
        out.append(FeatureSequence(sid, [r[0] for r in recs], np.array([r[1] for r in recs], dtype=DTYPE).reshape(len(recs), -1)))
    return out


def read_annotation_csv(path) -> list[AnnotationSequence]:
    path = Path(path)
    header, rows = _read_rows(path)
    if not header:
        return []
    try:
        iv, ia = header.index("valence") - 2, header.index("arousal") - 2
    except ValueError:
        raise DataError(f"{path}: annotation header needs valence and arousal columns") from None
    out = []
    for sid, recs in _group_by_song(path, header, rows).items():
        recs.sort(key=lambda r: r[0])
        for t, vals, lineno in recs:
            for name, i in (("valence", iv), ("arousal", ia)):
                if not abs(vals[i]) <= 1.0:
                    raise DataError(f"{path}:{lineno}: song {sid} {name}={vals[i]} outside [-1, 1]")
        out.append(AnnotationSequence(sid, [r[1][iv] for r in recs], [r[1][ia] for r in recs],
                                      times_ms=[r[0] for r in recs]))
    return out


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_feature_csv(path, sequences, header_comment: str | None = None) -> None:
    sequences = list(sequences)
    F = sequences[0].features.shape[1] if sequences else 0
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["song_id", "segment_start_ms"] + [f"f{i}" for i in range(F)])
        for seq in sequences:
            for t, row in zip(seq.times_ms, seq.features):
                w.writerow([seq.song_id, int(t)] + [_fmt(v) for v in row])


def write_annotation_csv(path, sequences, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["song_id", "segment_start_ms", "valence", "arousal"])
        for seq in sequences:
            for t, v, a in zip(seq.times_ms, seq.valence, seq.arousal):
                w.writerow([seq.song_id, int(t), _fmt(v), _fmt(a)])


def load_dataset(features_dir, annotations_dir) -> list[Pair]:
    """Pair every feature sequence with its annotation sequence by song id.

    Songs are returned sorted by id. A song present on only one side, or with
    differing lengths, raises DataError naming the song.
    """
    features_dir, annotations_dir = Path(features_dir), Path(annotations_dir)
    for d in (features_dir, annotations_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    feats, anns = {}, {}
    for p in sorted(features_dir.glob("*.csv")):
        for seq in read_feature_csv(p):
            if seq.song_id in feats:
                raise DataError(f"song {seq.song_id} appears in more than one feature file")
            feats[seq.song_id] = seq
    for p in sorted(annotations_dir.glob("*.csv")):
        for seq in read_annotation_csv(p):
            if seq.song_id in anns:
                raise DataError(f"song {seq.song_id} appears in more than one annotation file")
            anns[seq.song_id] = seq
    for sid in sorted(set(feats) ^ set(anns)):
        side = "annotations" if sid in feats else "features"
        raise DataError(f"song {sid} has no matching {side}")
    pairs = []
    for sid in sorted(feats):
        f, a = feats[sid], anns[sid]
        if len(f) != len(a):
            raise DataError(f"song {sid}: {len(f)} feature rows but {len(a)} annotation rows")
        if not np.array_equal(f.times_ms, a.times_ms):
            raise DataError(f"song {sid}: feature and annotation timestamps differ")
        pairs.append((f, a))
    return pairs


# --------------------------------------------------------------------------
# Synthetic data

SYNTH_WINDOWS = {"echo": 1, "smooth": 4}
SYNTH_GAIN = 1.5


def make_synthetic(rng: Rng, n_songs: int, T: int, F: int, difficulty: str = "smooth") -> list[Pair]:
    """Random features with targets that are smooth functions of the inputs.

    Features are Uniform(-1, 1). With ``m_t`` the trailing moving average of the
    feature vectors over the last ``w`` segments (w=1 for "echo", w=4 for
    "smooth", truncated at the song start)::

        valence_t = tanh(1.5 * (m_t[0]     + 0.5 * m_t[1 % F]))
        arousal_t = tanh(1.5 * (m_t[2 % F] - 0.5 * m_t[3 % F]))

    tanh keeps every target inside [-1, 1].
    """
    if min(n_songs, T, F) < 1:
        raise ValueError("n_songs, T and F must all be >= 1")
    if difficulty not in SYNTH_WINDOWS:
        raise ValueError(f"difficulty must be one of {sorted(SYNTH_WINDOWS)}")
    w = SYNTH_WINDOWS[difficulty]
    width = len(str(n_songs - 1))
    pairs = []
    for s in range(n_songs):
        x = rng.uniform(-1.0, 1.0, (T, F))
        c = np.cumsum(np.vstack([np.zeros((1, F)), x]), axis=0)
        lo = np.maximum(np.arange(T) + 1 - w, 0)
        m = (c[np.arange(T) + 1] - c[lo]) / (np.arange(T) + 1 - lo)[:, None]
        v = np.tanh(SYNTH_GAIN * (m[:, 0] + 0.5 * m[:, 1 % F]))
        a = np.tanh(SYNTH_GAIN * (m[:, 2 % F] - 0.5 * m[:, 3 % F]))
        sid = f"synth{s:0{width}d}"
        times = np.arange(T) * SEGMENT_MS
        pairs.append((FeatureSequence(sid, times, x), AnnotationSequence(sid, v, a, times)))
    return pairs


# --------------------------------------------------------------------------
# Windowing, splitting, batching


def slice_sequences(pairs, L: int, eval_mode: bool = False) -> list[Window]:
    """Cut each song into non-overlapping windows of length L.

    In training mode the trailing ``T % L`` segments are dropped. In evaluation
    mode they form one more window, zero-padded to L with mask 0 on padding.
    """
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    windows = []
    for feats, ann in pairs:
        x, y = feats.features, ann.targets
        T, F = x.shape
        n_full = T // L
        for i in range(n_full):
            sl = slice(i * L, (i + 1) * L)
            windows.append(Window(x[sl].copy(), y[sl].copy(), np.ones(L), feats.song_id, i * L))
        rem = T - n_full * L
        if eval_mode and rem:
            xi, yi, mi = np.zeros((L, F)), np.zeros((L, 2)), np.zeros(L)
            xi[:rem], yi[:rem], mi[:rem] = x[n_full * L:], y[n_full * L:], 1.0
            windows.append(Window(xi, yi, mi, feats.song_id, n_full * L))
    return windows


def split_by_hash(pairs, val_fraction: float = 0.1):
    """Deterministic song-level split: songs sorted by SHA-1 of their id, the
    first ``round(val_fraction * n)`` (at least one when val_fraction > 0 and
    n >= 2) go to validation."""
    pairs = list(pairs)
    if not pairs or val_fraction <= 0:
        return pairs, []
    n_val = max(1, int(round(val_fraction * len(pairs)))) if len(pairs) > 1 else 0
    order = sorted(range(len(pairs)), key=lambda i: hashlib.sha1(pairs[i][0].song_id.encode()).hexdigest())
    val_idx = set(order[:n_val])
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


def stack_windows(windows) -> Batch:
    return Batch(np.stack([w.inputs for w in windows]),
                 np.stack([w.targets for w in windows]),
                 np.stack([w.mask for w in windows]),
                 list(windows))


def batches(windows, B: int, rng: Rng | None = None, shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of mini-batches; the final short batch is kept."""
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    n = len(windows)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, B):
        yield stack_windows([windows[i] for i in order[start:start + B]])
