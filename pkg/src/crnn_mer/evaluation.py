"""RMSE metric, whole-song evaluation and multi-run aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import AnnotationSequence, slice_sequences
from .numerics import DTYPE, DimensionError

METRICS = ("rmse_valence", "rmse_arousal", "rmse_average")


def rmse(pred, ref) -> float:
    pred = np.asarray(pred, dtype=DTYPE).ravel()
    ref = np.asarray(ref, dtype=DTYPE).ravel()
    if pred.size == 0:
        raise ValueError("rmse of an empty sequence")
    if pred.shape != ref.shape:
        raise DimensionError(f"rmse length mismatch: {pred.size} vs {ref.size}")
    return float(np.sqrt(np.sum((pred - ref) ** 2) / pred.size))


def masked_rmse(pred, ref, mask) -> float:
    """RMSE over the positions where ``mask`` is nonzero."""
    keep = np.asarray(mask) != 0
    return rmse(np.asarray(pred)[keep], np.asarray(ref)[keep])


@dataclass
class EvalResult:
    rmse_valence: float
    rmse_arousal: float
    per_song: dict[str, tuple[float, float]] = field(default_factory=dict)
    pooled: bool = True

    @property
    def rmse_average(self) -> float:
        return 0.5 * (self.rmse_valence + self.rmse_arousal)

    def metrics(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def predict_songs(model, sequences, seq_len: int) -> dict[str, np.ndarray]:
    """Inference-mode predictions, (T, 2) per song id.

    Each song is cut into windows of ``seq_len``; the trailing partial window is
    run at its true length so that padding cannot leak into real positions.
    """
    sequences = list(sequences)
    F = model.spec.feature_dim
    for s in sequences:
        if s.features.shape[1] != F:
            raise DimensionError(f"song {s.song_id} has {s.features.shape[1]} features, model expects {F}")
    dummy = [(s, AnnotationSequence(s.song_id, np.zeros(len(s)), np.zeros(len(s)))) for s in sequences]
    windows = slice_sequences(dummy, seq_len, eval_mode=True)
    out = {s.song_id: np.zeros((len(s), 2)) for s in sequences}
    by_len: dict[int, list] = {}
    for w in windows:
        by_len.setdefault(w.length, []).append(w)
    for length, group in sorted(by_len.items()):
        x = np.stack([w.inputs[:length] for w in group])
        y = model.forward(x, train=False)
        for w, yi in zip(group, y):
            out[w.song_id][w.start:w.start + length] = yi
    return out


def evaluate_songs(model, pairs, seq_len: int, mode: str = "pooled") -> EvalResult:
    """RMSE of inference predictions against annotations.

    ``pooled`` takes one RMSE over every segment of every song;
    ``per_song_mean`` averages per-song RMSEs.
    """
    if mode not in ("pooled", "per_song_mean"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("nothing to evaluate")
    preds = predict_songs(model, [f for f, _ in pairs], seq_len)
    per_song = {}
    all_pred, all_ref = [], []
    for f, a in pairs:
        p, y = preds[f.song_id], a.targets
        per_song[f.song_id] = (rmse(p[:, 0], y[:, 0]), rmse(p[:, 1], y[:, 1]))
        all_pred.append(p)
        all_ref.append(y)
    if mode == "pooled":
        P, Y = np.concatenate(all_pred), np.concatenate(all_ref)
        return EvalResult(rmse(P[:, 0], Y[:, 0]), rmse(P[:, 1], Y[:, 1]), per_song, pooled=True)
    v = float(np.mean([r[0] for r in per_song.values()]))
    a = float(np.mean([r[1] for r in per_song.values()]))
    return EvalResult(v, a, per_song, pooled=False)


def constant_baseline(train_pairs, eval_pairs) -> EvalResult:
    """Pooled RMSE of predicting the training-set mean of each channel."""
    mean = np.concatenate([a.targets for _, a in train_pairs]).mean(axis=0)
    Y = np.concatenate([a.targets for _, a in eval_pairs])
    return EvalResult(rmse(np.full(len(Y), mean[0]), Y[:, 0]), rmse(np.full(len(Y), mean[1]), Y[:, 1]))


class PartialResultsError(RuntimeError):
    def __init__(self, message, completed_seeds, results):
        super().__init__(f"{message} (completed seeds: {completed_seeds})")
        self.completed_seeds = completed_seeds
        self.results = results


@dataclass
class MultiRunSummary:
    seeds: list[int]
    mean: dict[str, float]
    std: dict[str, float | None]
    runs: list[dict[str, float]] = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    def cell(self, metric: str) -> str:
        s = self.std[metric]
        return f"{self.mean[metric]:.3f}" if s is None else f"{self.mean[metric]:.3f}±{s:.3f}"


def summarize(runs: list[dict[str, float]], seeds) -> MultiRunSummary:
    """Sample mean and sample standard deviation (n-1) per metric; std is None for one run."""
    names = list(runs[0])
    mean, std = {}, {}
    for m in names:
        vals = np.array([r[m] for r in runs], dtype=DTYPE)
        # shift by the first run so identical runs give exactly that value and std 0
        d = vals - vals[0]
        mean[m] = float(vals[0] + d.mean())
        std[m] = float(np.sqrt(np.sum((d - d.mean()) ** 2) / (len(d) - 1))) if len(d) > 1 else None
    return MultiRunSummary(list(seeds), mean, std, runs)


def multi_run(fn: Callable[[int], object], seeds) -> MultiRunSummary:
    """Run ``fn(seed)`` for every seed and aggregate.

    ``fn`` returns an EvalResult or a mapping of metric name to value.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("multi_run needs at least one seed")
    runs, done = [], []
    for seed in seeds:
        try:
            res = fn(seed)
        except Exception as e:
            raise PartialResultsError(f"run with seed {seed} failed: {e}", done, runs) from e
        runs.append(res.metrics() if isinstance(res, EvalResult) else dict(res))
        done.append(seed)
    return summarize(runs, seeds)


# --------------------------------------------------------------------------
# Table output: one row per sequence length, Valence/Arousal/Average per set.

COLUMNS = (("rmse_valence", "Valence"), ("rmse_arousal", "Arousal"), ("rmse_average", "Average"))


def table_rows(grid: dict[int, dict[str, MultiRunSummary]]):
    sets = sorted({s for row in grid.values() for s in row}, key=lambda s: (s != "evaluation", s))
    header = ["seq_len"]
    for s in sets:
        for _, label in COLUMNS:
            header += [f"{s}_{label.lower()}_mean", f"{s}_{label.lower()}_std"]
    rows = []
    for L in sorted(grid, reverse=True):
        row = [L]
        for s in sets:
            summ = grid[L].get(s)
            for key, _ in COLUMNS:
                if summ is None:
                    row += ["", ""]
                else:
                    sd = summ.std[key]
                    row += [f"{summ.mean[key]:.6f}", "" if sd is None else f"{sd:.6f}"]
        rows.append(row)
    return sets, header, rows


def write_table_csv(path, grid, header_comment: str | None = None):
    _, header, rows = table_rows(grid)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def format_table(grid) -> str:
    sets, _, _ = table_rows(grid)
    buf = io.StringIO()
    head = f"{'Seq. length':>11}"
    for s in sets:
        head += " | " + " ".join(f"{label:>13}" for _, label in COLUMNS)
    buf.write(f"{'':>11}" + "".join(f" | {s.capitalize():^41}" for s in sets) + "\n")
    buf.write(head + "\n")
    buf.write("-" * len(head) + "\n")
    for L in sorted(grid, reverse=True):
        line = f"{L:>11}"
        for s in sets:
            summ = grid[L].get(s)
            line += " | " + " ".join(f"{(summ.cell(k) if summ else '-'):>13}" for k, _ in COLUMNS)
        buf.write(line + "\n")
    return buf.getvalue()

