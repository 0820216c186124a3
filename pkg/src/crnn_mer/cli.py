"""Command line interface.

Every command reads an optional config file (``key = value`` lines, or JSON
when the file ends in ``.json``); command-line flags override the file.
Exit codes: 0 success, 1 configuration/usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import audio
from .dataset import DataError, load_dataset, read_feature_csv, write_feature_csv
from .evaluation import (PartialResultsError, evaluate_songs, format_table, multi_run, predict_songs,
                         summarize, write_table_csv)
from .layers import ConfigError
from .model import CRNN, CheckpointError, ModelSpec, count_params, load, save
from .numerics import DimensionError, Rng
from .training import NumericalError, TrainConfig, train

log = logging.getLogger("crnn_mer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = ("cnn_filters", "fc_units", "gru_units", "branched", "maxout_pieces", "bn_eps", "bn_momentum")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
PATH_KEYS = ("features", "annotations", "eval_features", "eval_annotations", "audio_dir",
             "checkpoint", "output", "report")
OTHER_KEYS = ("seeds", "seq_lens", "eval_mode", "n_mels", "feature_dim")
ALL_KEYS = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(PATH_KEYS) | set(OTHER_KEYS)

_INT = {"cnn_filters", "fc_units", "gru_units", "maxout_pieces", "batch_size", "seq_len",
        "max_epochs", "patience", "seed", "n_mels", "feature_dim"}
_BOOL = {"branched"}
_LIST = {"seeds", "seq_lens"}
_STR = set(PATH_KEYS) | {"eval_mode"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _coerce(key, value):
    if key not in ALL_KEYS:
        raise UsageError(f"unknown config key: {key}")
    try:
        if key in _LIST:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [int(v) for v in value]
        if key in _BOOL:
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return s in ("true", "1", "yes")
        if key in _INT:
            return int(value)
        if key in _STR:
            return str(value)
        return float(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad value for {key}: {e}") from None


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: {e}") from None
    else:
        raw = {}
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    return {k: _coerce(k, v) for k, v in raw.items()}


def resolve(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    for k, v in vars(args).items():
        if k in ALL_KEYS and v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def provenance(cfg: dict) -> str:
    return f"config_sha256={config_hash(cfg)} config={json.dumps(cfg, sort_keys=True, default=str)}"


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})


def model_spec(cfg, feature_dim) -> ModelSpec:
    kw = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    return ModelSpec(feature_dim=feature_dim, dropout_rate=train_config(cfg).dropout, **kw)


def _require(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise UsageError(f"missing required setting: {k}")


def _require_dir(cfg, key):
    _require(cfg, key)
    if not Path(cfg[key]).is_dir():
        raise UsageError(f"{key}: directory not found: {cfg[key]}")


def _load_pairs(cfg, fkey="features", akey="annotations"):
    pairs = load_dataset(cfg[fkey], cfg[akey])
    if not pairs:
        raise DataError(f"no songs found in {cfg[fkey]}")
    return pairs


def _prepared_path(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# Commands


def cmd_extract(cfg) -> int:
    _require(cfg, "audio_dir", "output")
    audio_dir = Path(cfg["audio_dir"])
    if not audio_dir.is_dir():
        raise UsageError(f"audio_dir: directory not found: {audio_dir}")
    files = sorted(p for p in audio_dir.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        print(f"no .wav files in {audio_dir}", file=sys.stderr)
        return EXIT_DATA
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    n_mels = cfg.get("n_mels", audio.N_MELS)
    ok = 0
    for f in files:
        try:
            seq = audio.extract_file(f, n_mels=n_mels)
        except audio.AudioError as e:
            log.warning("skipping %s: %s", f.name, e)
            continue
        write_feature_csv(out / f"{seq.song_id}.csv", [seq], provenance(cfg))
        ok += 1
    print(f"extracted {ok}/{len(files)} files to {out}")
    return EXIT_OK if ok else EXIT_DATA


def _train_one(cfg, pairs, seed, seq_len=None):
    tc = train_config({**cfg, "seed": seed, **({"seq_len": seq_len} if seq_len else {})})
    F = pairs[0][0].features.shape[1]
    model = CRNN(model_spec(cfg, F), Rng(seed))
    return train(model, pairs, tc)


def cmd_train(cfg) -> int:
    _require_dir(cfg, "features")
    _require_dir(cfg, "annotations")
    _require(cfg, "checkpoint")
    tc = train_config(cfg)
    pairs = _load_pairs(cfg)
    model, report = _train_one(cfg, pairs, tc.seed)
    save(model, _prepared_path(cfg["checkpoint"]))
    if cfg.get("report"):
        report.write_csv(_prepared_path(cfg["report"]), provenance(cfg))
    best = report.best
    print(f"best epoch {report.best_epoch} (stopped at {report.stopped_epoch}): "
          f"val RMSE valence {best.val_rmse_valence:.4f} arousal {best.val_rmse_arousal:.4f} "
          f"average {best.val_average:.4f}")
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    _require_dir(cfg, "features")
    _require_dir(cfg, "annotations")
    pairs = _load_pairs(cfg)
    eval_pairs = None
    if cfg.get("eval_features") or cfg.get("eval_annotations"):
        _require_dir(cfg, "eval_features")
        _require_dir(cfg, "eval_annotations")
        eval_pairs = _load_pairs(cfg, "eval_features", "eval_annotations")
    seq_lens = cfg.get("seq_lens") or [10, 20, 30, 60]
    seeds = cfg.get("seeds") or [train_config(cfg).seed]
    mode = cfg.get("eval_mode", "pooled")
    grid = {}
    for L in seq_lens:
        eval_runs = []

        def run(seed, L=L):
            model, report = _train_one(cfg, pairs, seed, L)
            best = report.best
            if eval_pairs is not None:
                eval_runs.append(evaluate_songs(model, eval_pairs, L, mode).metrics())
            return {"rmse_valence": best.val_rmse_valence, "rmse_arousal": best.val_rmse_arousal,
                    "rmse_average": best.val_average}

        grid[L] = {"development": multi_run(run, seeds)}
        if eval_pairs is not None:
            grid[L]["evaluation"] = summarize(eval_runs, seeds)
        log.info("seq_len %d done", L)
    print(format_table(grid), end="")
    if cfg.get("output"):
        write_table_csv(_prepared_path(cfg["output"]), grid, provenance(cfg))
    return EXIT_OK


def _load_features(path):
    p = Path(path)
    if p.is_dir():
        seqs = [s for f in sorted(p.glob("*.csv")) for s in read_feature_csv(f)]
    elif p.is_file():
        seqs = read_feature_csv(p)
    else:
        raise UsageError(f"features: path not found: {p}")
    if not seqs:
        raise DataError(f"no feature rows in {p}")
    return seqs


def cmd_predict(cfg) -> int:
    _require(cfg, "checkpoint", "features", "output")
    model = load(cfg["checkpoint"])
    seqs = _load_features(cfg["features"])
    preds = predict_songs(model, seqs, cfg.get("seq_len", TrainConfig.seq_len))
    with open(_prepared_path(cfg["output"]), "w", newline="") as fh:
        fh.write(f"# {provenance(cfg)}\n")
        fh.write("song_id,segment_start_ms,valence,arousal\n")
        for s in seqs:
            for t, (v, a) in zip(s.times_ms, preds[s.song_id]):
                fh.write(f"{s.song_id},{int(t)},{v:.10g},{a:.10g}\n")
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    _require(cfg, "checkpoint")
    _require_dir(cfg, "features")
    _require_dir(cfg, "annotations")
    model = load(cfg["checkpoint"])
    pairs = _load_pairs(cfg)
    res = evaluate_songs(model, pairs, cfg.get("seq_len", TrainConfig.seq_len), cfg.get("eval_mode", "pooled"))
    print(f"{'':>8} {'Valence':>8} {'Arousal':>8} {'Average':>8}")
    print(f"{'RMSE':>8} {res.rmse_valence:8.4f} {res.rmse_arousal:8.4f} {res.rmse_average:8.4f}")
    if cfg.get("output"):
        with open(_prepared_path(cfg["output"]), "w", newline="") as fh:
            fh.write(f"# {provenance(cfg)}\n")
            fh.write("song_id,rmse_valence,rmse_arousal\n")
            for sid, (v, a) in res.per_song.items():
                fh.write(f"{sid},{v:.10g},{a:.10g}\n")
            fh.write(f"__{'pooled' if res.pooled else 'per_song_mean'}__,{res.rmse_valence:.10g},{res.rmse_arousal:.10g}\n")
    return EXIT_OK


def cmd_param_count(cfg) -> int:
    spec = model_spec(cfg, cfg.get("feature_dim", 260))
    print(count_params(spec))
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "param-count": cmd_param_count,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crnn-mer", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value or .json config file")

    def model_flags(sp):
        sp.add_argument("--cnn-filters", dest="cnn_filters", type=int)
        sp.add_argument("--fc-units", dest="fc_units", type=int)
        sp.add_argument("--gru-units", dest="gru_units", type=int)
        sp.add_argument("--maxout-pieces", dest="maxout_pieces", type=int)
        sp.add_argument("--branched", dest="branched", action="store_const", const=True)
        sp.add_argument("--no-branch", dest="branched", action="store_const", const=False,
                        help="single shared branch (CRNN_NB)")
        sp.add_argument("--dropout", type=float)

    def train_flags(sp):
        model_flags(sp)
        for name in ("batch_size", "seq_len", "max_epochs", "patience", "seed"):
            sp.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
        for name in ("learning_rate", "l1", "l2", "val_fraction", "beta1", "beta2", "adam_eps"):
            sp.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
        sp.add_argument("--features", help="directory of feature CSVs")
        sp.add_argument("--annotations", help="directory of annotation CSVs")

    sp = sub.add_parser("extract", help="log mel-band features from a directory of WAV files")
    common(sp)
    sp.add_argument("--audio-dir", dest="audio_dir")
    sp.add_argument("--output", "-o", help="output directory for per-song CSVs")
    sp.add_argument("--n-mels", dest="n_mels", type=int)

    sp = sub.add_parser("train", help="train one model and write its checkpoint")
    common(sp)
    train_flags(sp)
    sp.add_argument("--checkpoint", "-o")
    sp.add_argument("--report", help="per-epoch CSV report")

    sp = sub.add_parser("sweep", help="train over sequence lengths x seeds, print a results table")
    common(sp)
    train_flags(sp)
    sp.add_argument("--seq-lens", dest="seq_lens", help="e.g. 10,20,30,60")
    sp.add_argument("--seeds", help="e.g. 1,2,3,4,5")
    sp.add_argument("--eval-features", dest="eval_features")
    sp.add_argument("--eval-annotations", dest="eval_annotations")
    sp.add_argument("--eval-mode", dest="eval_mode", choices=["pooled", "per_song_mean"])
    sp.add_argument("--output", "-o", help="table CSV")

    sp = sub.add_parser("evaluate", help="RMSE of a checkpoint on annotated songs")
    common(sp)
    sp.add_argument("--checkpoint", "-c")
    sp.add_argument("--features")
    sp.add_argument("--annotations")
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--eval-mode", dest="eval_mode", choices=["pooled", "per_song_mean"])
    sp.add_argument("--output", "-o", help="per-song CSV")

    sp = sub.add_parser("predict", help="per-segment valence/arousal predictions")
    common(sp)
    sp.add_argument("--checkpoint", "-c")
    sp.add_argument("--features", help="feature CSV file or directory")
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--output", "-o")

    sp = sub.add_parser("param-count", help="number of trainable parameters")
    common(sp)
    model_flags(sp)
    sp.add_argument("--feature-dim", dest="feature_dim", type=int)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, CheckpointError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, audio.AudioError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PartialResultsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.__cause__, NumericalError) else EXIT_DATA
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
