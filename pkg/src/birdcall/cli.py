"""Batch front-end: ingest, vad-preview, extract, train, evaluate, predict.

The dataset layout is one subdirectory per class under a root, each
holding WAV files. A flat ``key = value`` config file can override any
default; command-line flags override the file. Feature matrices are
cached per record as CSV keyed by a hash of the file content and the
extraction settings, and training always consumes the cache it writes,
so warm and cold runs produce byte-identical models.

Exit codes: 0 success, 1 user error (flags, config), 2 data error
(unreadable dataset, missing model, every record failed).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluation, reporting
from .audio_io import FrameConfig, MonoSignal, read_mono
from .features import (
    FEATURE_SET_NAMES,
    FeatureConfig,
    FeatureMatrix,
    extract_features,
    feature_matrix_to_csv,
    feature_set,
    parse_feature_csv,
)
from .network import (
    ArchConfig,
    SchedulerConfig,
    epoch_log_to_csv,
    load_model,
    predict_record,
    save_model,
    train,
)
from .vad import VadConfig, detect_active_frames, extract_active_signal
from .windowing import build_dataset, record_to_tensor

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "BIRDCALL_CACHE_DIR"
DEFAULT_CACHE_DIR = ".birdcall_cache"
COMMANDS = ("ingest", "vad-preview", "extract", "train", "evaluate", "predict")


class UserError(Exception):
    """Bad invocation or configuration; exits with code 1."""


class DataError(Exception):
    """The data on disk cannot support the request; exits with code 2."""


@dataclass
class RunConfig:
    """Every tunable of the pipeline, with its default value."""

    dataset_root: str = ""
    cache_dir: str = DEFAULT_CACHE_DIR
    feature_set: str = "Set3"
    split: float = 0.8
    seed: int = 0
    window_ms: float = 50.0
    hop_ms: float = 25.0
    vad_threshold: float = 0.6
    silence_floor: float = 1e-4
    rolloff_threshold: float = 0.90
    flux_norm: float = 2.0
    energy_entropy_subframes: int = 10
    mel_filter_count: int = 40
    mfcc_kept: int = 13
    conv_kernels: int = 50
    lstm_units: int = 10
    dense1_units: int = 10
    projection_dim: int = 1000  # 0 disables the projection
    share_cnn_weights: bool = True
    eta_max: float = 1e-5
    eta_min: float = 0.0
    cycle_epochs: int = 20
    total_epochs: int = 200
    batch_size: int = 128

    def validate(self) -> None:
        if not 0.0 < self.split < 1.0:
            raise UserError(f"split must be in (0, 1), got {self.split}")
        if self.feature_set not in FEATURE_SET_NAMES:
            raise UserError(
                f"feature_set must be one of {FEATURE_SET_NAMES}, got {self.feature_set!r}"
            )

    def frame_config(self) -> FrameConfig:
        return FrameConfig(window_ms=self.window_ms, hop_ms=self.hop_ms)

    def vad_config(self) -> VadConfig:
        return VadConfig(
            global_threshold=self.vad_threshold,
            window_ms=self.window_ms,
            hop_ms=self.hop_ms,
            silence_floor=self.silence_floor,
        )

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            rolloff_threshold=self.rolloff_threshold,
            flux_norm=self.flux_norm,
            energy_entropy_subframes=self.energy_entropy_subframes,
            mel_filter_count=self.mel_filter_count,
            mfcc_kept=self.mfcc_kept,
        )

    def arch_config(self, class_count: int, feature_count: int) -> ArchConfig:
        return ArchConfig(
            class_count=class_count,
            feature_count=feature_count,
            conv_kernels=self.conv_kernels,
            projection_dim=self.projection_dim or None,
            lstm_units=self.lstm_units,
            dense1_units=self.dense1_units,
            share_cnn_weights=self.share_cnn_weights,
        )

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(
            eta_max=self.eta_max,
            eta_min=self.eta_min,
            cycle_epochs=self.cycle_epochs,
            total_epochs=self.total_epochs,
        )


def parse_config_file(path) -> dict[str, str]:
    """Read a flat ``key = value`` file; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UserError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise UserError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise UserError(f"config key {key}: {exc}") from exc
    return raw


def build_config(file_values: dict[str, str], overrides: dict) -> RunConfig:
    cfg = RunConfig()
    for key, raw in file_values.items():
        if key not in _FIELD_TYPES:
            raise UserError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class RecordEntry:
    path: str
    class_name: str
    split: str
    duration_seconds: float | None = None
    active_duration_seconds: float | None = None
    frame_count: int | None = None


@dataclass(frozen=True)
class Manifest:
    classes: tuple[str, ...]
    records: tuple[RecordEntry, ...]
    failed: tuple[tuple[str, str], ...] = ()

    def subset(self, split: str) -> list[RecordEntry]:
        return [r for r in self.records if r.split == split]


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def ingest(
    root,
    split: float = 0.8,
    seed: int = 0,
    cfg: RunConfig | None = None,
    analyze: bool = False,
) -> Manifest:
    """Walk ``root/<class>/*.wav`` and build a stratified train/test split.

    The walk is path-sorted and the per-class split is seeded, so the
    same (root, split, seed) always yields the same assignment; the
    larger share goes to train via round-half-up. With ``analyze`` the
    manifest also carries durations and frame counts, and unreadable
    files land in the ``failed`` section instead of aborting the run.
    """
    root = Path(root)
    if not root.is_dir():
        raise UserError(f"dataset root {root} is not a directory")

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    records: list[RecordEntry] = []
    failed: list[tuple[str, str]] = []
    classes: list[str] = []
    for class_dir in class_dirs:
        files = sorted(class_dir.glob("*.wav"))
        if not files:
            logger.warning("class directory %s has no wav files; excluded", class_dir)
            continue
        classes.append(class_dir.name)
        n_train = _round_half_up(len(files) * split)
        order = rng.permutation(len(files))
        train_positions = set(order[:n_train].tolist())
        for i, path in enumerate(files):
            assignment = "train" if i in train_positions else "test"
            entry = RecordEntry(
                path=str(path), class_name=class_dir.name, split=assignment
            )
            if analyze:
                try:
                    entry = _analyze_record(entry, cfg or RunConfig())
                except Exception as exc:  # noqa: BLE001 - a bad file must not kill ingest
                    failed.append((str(path), str(exc)))
                    continue
            records.append(entry)

    if not classes:
        raise DataError(f"no class directories with wav files under {root}")
    return Manifest(classes=tuple(classes), records=tuple(records), failed=tuple(failed))


def _analyze_record(entry: RecordEntry, cfg: RunConfig) -> RecordEntry:
    signal = read_mono(entry.path)
    active = _active_signal(signal, cfg, entry.path)
    series_frames = 0
    if len(active):
        from .audio_io import frame_signal

        try:
            series_frames = frame_signal(active, cfg.frame_config()).n_frames
        except Exception:
            series_frames = 0
    return dataclasses.replace(
        entry,
        duration_seconds=signal.duration_seconds,
        active_duration_seconds=active.duration_seconds,
        frame_count=series_frames,
    )


def manifest_to_json(manifest: Manifest) -> str:
    payload = {
        "classes": list(manifest.classes),
        "records": [dataclasses.asdict(r) for r in manifest.records],
        "failed": [{"path": p, "error": e} for p, e in manifest.failed],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _active_signal(signal: MonoSignal, cfg: RunConfig, label: str) -> MonoSignal:
    mask = detect_active_frames(signal, cfg.vad_config())
    active = extract_active_signal(signal, mask)
    if len(active) == 0:
        logger.warning("%s: no active frames; falling back to the raw signal", label)
        return signal
    return active


def _extraction_key(path, cfg: RunConfig) -> str:
    relevant = {
        "feature_set": cfg.feature_set,
        "window_ms": cfg.window_ms,
        "hop_ms": cfg.hop_ms,
        "vad_threshold": cfg.vad_threshold,
        "silence_floor": cfg.silence_floor,
        "rolloff_threshold": cfg.rolloff_threshold,
        "flux_norm": cfg.flux_norm,
        "energy_entropy_subframes": cfg.energy_entropy_subframes,
        "mel_filter_count": cfg.mel_filter_count,
        "mfcc_kept": cfg.mfcc_kept,
    }
    digest = hashlib.sha256()
    digest.update(json.dumps(relevant, sort_keys=True).encode())
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()[:16]


def extract_cached(path, cfg: RunConfig) -> tuple[tuple[str, ...], np.ndarray]:
    """Feature matrix of one record, always served through the CSV cache.

    Both cold and warm paths parse the same rendered text, so the values
    a model trains on never depend on whether the cache existed.
    """
    cache_file = Path(cfg.cache_dir) / f"{Path(path).stem}.{_extraction_key(path, cfg)}.features.csv"
    if cache_file.exists():
        logger.info("feature cache hit: %s", cache_file)
        return parse_feature_csv(cache_file.read_text())

    signal = read_mono(path)
    active = _active_signal(signal, cfg, str(path))
    matrix = extract_features(
        active, cfg.frame_config(), cfg.feature_config(), feature_set(cfg.feature_set)
    )
    text = feature_matrix_to_csv(matrix.feature_names, matrix.values)
    reporting.write_text_atomic(cache_file, text)
    logger.info("extracted %s -> %s", path, cache_file)
    return parse_feature_csv(text)


def _extract_subset(
    manifest: Manifest, subset: str, cfg: RunConfig, jobs: int
) -> tuple[list[tuple[RecordEntry, tuple[str, ...], np.ndarray]], list[tuple[str, str]]]:
    entries = manifest.subset(subset)
    results: list = [None] * len(entries)
    failures: list[tuple[str, str]] = []

    def work(i_entry):
        i, entry = i_entry
        return i, extract_cached(entry.path, cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(work, (i, e)) for i, e in enumerate(entries)]
            for i, future in enumerate(futures):
                try:
                    idx, payload = future.result()
                    results[idx] = payload
                except Exception as exc:  # noqa: BLE001
                    failures.append((entries[i].path, str(exc)))
    else:
        for i, entry in enumerate(entries):
            try:
                _, payload = work((i, entry))
                results[i] = payload
            except Exception as exc:  # noqa: BLE001
                failures.append((entry.path, str(exc)))

    extracted = [
        (entry, names_values[0], names_values[1])
        for entry, names_values in zip(entries, results)
        if names_values is not None
    ]
    for path, error in failures:
        logger.warning("skipping %s: %s", path, error)
    return extracted, failures


def _samples_for(
    manifest: Manifest, subset: str, cfg: RunConfig, jobs: int
):
    extracted, failures = _extract_subset(manifest, subset, cfg, jobs)
    if not extracted:
        raise DataError(f"no usable {subset} records (failures: {len(failures)})")
    label_of = {name: i for i, name in enumerate(manifest.classes)}
    pairs = [
        (FeatureMatrix(values=values, feature_names=names), label_of[entry.class_name])
        for entry, names, values in extracted
    ]
    ids = [entry.path for entry, _, _ in extracted]
    return pairs, ids


def cmd_ingest(cfg: RunConfig, out_dir: Path) -> int:
    manifest = ingest(cfg.dataset_root, cfg.split, cfg.seed, cfg, analyze=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    reporting.write_text_atomic(manifest_path, manifest_to_json(manifest))
    n_train = len(manifest.subset("train"))
    n_test = len(manifest.subset("test"))
    print(f"classes: {len(manifest.classes)} ({', '.join(manifest.classes)})")
    print(f"records: {len(manifest.records)} ({n_train} train / {n_test} test)")
    if manifest.failed:
        print(f"failed: {len(manifest.failed)} (see manifest)")
        for path, error in manifest.failed:
            logger.warning("failed %s: %s", path, error)
    print(f"manifest written to {manifest_path}")
    return 0


def cmd_vad_preview(cfg: RunConfig, out_dir: Path, files: Sequence[str]) -> int:
    if not files:
        raise UserError("vad-preview needs at least one wav file")
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for name in files:
        try:
            signal = read_mono(name)
            stem = Path(name).stem
            mask = reporting.preview_vad(
                signal,
                cfg.vad_config(),
                out_dir / f"{stem}.vad.csv",
                out_dir / f"{stem}.vad.png",
            )
            active = int(mask.active.sum())
            print(f"{name}: {active}/{mask.n_frames} frames active")
        except Exception as exc:  # noqa: BLE001
            failures += 1
            print(f"{name}: ERROR {exc}", file=sys.stderr)
    if failures == len(files):
        raise DataError("every input failed VAD preview")
    return 0


def cmd_extract(cfg: RunConfig, jobs: int) -> int:
    manifest = ingest(cfg.dataset_root, cfg.split, cfg.seed, cfg)
    total_failures = []
    for subset in ("train", "test"):
        extracted, failures = _extract_subset(manifest, subset, cfg, jobs)
        total_failures.extend(failures)
        print(f"{subset}: {len(extracted)} records cached under {cfg.cache_dir}")
    if total_failures and len(total_failures) == len(manifest.records):
        raise DataError("every record failed feature extraction")
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path, jobs: int, model_name: str) -> int:
    manifest = ingest(cfg.dataset_root, cfg.split, cfg.seed, cfg)
    pairs, ids = _samples_for(manifest, "train", cfg, jobs)
    samples = build_dataset(pairs, ids)
    n_features = len(pairs[0][0].feature_names)
    arch = cfg.arch_config(len(manifest.classes), n_features)
    sched = cfg.scheduler_config()
    logger.info(
        "training on %d samples (%d records), %d classes, %d features",
        len(samples), len(pairs), arch.class_count, n_features,
    )
    params, log = train(samples, arch, sched, cfg.seed, cfg.batch_size)

    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / model_name
    save_model(model_path, params, cfg.feature_set, manifest.classes)
    reporting.write_text_atomic(out_dir / "epoch_log.csv", epoch_log_to_csv(log))
    reporting.save_training_figure(log, out_dir / "training_curves.png")
    final = log[-1]
    print(f"trained {final.epoch + 1} epochs; final loss {final.loss:.6f}, "
          f"train accuracy {final.accuracy:.4f}")
    print(f"model written to {model_path}")
    return 0


def cmd_evaluate(cfg: RunConfig, out_dir: Path, jobs: int, model_path: str) -> int:
    if not Path(model_path).exists():
        raise DataError(f"model file {model_path} does not exist")
    bundle = load_model(model_path)
    if bundle.feature_set != cfg.feature_set:
        logger.info(
            "model was trained with %s; using it instead of configured %s",
            bundle.feature_set, cfg.feature_set,
        )
        cfg = dataclasses.replace(cfg, feature_set=bundle.feature_set)
    manifest = ingest(cfg.dataset_root, cfg.split, cfg.seed, cfg)
    if tuple(manifest.classes) != bundle.class_names:
        raise DataError(
            f"dataset classes {manifest.classes} do not match the model's "
            f"{bundle.class_names}"
        )
    pairs, ids = _samples_for(manifest, "test", cfg, jobs)
    tensors = [
        record_to_tensor(matrix, rid, label)
        for (matrix, label), rid in zip(pairs, ids)
    ]
    report = evaluation.evaluate(bundle.params, tensors, bundle.class_names)

    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_text_atomic(out_dir / "metrics.csv", evaluation.metrics_to_csv(report))
    table = evaluation.format_metrics_table(report)
    reporting.write_text_atomic(out_dir / "metrics.txt", table)
    reporting.save_metrics_figure(report, out_dir / "metrics.png")
    print(table, end="")
    print(f"reports written to {out_dir}")
    return 0


def cmd_predict(cfg: RunConfig, model_path: str, files: Sequence[str]) -> int:
    if not files:
        raise UserError("predict needs at least one wav file")
    if not Path(model_path).exists():
        raise DataError(f"model file {model_path} does not exist")
    bundle = load_model(model_path)
    cfg = dataclasses.replace(cfg, feature_set=bundle.feature_set)
    successes = 0
    for name in files:
        try:
            names, values = extract_cached(name, cfg)
            matrix = FeatureMatrix(values=values, feature_names=names)
            tensor = record_to_tensor(matrix, name, label=-1)
            cls, probs = predict_record(bundle.params, tensor.images)
            probs_text = ",".join(f"{p:.6f}" for p in probs)
            print(f"{name}\t{bundle.class_names[cls]}\t{probs_text}")
            successes += 1
        except Exception as exc:  # noqa: BLE001
            print(f"{name}\tERROR\t{exc}", file=sys.stderr)
    if successes == 0:
        raise DataError("every record failed prediction")
    return 0


class _Parser(argparse.ArgumentParser):
    # user errors exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="birdcall", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--cache-dir", help=f"feature cache directory (or ${CACHE_DIR_ENV})")
        p.add_argument("--out", default="birdcall_out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed")

    p_ingest = sub.add_parser("ingest", help="scan the dataset and write a manifest")
    common(p_ingest)
    p_ingest.add_argument("--root", help="dataset root (class subdirectories)")
    p_ingest.add_argument("--split", type=float, help="train fraction, default 0.8")

    p_vad = sub.add_parser("vad-preview", help="emit activity masks and figures")
    common(p_vad)
    p_vad.add_argument("files", nargs="+", help="wav files")

    p_extract = sub.add_parser("extract", help="cache feature matrices for a dataset")
    common(p_extract)
    p_extract.add_argument("--root", help="dataset root")
    p_extract.add_argument("--set", dest="feature_set", help="Set1..Set5")
    p_extract.add_argument("--split", type=float)
    p_extract.add_argument("--jobs", type=int, default=1, help="extraction workers")

    p_train = sub.add_parser("train", help="train a model on the train split")
    common(p_train)
    p_train.add_argument("--root", help="dataset root")
    p_train.add_argument("--set", dest="feature_set", help="Set1..Set5")
    p_train.add_argument("--split", type=float)
    p_train.add_argument("--epochs", type=int, help="override total epochs")
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--jobs", type=int, default=1)
    p_train.add_argument("--model-name", default="model.bcm")

    p_eval = sub.add_parser("evaluate", help="metric report on the test split")
    common(p_eval)
    p_eval.add_argument("--root", help="dataset root")
    p_eval.add_argument("--model", required=True, help="trained model file")
    p_eval.add_argument("--split", type=float)
    p_eval.add_argument("--jobs", type=int, default=1)

    p_pred = sub.add_parser("predict", help="classify individual recordings")
    common(p_pred)
    p_pred.add_argument("--model", required=True, help="trained model file")
    p_pred.add_argument("files", nargs="+", help="wav files")
    return parser


def _config_from_args(args) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "dataset_root": getattr(args, "root", None),
        "feature_set": getattr(args, "feature_set", None),
        "split": getattr(args, "split", None),
        "seed": getattr(args, "seed", None),
        "total_epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    cache_dir = args.cache_dir or os.environ.get(CACHE_DIR_ENV)
    if cache_dir:
        overrides["cache_dir"] = cache_dir
    return build_config(file_values, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config_from_args(args)
        out_dir = Path(args.out)
        if args.command == "ingest":
            _require_root(cfg)
            return cmd_ingest(cfg, out_dir)
        if args.command == "vad-preview":
            return cmd_vad_preview(cfg, out_dir, args.files)
        if args.command == "extract":
            _require_root(cfg)
            return cmd_extract(cfg, args.jobs)
        if args.command == "train":
            _require_root(cfg)
            return cmd_train(cfg, out_dir, args.jobs, args.model_name)
        if args.command == "evaluate":
            _require_root(cfg)
            return cmd_evaluate(cfg, out_dir, args.jobs, args.model)
        if args.command == "predict":
            return cmd_predict(cfg, args.model, args.files)
        raise UserError(f"unknown command {args.command!r}")
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def _require_root(cfg: RunConfig) -> None:
    if not cfg.dataset_root:
        raise UserError("no dataset root given (use --root or the config file)")


if __name__ == "__main__":
    raise SystemExit(main())
