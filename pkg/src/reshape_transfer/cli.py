"""Command-line pipeline: synth -> ingest -> train -> extract -> classify -> report.

Exit codes: 0 success, 2 data error, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import audio_ingest as ai
from . import cnn_model as cm
from .binio import read_feature_file, read_segment_cache, write_feature_file, write_segment_cache
from .classifiers import METHODS, fit_classifier, save_classifier
from .errors import ConvergenceWarning, DataError, EmptyDataset, ReshapeTransferError, ShapeError
from .evaluation import EvalReport, epoch_curve, evaluate, report_table
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger("reshape_transfer")

EXIT_DATA = 2
EXIT_USAGE = 64

METHOD_NAMES = {"cnn": "CNN", "knn": "KNN", "svm": "SVM", "dt": "DT"}


@dataclass
class RunConfig:
    window_len: int = ai.WINDOW_LEN
    matrix_width: int = ai.MATRIX_WIDTH
    test_fraction: float = ai.TEST_FRACTION
    seed: int = 0
    normalization: str = "standardize"
    stratified: bool = True
    subject_split: bool = False
    resample: bool = False
    architecture: dict = field(default_factory=lambda: cm.Architecture().to_dict())
    train: dict = field(default_factory=lambda: asdict(cm.TrainConfig()))
    knn_k: int = 3
    svm_kernel: str = "rbf"
    svm_c: float = 1.0
    svm_gamma: float | str = "scale"
    svm_tol: float = 1e-3
    dt_prune: bool = False
    dt_val_fraction: float = 0.2

    def validate(self) -> "RunConfig":
        if self.matrix_width ** 2 != self.window_len:
            raise ShapeError(f"matrix_width^2 = {self.matrix_width ** 2} != window_len {self.window_len}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.normalization not in ("none", "standardize", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        return self

    def train_config(self) -> cm.TrainConfig:
        return cm.TrainConfig(**{**self.train, "seed": self.seed})

    def arch(self) -> cm.Architecture:
        return cm.Architecture.from_dict(self.architecture)

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        if "train" in data:
            data["train"] = {**base.train, **data["train"]}
        return cls(**data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- helpers ----------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_split(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(train_index, test_index)`` from a ``segment_id,subset`` CSV."""
    train, test = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            (train if row["subset"] == "train" else test).append(int(row["segment_id"]))
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


def _check_split(n: int, train_idx: np.ndarray, test_idx: np.ndarray) -> None:
    both = np.concatenate([train_idx, test_idx])
    if len(both) != n or len(np.unique(both)) != n or (n and (both.min() < 0 or both.max() >= n)):
        raise DataError(f"split does not partition the {n} cached segments")


# -- commands ---------------------------------------------------------------

def cmd_synth(spec: SyntheticSpec, out) -> dict:
    paths = generate_synthetic(spec, out)
    log.info("synthetic corpus: %d segments -> %s", spec.n_per_class * len(spec.freqs), paths["cache"])
    return paths


def cmd_ingest(manifest, cfg: RunConfig, out) -> dict:
    """Segment every manifest recording, cache segments, write the split."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    segments = ai.ingest_manifest(manifest, cfg.window_len, cfg.resample)
    matrices = [ai.reshape_to_matrix(s, cfg.matrix_width) for s in segments]
    groups = [s.source.subject_id for s in segments] if cfg.subject_split else None
    split = ai.make_split(matrices, cfg.test_fraction, cfg.seed, cfg.stratified, groups)

    cache = out / "segments.rsht"
    write_segment_cache(cache, [s.label for s in segments], np.stack([s.samples for s in segments]))
    subset = np.full(len(segments), "train", dtype=object)
    subset[split.test_index] = "test"
    _write_csv(out / "split.csv", ("segment_id", "subset"), [(i, subset[i]) for i in range(len(segments))])
    _write_csv(out / "segments.csv", ("segment_id", "file_path", "subject_id", "label", "offset"),
               [(i, s.source.file_path, s.source.subject_id, ai.CLASSES[s.label], s.offset)
                for i, s in enumerate(segments)])
    log.info("ingested %d segments: %d train / %d test", len(segments), len(split.train), len(split.test))
    return {"cache": cache, "split": out / "split.csv", "n_segments": len(segments),
            "n_train": len(split.train), "n_test": len(split.test)}


def _load_inputs(cache, normalization: str, width: int):
    labels, samples = read_segment_cache(cache)
    if len(labels) == 0:
        raise EmptyDataset(f"{cache} holds no segments")
    return labels.astype(np.int64), cm.prepare_inputs(samples, width, normalization)


def cmd_train(cache, split_csv, cfg: RunConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    arch = cfg.arch()
    tcfg = cfg.train_config()
    labels, x = _load_inputs(cache, cfg.normalization, arch.input_width)
    train_idx, test_idx = read_split(split_csv)
    _check_split(len(labels), train_idx, test_idx)
    split = ai.DatasetSplit([ai.SampleMatrix(x[i], int(labels[i])) for i in train_idx],
                            [ai.SampleMatrix(x[i], int(labels[i])) for i in test_idx],
                            cfg.seed, train_idx, test_idx)

    model = cm.CNN(arch, seed=cfg.seed, dtype=np.float64 if tcfg.float64 else np.float32,
                   normalization=cfg.normalization)
    ckpt, history = cm.train(model, split, tcfg)
    cm.save_checkpoint(ckpt, out / "checkpoint.rsck")
    (out / "history.csv").write_text(epoch_curve(history), encoding="utf-8")

    report = evaluate(METHOD_NAMES["cnn"], labels[train_idx], model.predict(x[train_idx]),
                      labels[test_idx], model.predict(x[test_idx]), arch.n_classes,
                      {"epochs": tcfg.epochs, "lr": tcfg.lr, "momentum": tcfg.momentum,
                       "batch_size": tcfg.batch_size})
    (out / "report_cnn.json").write_text(report.to_json(), encoding="utf-8")
    return {"checkpoint": out / "checkpoint.rsck", "history": out / "history.csv",
            "report": out / "report_cnn.json"}


def cmd_extract(checkpoint, cache, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = cm.load_checkpoint(checkpoint)
    labels, x = _load_inputs(cache, model.normalization, model.architecture.input_width)
    feats = model.features(x)
    path = out / "features.rsft"
    write_feature_file(path, labels, feats)
    log.info("extracted %d x %d features -> %s", *feats.shape, path)
    return path


def cmd_classify(features, split_csv, method: str, cfg: RunConfig, out) -> EvalReport:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    labels, x = read_feature_file(features)
    labels = labels.astype(np.int64)
    train_idx, test_idx = read_split(split_csv)
    _check_split(len(labels), train_idx, test_idx)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf = fit_classifier(method, x[train_idx], labels[train_idx], k=cfg.knn_k, kernel=cfg.svm_kernel,
                             C=cfg.svm_c, gamma=cfg.svm_gamma, tol=cfg.svm_tol, prune=cfg.dt_prune,
                             val_fraction=cfg.dt_val_fraction, seed=cfg.seed)
    report = evaluate(METHOD_NAMES[method], labels[train_idx], clf.predict(x[train_idx]),
                      labels[test_idx], clf.predict(x[test_idx]), 3, clf.params)
    report.warnings += [str(w.message) for w in caught]
    save_classifier(clf, out / f"model_{method}.rscl")
    (out / f"report_{method}.json").write_text(report.to_json(), encoding="utf-8")
    return report


def cmd_report(report_paths, out=None) -> tuple[str, str]:
    reports = [EvalReport.from_json(Path(p).read_text(encoding="utf-8")) for p in report_paths]
    seen: dict[str, int] = {}
    for r in reports:
        seen[r.method] = seen.get(r.method, 0) + 1
        if seen[r.method] > 1:
            new = f"{r.method}#{seen[r.method]}"
            log.warning("duplicate method name %s renamed to %s", r.method, new)
            r.method = new
    text, csv_text = report_table(reports)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8")
        (out / "table.csv").write_text(csv_text, encoding="utf-8")
    return text, csv_text


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reshape-transfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="run"):
        sp.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
        sp.add_argument("--config", help="JSON RunConfig; flags override its keys")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="generate a pure-tone corpus")
    common(s)
    s.add_argument("--n-per-class", type=int, default=50)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--freqs", default="200,400,800", help="comma-separated tone frequencies in Hz")

    s = sub.add_parser("ingest", help="segment a WAV corpus and split it")
    s.add_argument("manifest")
    common(s)
    s.add_argument("--resample", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--test-fraction", type=float)
    s.add_argument("--subject-split", action=argparse.BooleanOptionalAction, default=None)

    s = sub.add_parser("train", help="train the CNN")
    common(s)
    s.add_argument("--cache")
    s.add_argument("--split")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("extract", help="write last-pooling-layer features")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--cache")

    s = sub.add_parser("classify", help="fit knn/svm/dt on extracted features")
    common(s)
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--features")
    s.add_argument("--split")
    s.add_argument("--k", type=int)
    s.add_argument("--kernel", choices=("linear", "rbf"))
    s.add_argument("--c", type=float)
    s.add_argument("--gamma", help="RBF gamma or 'scale'")
    s.add_argument("--prune", action=argparse.BooleanOptionalAction, default=None)

    s = sub.add_parser("report", help="render a comparison table from report JSON files")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", default=None)
    return p


def _effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "resample": getattr(args, "resample", None),
        "test_fraction": getattr(args, "test_fraction", None),
        "subject_split": getattr(args, "subject_split", None),
        "knn_k": getattr(args, "k", None),
        "svm_kernel": getattr(args, "kernel", None),
        "svm_c": getattr(args, "c", None),
        "dt_prune": getattr(args, "prune", None),
    }
    gamma = getattr(args, "gamma", None)
    if gamma is not None:
        overrides["svm_gamma"] = gamma if gamma == "scale" else float(gamma)
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "epochs", None) is not None:
        cfg.train = {**cfg.train, "epochs": args.epochs}
    return cfg


def _setup_logging(out) -> None:
    root = logging.getLogger("reshape_transfer")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(Path(out) / "run.log", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def run(args) -> int:
    out = Path(args.out) if args.out is not None else None
    if args.command == "report":
        text, _ = cmd_report(args.reports, out)
        sys.stdout.write(text)
        return 0
    cfg = _effective_config(args).validate()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        tag = f"{args.command}_{args.method}" if args.command == "classify" else args.command
        cfg.dump(out / f"config_{tag}.json")
    if args.command == "synth":
        freqs = tuple(float(f) for f in args.freqs.split(","))
        cmd_synth(SyntheticSpec(args.n_per_class, freqs, args.noise, cfg.seed, cfg.window_len), out)
    elif args.command == "ingest":
        cmd_ingest(args.manifest, cfg, out)
    elif args.command == "train":
        res = cmd_train(args.cache or out / "segments.rsht", args.split or out / "split.csv", cfg, out)
        sys.stdout.write(Path(res["report"]).read_text(encoding="utf-8"))
    elif args.command == "extract":
        cmd_extract(args.checkpoint or out / "checkpoint.rsck", args.cache or out / "segments.rsht", out)
    elif args.command == "classify":
        report = cmd_classify(args.features or out / "features.rsft", args.split or out / "split.csv",
                              args.method, cfg, out)
        sys.stdout.write(report.to_json())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.out)
    try:
        return run(args)
    except (ReshapeTransferError, OSError) as e:
        log.error("error: %s", e)
        return EXIT_DATA
    except ValueError as e:
        log.error("invalid configuration: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
