"""Command-line interface: gen-data, train, eval, predict, stats.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the long flag names of ``train`` with dashes or underscores, for
example::

    model = bicnn
    kernels = 3,4,5
    lr = 0.001
    runs = 30

Flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .baseline import NgramConfig, load_linear_model, save_linear_model
from .model import BiCnnModel, InvalidConfig, ModelConfig, load_model, save_model
from .pipeline import NgramEncoder, encoder_for_model
from .synthetic import PRESETS, CorpusSpec, InvalidSpec, corpus_stats, format_stats, generate, load_fillers, preset
from .text import Report, read_corpus, write_corpus
from .training import (
    CrossValidation,
    NonFiniteGradient,
    TooFewReports,
    TrainConfig,
    cross_validate,
    evaluate,
    run_once,
    run_seeds,
)

log = logging.getLogger("bicnn")

OUTPUT_ENV = "BICNN_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class VocabularyMismatch(DataError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def output_dir(explicit: str | None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or "runs")


def labels_path(corpus: str | Path) -> Path:
    return Path(f"{corpus}.labels.json")


def read_labels(corpus: str | Path) -> list[str] | None:
    p = labels_path(corpus)
    if not p.exists():
        return None
    names = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise DataError(f"{p}: expected a JSON list of class names")
    return names


def load_reports(path: str | Path) -> list[Report]:
    try:
        reports = read_corpus(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not reports:
        raise DataError(f"{path}: corpus is empty")
    return reports


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_kernels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(k) for k in str(text).split(",") if k.strip())
    except ValueError:
        raise UsageError(f"kernels must be comma-separated integers, got {text!r}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ------------------------------------------------------------ train config

# flag name -> (type, default)
TRAIN_OPTIONS: dict[str, tuple[Any, Any]] = {
    "corpus": (str, None),
    "out": (str, None),
    "model": (str, "bicnn"),
    "kernels": (str, "3,4,5"),
    "feature_maps": (int, 120),
    "embedding_dim": (int, 128),
    "ngram": (int, 3),
    "dropout": (float, 0.5),
    "lr": (float, 0.001),
    "decay_rate": (float, 0.96),
    "decay_interval": (int, 1),
    "epochs": (int, 50),
    "batch_size": (int, 64),
    "l2": (float, 1e-4),
    "patience": (int, 10),
    "runs": (int, 30),
    "seed": (int, 0),
    "workers": (int, 1),
}
MODEL_CHOICES = ("bicnn", "cnn", "ngram")


def effective_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    cfg = {k: d for k, (_, d) in TRAIN_OPTIONS.items()}
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in TRAIN_OPTIONS:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            cfg[key] = value
    for key in TRAIN_OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key, (typ, _) in TRAIN_OPTIONS.items():
        if cfg[key] is not None:
            try:
                cfg[key] = typ(cfg[key])
            except ValueError:
                raise UsageError(f"{key}: cannot parse {cfg[key]!r} as {typ.__name__}") from None
    if cfg["model"] not in MODEL_CHOICES:
        raise UsageError(f"model must be one of {', '.join(MODEL_CHOICES)}")
    if not cfg["corpus"]:
        raise UsageError("a corpus is required (--corpus or corpus = ... in the config file)")
    cfg["kernels"] = ",".join(str(k) for k in parse_kernels(cfg["kernels"]))
    return cfg


def build_configs(cfg: dict[str, Any], num_classes: int):
    tc = TrainConfig(
        batch_size=cfg["batch_size"],
        dropout_p=cfg["dropout"],
        learning_rate=cfg["lr"],
        lr_decay_rate=cfg["decay_rate"],
        lr_decay_interval=cfg["decay_interval"],
        epochs=cfg["epochs"],
        l2_eta=cfg["l2"],
        patience=cfg["patience"],
        num_runs=cfg["runs"],
        seed=cfg["seed"],
    )
    if cfg["model"] == "ngram":
        return NgramConfig(num_classes, n_max=cfg["ngram"]), tc
    mc = ModelConfig(
        num_classes=num_classes,
        kernel_sizes=parse_kernels(cfg["kernels"]),
        feature_maps=cfg["feature_maps"],
        embedding_dim=cfg["embedding_dim"],
        num_channels=2 if cfg["model"] == "bicnn" else 1,
        dropout_p=cfg["dropout"],
    )
    return mc, tc


# ---------------------------------------------------------- model loading


@dataclasses.dataclass
class LoadedModel:
    model: Any
    encoder: Any
    labels: list[str]
    header: dict

    @property
    def num_classes(self) -> int:
        return self.encoder.num_classes


def load_any_model(path: str | Path) -> LoadedModel:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    try:
        if head == b"BICNNMDL":
            model, vocab, header = load_model(path)
            encoder = encoder_for_model(model, vocab)
            if model.embedding.shape[0] != vocab.table_rows:
                raise VocabularyMismatch(f"{path}: embedding rows do not match the stored vocabulary")
        else:
            model, featurizer, header = load_linear_model(path)
            encoder = NgramEncoder(featurizer, model.W.shape[1])
            if model.W.shape[0] != max(featurizer.dimension, 1):
                raise VocabularyMismatch(f"{path}: weight rows do not match the stored gram index")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        if isinstance(exc, VocabularyMismatch):
            raise
        raise DataError(f"{path}: unreadable model file ({exc})") from exc
    labels = header.get("labels") or [str(i) for i in range(encoder.num_classes)]
    return LoadedModel(model, encoder, list(labels), header)


def check_compatible(loaded: LoadedModel, reports: Sequence[Report], corpus: str | Path) -> None:
    bad = sorted({r.label for r in reports if not 0 <= r.label < loaded.num_classes})
    if bad:
        raise VocabularyMismatch(f"{corpus}: labels {bad} are outside the model's {loaded.num_classes} classes")
    names = read_labels(corpus)
    if names is not None and names != loaded.labels:
        raise VocabularyMismatch(f"{labels_path(corpus)}: class names differ from the model's {loaded.labels}")


# ------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = spec_from_file(args.spec, args.seed)
    else:
        spec = preset(args.preset, args.seed)
    if args.size is not None:
        spec = spec.scaled(args.size)
    reports = generate(spec)
    out = Path(args.out) if args.out else output_dir(None) / f"{spec.name}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        write_corpus(reports, out)
        labels_path(out).write_text(json.dumps(spec.class_names, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{out}: {exc.strerror or exc}") from exc
    print(f"wrote {len(reports)} reports to {out}")
    print(format_stats(corpus_stats(reports)))
    return EXIT_OK


def spec_from_file(path: str, seed: int) -> CorpusSpec:
    """JSON spec: optional ``base`` preset plus any CorpusSpec field overrides.

    ``fillers`` may be a list of sentences or the name of a bundled filler file.
    """
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    base = obj.pop("base", None)
    if isinstance(obj.get("fillers"), str):
        obj["fillers"] = load_fillers(obj["fillers"])
    obj.setdefault("seed", seed)
    try:
        if base:
            return dataclasses.replace(preset(base), **obj)
        return CorpusSpec(**obj)
    except TypeError as exc:
        raise InvalidSpec(f"{path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = effective_config(args)
    try:
        # validate with a placeholder class count before touching the data
        build_configs(cfg, 2)
    except (InvalidConfig, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    labels = read_labels(cfg["corpus"])
    reports = load_reports(cfg["corpus"])
    num_classes = len(labels) if labels else max(r.label for r in reports) + 1
    labels = labels or [str(i) for i in range(num_classes)]
    model_config, train_config = build_configs(cfg, num_classes)
    if any(not 0 <= r.label < num_classes for r in reports):
        raise DataError(f"{cfg['corpus']}: labels must lie in [0, {num_classes})")

    out = output_dir(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s on %d reports, %d run(s)", cfg["model"], len(reports), train_config.num_runs)
    if train_config.num_runs == 1:
        cv = CrossValidation([run_once(reports, model_config, train_config, run_seeds(train_config)[0])])
    else:
        cv = cross_validate(reports, model_config, train_config, workers=cfg["workers"])
    best = cv.best()

    extra = {"run_index": best.run_index, "seed": best.result.seed, "test_accuracy": best.result.test_accuracy}
    if isinstance(best.model, BiCnnModel):
        model_path = out / "model.bin"
        save_model(model_path, best.model, best.encoder.vocab, labels=labels, extra=extra)
    else:
        model_path = out / "model.json"
        save_linear_model(model_path, best.model, best.encoder.featurizer, labels=labels, extra=extra)
    write_corpus(best.test_reports, out / "test.jsonl")
    labels_path(out / "test.jsonl").write_text(json.dumps(labels, indent=2) + "\n", encoding="utf-8")
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for run in cv.runs:
            for h in run.result.history:
                fh.write(json.dumps({"run": run.run_index, **dataclasses.asdict(h)}, sort_keys=True) + "\n")
    summary = {
        # the output location is not part of the experiment
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "labels": labels,
        "best_run": best.run_index,
        "best_test": best.result.test.to_dict(),
        **cv.summary(),
    }
    write_json(out / "summary.json", summary)

    acc = summary["test_accuracy"]
    conv = summary["convergence_epoch"]
    print(f"model       {cfg['model']} (kernels {cfg['kernels']}, lr {cfg['lr']})")
    print(f"runs        {summary['num_runs']}")
    print(f"accuracy    mean {acc['mean']:.4f}  median {acc['median']:.4f}  std {acc['std']:.4f}")
    print(f"convergence mean {conv['mean']:.1f} epochs")
    print(f"best run    {best.run_index} (test accuracy {best.result.test_accuracy:.4f})")
    print(f"saved       {model_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    loaded = load_any_model(args.model_file)
    reports = load_reports(args.corpus)
    check_compatible(loaded, reports, args.corpus)
    res = evaluate(loaded.model, loaded.encoder.dataset(reports), loaded.num_classes)

    out = output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted", *loaded.labels])
        for name, row in zip(loaded.labels, res.confusion.tolist()):
            w.writerow([name, *row])
    write_json(out / "eval.json", {"corpus": str(args.corpus), "labels": loaded.labels, **res.to_dict()})

    print(f"accuracy {res.accuracy!r}")
    print(f"loss     {res.loss:.6f}")
    width = max(len(n) for n in loaded.labels)
    print(f"{'class':<{width}}  precision  recall")
    for name, p, r in zip(loaded.labels, res.precision, res.recall):
        print(f"{name:<{width}}  {p:9.4f}  {r:6.4f}")
    return EXIT_OK


def predict_text(loaded: LoadedModel, text: str) -> np.ndarray:
    report = Report.from_text("input", text, 0)
    data = loaded.encoder.dataset([report])
    return loaded.model.predict(data.batch_inputs(np.arange(1)), train=False).values[0]


def cmd_predict(args) -> int:
    loaded = load_any_model(args.model_file)
    text = args.text if args.text is not None else sys.stdin.read()
    probs = predict_text(loaded, text)
    k = int(probs.argmax())
    result = {
        "label": k,
        "class": loaded.labels[k],
        "probabilities": {name: float(p) for name, p in zip(loaded.labels, probs)},
    }
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"{loaded.labels[k]} (label {k})")
        for name, p in zip(loaded.labels, probs):
            print(f"  {p:.6f}  {name}")
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = corpus_stats(load_reports(args.corpus))
    print(json.dumps(stats, indent=2) if args.json else format_stats(stats))
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bicnn", description="Train and apply convolutional report classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic labelled corpus")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--preset", default="mrd-like", help=f"one of {', '.join(PRESETS)}")
    src.add_argument("--spec", help="JSON corpus spec file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, help="rescale class counts to this many reports")
    g.add_argument("--out", help=f"corpus path (default ${OUTPUT_ENV}/<name>.jsonl)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train with repeated random splits")
    t.add_argument("--config", help="key = value config file")
    for key, (typ, default) in TRAIN_OPTIONS.items():
        flag = "--" + key.replace("_", "-")
        kw: dict[str, Any] = {"dest": key, "default": None}
        if key == "model":
            kw["choices"] = MODEL_CHOICES
        elif typ is not str:
            kw["type"] = typ
        t.add_argument(flag, help=f"default {default}" if default is not None else None, **kw)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a corpus")
    e.add_argument("--model-file", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", help=f"directory for confusion.csv (default ${OUTPUT_ENV} or ./runs)")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="classify one report")
    pr.add_argument("--model-file", required=True)
    pr.add_argument("--text", help="report text (read from stdin when omitted)")
    pr.add_argument("--json", action="store_true")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("stats", help="corpus statistics")
    s.add_argument("--corpus", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bicnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidSpec, InvalidConfig) as exc:
        print(f"bicnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TooFewReports) as exc:
        print(f"bicnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NonFiniteLoss, NonFiniteGradient, FloatingPointError) as exc:
        print(f"bicnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        # cross-validation wraps per-run failures; classify by the cause
        cause = exc.__cause__
        if isinstance(cause, (ad.NonFiniteLoss, NonFiniteGradient, FloatingPointError)):
            print(f"bicnn: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(cause, (TooFewReports, ValueError)):
            print(f"bicnn: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
