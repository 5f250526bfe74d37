"""Command-line interface.

Subcommands: synth, train, ablate, gradcheck, explain, concepts.  Exit
codes: 0 success, 2 for usage and input problems (bad flags, unreadable or
malformed files), 1 for numeric failures and internal errors.

Option values resolve as: explicit flag > --config JSON file > built-in
default.  ``EMOGRAPH_THREADS`` caps worker threads for evaluation and the
analytics passes; outputs are independent of its value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analytics, figures, ingestion
from .errors import EmographError, NumericError, ParseError
from .fileio import atomic_write_text
from .gradcheck import GROUP_ORDER, run_gradcheck
from .graph import DEFAULT_AFFINITY_DIM, DEFAULT_TAU
from .ingestion import DatasetConfig, with_node_budget
from .model import ABLATION_GRID, MODE_NAMES, ModelDims
from .training import (TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                       train, write_metrics)


class UsageError(EmographError):
    """Bad flags or unusable inputs; mapped to exit code 2."""


SHARED_DEFAULTS = {
    "seed": 0,
    "n": None, "d1": None, "d2": None, "classes": None,
    "da": DEFAULT_AFFINITY_DIM, "layers": 4, "tau": DEFAULT_TAU,
    "lr": 5e-5, "wd": 5e-5, "decay_factor": 0.1, "decay_every": 5,
    "epochs": 50, "batch": 32, "mode": "full",
    "split": "0.8,0.05,0.15",
    "top_k": 10, "group_by": "gold",
    "samples": 512, "rule": "interaction", "noise": 0.1,
    "tolerance": 1e-5,
    "allow_unknown": False, "no_figures": False,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emograph",
        description="Graph-reasoning emotion classifier over precomputed "
                    "object and scene features.",
        epilog="Set EMOGRAPH_THREADS to cap evaluation parallelism "
               "(results do not depend on it).")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, detections=True, out_required=True):
        if detections:
            p.add_argument("--detections", help="detection records, one JSON object per line")
            p.add_argument("--embeddings", help="concept embedding table, word-vector text format")
            p.add_argument("--scenes", help="optional scene feature file (enables scene-only runs)")
            p.add_argument("--allow-unknown", action="store_true", default=None,
                           help="zero out unknown concepts instead of failing")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--config", help="JSON file with default option values")

    def add_dims(p):
        p.add_argument("--n", type=int, help="object slots per image (budget applied if smaller)")
        p.add_argument("--d1", type=int, help="visual/scene feature dimension")
        p.add_argument("--d2", type=int, help="semantic embedding dimension")
        p.add_argument("--da", type=int, help="affinity projection dimension")
        p.add_argument("--layers", type=int, help="graph reasoning depth")
        p.add_argument("--tau", type=float, help="confidence threshold")
        p.add_argument("--classes", type=int, help="number of emotion categories")

    def add_train(p):
        p.add_argument("--lr", type=float, help="base learning rate")
        p.add_argument("--wd", type=float, help="decoupled weight decay")
        p.add_argument("--decay-factor", type=float, help="lr multiplier per schedule step")
        p.add_argument("--decay-every", type=int, help="epochs between schedule steps")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", help="ablation mode name (see ablate table)")
        p.add_argument("--split", help="train,val,test fractions, e.g. 0.8,0.05,0.15")
        p.add_argument("--no-figures", action="store_true", default=None,
                       help="skip chart rendering")

    p_synth = sub.add_parser("synth", help="generate a synthetic planted-structure dataset")
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--samples", type=int, help="number of images")
    p_synth.add_argument("--rule", choices=list(ingestion.PLANTED_RULES),
                         help="planted labelling rule")
    p_synth.add_argument("--noise", type=float, help="feature noise scale")
    p_synth.add_argument("--n", type=int)
    p_synth.add_argument("--d1", type=int)
    p_synth.add_argument("--d2", type=int)
    p_synth.add_argument("--classes", type=int)
    add_io(p_synth, detections=False)

    p_train = sub.add_parser("train", help="train a classifier")
    add_io(p_train)
    add_dims(p_train)
    add_train(p_train)

    p_ablate = sub.add_parser("ablate", help="component study or structural sweep")
    add_io(p_ablate)
    add_dims(p_ablate)
    add_train(p_ablate)
    p_ablate.add_argument("--sweep", choices=["n", "layers"],
                          help="sweep one knob instead of the mode grid")

    p_grad = sub.add_parser("gradcheck", help="verify backward passes by finite differences")
    p_grad.add_argument("--seed", type=int)
    p_grad.add_argument("--tolerance", type=float)
    p_grad.add_argument("--corrupt", choices=GROUP_ORDER,
                        help="deliberately corrupt one group; the check must then fail")
    p_grad.add_argument("--config", help="JSON file with default option values")

    p_explain = sub.add_parser("explain", help="per-object attention report for one image")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--image-id", required=True)
    add_io(p_explain, out_required=False)

    p_concepts = sub.add_parser("concepts", help="category-level concept statistics")
    p_concepts.add_argument("--checkpoint", required=True)
    p_concepts.add_argument("--top-k", type=int, help="rows per category")
    p_concepts.add_argument("--group-by", choices=["gold", "pred"],
                            help="group by gold label or model prediction")
    add_io(p_concepts)

    return parser


class Options:
    """Flag > config-file > default resolution."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.file_values = {}
        config_path = self.args.get("config")
        if config_path:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    self.file_values = json.load(fh)
            except OSError as exc:
                raise UsageError(f"cannot read config file: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(self.file_values, dict):
                raise UsageError("config file must hold a JSON object")

    def get(self, key: str):
        v = self.args.get(key)
        if v is not None:
            return v
        if key in self.file_values:
            return self.file_values[key]
        return SHARED_DEFAULTS.get(key)


def _require_file(path, what: str) -> str:
    if path is None:
        raise UsageError(f"missing required input: {what}")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _parse_split(text: str):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --split value {text!r}") from exc
    if len(parts) != 3:
        raise UsageError("--split needs exactly three comma-separated fractions")
    if abs(sum(parts) - 1.0) > 1e-9 or any(p < 0 for p in parts):
        raise UsageError(f"split fractions must be non-negative and sum to 1, got {text!r}")
    return parts


def _resolve_mode(name: str):
    if name not in MODE_NAMES:
        raise UsageError(f"unknown mode {name!r}; choose from {', '.join(MODE_NAMES)}")
    return MODE_NAMES[name]


def _load_dataset(opts: Options):
    """Load samples from detections+embeddings, or scenes alone."""
    det = opts.get("detections")
    emb = opts.get("embeddings")
    scn = opts.get("scenes")
    scenes = None
    if scn is not None:
        scenes = ingestion.load_scenes(_require_file(scn, "scenes file"))
    if det is not None or emb is not None:
        if det is None or emb is None:
            raise UsageError("--detections and --embeddings must be given together")
        records = ingestion.load_detections(_require_file(det, "detections file"))
        table = ingestion.load_embeddings(_require_file(emb, "embeddings file"))
        samples = ingestion.build_samples(records, table,
                                          unknown_ok=bool(opts.get("allow_unknown")),
                                          scenes=scenes)
    elif scenes is not None:
        mode_name = opts.get("mode")
        if mode_name not in (None, "scene"):
            raise UsageError("scene features alone only support --mode scene")
        d2 = opts.get("d2") or 1
        samples = ingestion.scene_only_samples(scenes, n=opts.get("n") or 1, d2=d2)
    else:
        raise UsageError("no input data: give --detections/--embeddings or --scenes")
    if not samples:
        raise UsageError("input files contain no samples")
    return samples


def _infer_dims(samples, opts: Options) -> ModelDims:
    n0 = len(samples[0].concepts)
    d1 = samples[0].scene.shape[0]
    d2 = samples[0].semantic.shape[1]
    for flag, found in (("d1", d1), ("d2", d2)):
        want = opts.get(flag)
        if want is not None and want != found:
            raise UsageError(f"--{flag}={want} but the data has {flag}={found}")
    max_label = max(s.label for s in samples)
    classes = opts.get("classes")
    if classes is None:
        classes = max_label + 1
    elif classes <= max_label:
        raise UsageError(f"--classes={classes} but labels go up to {max_label}")
    if classes < 2:
        raise UsageError("need at least 2 classes")
    n = opts.get("n") or n0
    return ModelDims(n=n, d1=d1, d2=d2, d_a=opts.get("da"), depth=opts.get("layers"),
                     num_classes=classes, tau=opts.get("tau"))


def _apply_budget(samples, n: int):
    if len(samples[0].concepts) == n:
        return samples
    return [with_node_budget(s, n) for s in samples]


def _train_config(opts: Options, mode) -> TrainConfig:
    return TrainConfig(lr=opts.get("lr"), weight_decay=opts.get("wd"),
                       decay_factor=opts.get("decay_factor"),
                       decay_every=opts.get("decay_every"),
                       epochs=opts.get("epochs"), batch_size=opts.get("batch"),
                       seed=opts.get("seed"), mode=mode)


def _ensure_out(opts: Options) -> str:
    out = opts.get("out")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_synth(opts: Options) -> int:
    out = _ensure_out(opts)
    config = DatasetConfig(
        num_classes=opts.get("classes") or 4,
        n=opts.get("n") or 10,
        d1=opts.get("d1") or 32,
        d2=opts.get("d2") or 16)
    data = ingestion.synthesize(config, rng_seed=opts.get("seed"),
                                planted_rule=opts.get("rule"),
                                n_samples=opts.get("samples"),
                                noise=opts.get("noise"))
    det = os.path.join(out, "detections.jsonl")
    emb = os.path.join(out, "embeddings.txt")
    scn = os.path.join(out, "scenes.jsonl")
    ingestion.write_detections(data.records, det)
    ingestion.write_embeddings(data.table, emb)
    ingestion.write_scenes(data.records, scn)
    print(f"wrote {len(data.records)} records: {det}")
    print(f"wrote {len(data.table.vectors)} embeddings: {emb}")
    print(f"wrote scene features: {scn}")
    print(f"rule={opts.get('rule')} classes={config.num_classes} "
          f"n={config.n} d1={config.d1} d2={config.d2}")
    return 0


def cmd_train(opts: Options) -> int:
    out = _ensure_out(opts)
    samples = _load_dataset(opts)
    dims = _infer_dims(samples, opts)
    samples = _apply_budget(samples, dims.n)
    mode = _resolve_mode(opts.get("mode"))
    split = _parse_split(opts.get("split"))
    tr, va, te = ingestion.split_dataset(samples, split, opts.get("seed"))
    if not tr:
        raise UsageError("train split is empty; adjust --split")
    config = _train_config(opts, mode)

    def progress(row):
        val = "n/a" if row.val_acc is None else f"{row.val_acc:.4f}"
        print(f"epoch {row.epoch:3d}  lr={row.lr:.2e}  loss={row.train_loss:.4f}  "
              f"acc={row.train_acc:.4f}  val={val}")

    result = train(tr, va, dims, config, progress=progress)
    result.restore_best()
    ckpt = os.path.join(out, "checkpoint.bin")
    meta = {"best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc,
            "mode": opts.get("mode")}
    save_checkpoint(ckpt, result.model, meta=meta)
    metrics_path = os.path.join(out, "metrics.jsonl")
    write_metrics(result.metrics, metrics_path)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    if te:
        res = evaluate(result.model, te)
        print(f"test accuracy: {res.accuracy:.4f} ({int(np.trace(res.confusion))}/{len(te)})")
    if result.best_epoch is not None and result.best_val_acc is not None:
        print(f"best epoch: {result.best_epoch} (val acc {result.best_val_acc:.4f})")
    if not opts.get("no_figures") and result.metrics:
        fig = figures.training_curves(result.metrics, os.path.join(out, "training_curves.png"))
        print(f"figure: {fig}")
    return 0


def _run_one_setting(samples, dims, config, split, seed):
    tr, va, te = ingestion.split_dataset(samples, split, seed)
    result = train(tr, va, dims, config)
    result.restore_best()
    train_acc = result.metrics[-1].train_acc if result.metrics else float("nan")
    val_acc = result.best_val_acc if result.best_val_acc is not None else float("nan")
    test_acc = evaluate(result.model, te).accuracy if te else float("nan")
    return train_acc, val_acc, test_acc


def cmd_ablate(opts: Options) -> int:
    out = _ensure_out(opts)
    samples = _load_dataset(opts)
    dims = _infer_dims(samples, opts)
    samples = _apply_budget(samples, dims.n)
    split = _parse_split(opts.get("split"))
    seed = opts.get("seed")
    sweep = opts.args.get("sweep")

    if sweep == "n":
        values = list(range(2, 21, 2))
        rows = []
        for n in values:
            budgeted = _apply_budget(samples, n)
            d = ModelDims(n=n, d1=dims.d1, d2=dims.d2, d_a=dims.d_a, depth=dims.depth,
                          num_classes=dims.num_classes, tau=dims.tau)
            config = _train_config(opts, MODE_NAMES["full"])
            _, _, test_acc = _run_one_setting(budgeted, d, config, split, seed)
            rows.append({"n": n, "test_acc": test_acc})
            print(f"n={n:2d}  test_acc={test_acc:.4f}")
        path = os.path.join(out, "sweep_n.tsv")
        _write_tsv(path, ["n", "test_acc"],
                   [[r["n"], f"{r['test_acc']:.6f}"] for r in rows])
        print(f"table: {path}")
        if not opts.get("no_figures"):
            fig = figures.sweep_curve(values, [r["test_acc"] for r in rows], "object slots",
                                      os.path.join(out, "sweep_n.png"))
            print(f"figure: {fig}")
        return 0

    if sweep == "layers":
        values = list(range(1, 9))
        rows = []
        for depth in values:
            d = ModelDims(n=dims.n, d1=dims.d1, d2=dims.d2, d_a=dims.d_a, depth=depth,
                          num_classes=dims.num_classes, tau=dims.tau)
            config = _train_config(opts, MODE_NAMES["full"])
            _, _, test_acc = _run_one_setting(samples, d, config, split, seed)
            rows.append({"layers": depth, "test_acc": test_acc})
            print(f"layers={depth}  test_acc={test_acc:.4f}")
        path = os.path.join(out, "sweep_layers.tsv")
        _write_tsv(path, ["layers", "test_acc"],
                   [[r["layers"], f"{r['test_acc']:.6f}"] for r in rows])
        print(f"table: {path}")
        if not opts.get("no_figures"):
            fig = figures.sweep_curve(values, [r["test_acc"] for r in rows],
                                      "reasoning depth",
                                      os.path.join(out, "sweep_layers.png"))
            print(f"figure: {fig}")
        return 0

    rows = []
    for name, section, mode in ABLATION_GRID:
        config = _train_config(opts, mode)
        train_acc, val_acc, test_acc = _run_one_setting(samples, dims, config, split, seed)
        rows.append({"section": section, "name": name, "train_acc": train_acc,
                     "val_acc": val_acc, "test_acc": test_acc})
        print(f"{name:<40s} test_acc={test_acc:.4f}")
    path = os.path.join(out, "ablation.tsv")
    _write_tsv(path, ["section", "mode", "train_acc", "val_acc", "test_acc"],
               [[r["section"], r["name"], f"{r['train_acc']:.6f}",
                 f"{r['val_acc']:.6f}", f"{r['test_acc']:.6f}"] for r in rows])
    print(f"table: {path}")
    if not opts.get("no_figures"):
        fig = figures.ablation_bars(rows, os.path.join(out, "ablation.png"))
        print(f"figure: {fig}")
    return 0


def cmd_gradcheck(opts: Options) -> int:
    report = run_gradcheck(seed=opts.get("seed"), tolerance=opts.get("tolerance"),
                           corrupt=opts.args.get("corrupt"))
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradcheck FAILED")
        return 1
    print("gradcheck passed")
    return 0


def _load_model_for_data(opts: Options, samples):
    model, meta = load_checkpoint(_require_file(opts.args.get("checkpoint"), "checkpoint"))
    dims = model.dims
    s = samples[0]
    if s.scene.shape[0] != dims.d1 or s.semantic.shape[1] != dims.d2:
        raise UsageError(f"checkpoint dims (d1={dims.d1}, d2={dims.d2}) do not match data "
                         f"(d1={s.scene.shape[0]}, d2={s.semantic.shape[1]})")
    return model, _apply_budget(samples, dims.n), meta


def cmd_explain(opts: Options) -> int:
    samples = _load_dataset(opts)
    model, samples, _ = _load_model_for_data(opts, samples)
    image_id = opts.args.get("image_id")
    matches = [s for s in samples if s.image_id == image_id]
    if not matches:
        known = ", ".join(s.image_id for s in samples[:5])
        raise UsageError(f"image id {image_id!r} not in the input; first ids: {known}")
    report = analytics.region_report(model, matches[0])
    text = analytics.format_region_report(report)
    print(text, end="")
    out = opts.get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        report_path = os.path.join(out, f"explain_{image_id}.txt")
        atomic_write_text(report_path, text)
        print(f"report: {report_path}")
        if not opts.get("no_figures"):
            fig = figures.attention_bars(report, os.path.join(out, f"explain_{image_id}.png"))
            print(f"figure: {fig}")
    return 0


def cmd_concepts(opts: Options) -> int:
    out = _ensure_out(opts)
    samples = _load_dataset(opts)
    model, samples, _ = _load_model_for_data(opts, samples)
    top_k = opts.get("top_k")
    if top_k is not None and top_k < 1:
        raise UsageError("--top-k must be >= 1")
    rows = analytics.concept_stats(model, samples, group_by=opts.get("group_by"),
                                   top_k=top_k)
    paths = analytics.write_concept_tables(rows, out)
    for p in paths:
        print(f"table: {p}")
    for c in sorted({r.category for r in rows}):
        top = [r.concept for r in rows if r.category == c][:3]
        print(f"category {c}: " + ", ".join(top))
    if not opts.get("no_figures"):
        fig = figures.concept_bars(rows, os.path.join(out, "concepts.png"), top_k=top_k or 10)
        print(f"figure: {fig}")
    return 0


def _write_tsv(path, header, rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(str(x) for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "explain": cmd_explain,
    "concepts": cmd_concepts,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        opts = Options(args)
        return COMMANDS[args.command](opts)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EmographError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
