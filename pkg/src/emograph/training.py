"""Training loop, optimizer, evaluation, checkpoints, metrics.

The optimizer is Adam with bias correction plus decoupled weight decay:
after the Adam update the parameter is shrunk by ``(1 - lr * wd)``, so the
decay never enters the moment estimates.  The learning rate follows a step
schedule, ``lr0 * factor ** (epoch // every)``.

Checkpoints use a custom binary layout (see ``save_checkpoint``) because
the format must be byte-identical across runs; archive formats embed
timestamps and are out.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DimensionError, EmographError, NumericError, ParseError
from .fileio import atomic_write_bytes
from .ingestion import Sample
from .model import (AblationMode, Model, ModelDims, backward, forward, sample_loss)
from .numerics import ParamTensor

CHECKPOINT_MAGIC = b"EMOGRAPH-CKPT1\n"

THREADS_ENV = "EMOGRAPH_THREADS"


def thread_count() -> int:
    """Worker cap from the environment; anything unset or <2 means serial."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded only when the env cap allows it."""
    workers = thread_count()
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyper-parameters; defaults follow the reference protocol."""

    lr: float = 5e-5
    weight_decay: float = 5e-5
    decay_factor: float = 0.1
    decay_every: int = 5
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    mode: AblationMode = field(default_factory=AblationMode)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise DimensionError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DimensionError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise DimensionError("decay_every must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise DimensionError("lr and weight_decay must be non-negative")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: the rate drops by ``decay_factor`` every ``decay_every`` epochs."""
    if epoch < 0:
        raise DimensionError("epoch must be >= 0")
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


def adam_step(params: list[ParamTensor], config: TrainConfig, step_index: int,
              lr: float | None = None) -> None:
    """One optimizer step over ``params`` using their accumulated gradients.

    ``step_index`` is 1-based and drives bias correction.  Decoupled decay
    multiplies the post-update parameter by ``(1 - lr * weight_decay)``.
    """
    if step_index < 1:
        raise DimensionError("step_index is 1-based")
    rate = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** step_index
    bc2 = 1.0 - b2 ** step_index
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {p.name}")
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * g * g
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        p.value -= rate * m_hat / (np.sqrt(v_hat) + config.eps)
        p.value *= 1.0 - rate * config.weight_decay


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    confusion: np.ndarray  # gold x predicted counts
    losses: list[float]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))


def evaluate(model: Model, samples: list[Sample], mode: AblationMode | None = None) -> EvalResult:
    """Accuracy, per-class accuracy, and a gold-by-predicted confusion matrix."""
    if not samples:
        raise EmographError("cannot evaluate on an empty sample set")
    c = model.dims.num_classes

    def run(s: Sample):
        res = forward(s, model, mode)
        return int(np.argmax(res.probs)), sample_loss(res.probs, s.label)

    outputs = parallel_map(run, samples)
    confusion = np.zeros((c, c), dtype=np.int64)
    losses = []
    for s, (pred, loss) in zip(samples, outputs):
        if s.label >= c:
            raise DimensionError(f"label {s.label} >= num_classes {c}")
        confusion[s.label, pred] += 1
        losses.append(loss)
    correct = int(np.trace(confusion))
    per_class = []
    for k in range(c):
        total = int(confusion[k].sum())
        per_class.append(float(confusion[k, k] / total) if total else float("nan"))
    return EvalResult(accuracy=correct / len(samples), per_class=per_class,
                      confusion=confusion, losses=losses)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None

    def to_json(self) -> str:
        row = {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
               "train_acc": self.train_acc, "val_acc": self.val_acc}
        return json.dumps(row, sort_keys=True)


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics]
    best_epoch: int | None
    best_val_acc: float | None
    best_params: dict[str, np.ndarray] | None

    def restore_best(self) -> Model:
        """Load the best-on-validation weights back into the model."""
        if self.best_params is not None:
            self.model.restore(self.best_params)
        return self.model


def train(train_samples: list[Sample], val_samples: list[Sample],
          dims: ModelDims, config: TrainConfig,
          model: Model | None = None,
          metrics_path=None, progress=None) -> TrainResult:
    """Run the full optimization loop.

    Shuffling, batching and initialization all derive from ``config.seed``;
    identical inputs give bit-identical parameters.  The best snapshot is
    the highest validation accuracy, earlier epoch winning ties.  A
    non-finite batch loss aborts with a diagnostic naming the batch.
    """
    if not train_samples:
        raise EmographError("cannot train on an empty dataset")
    if model is None:
        model = Model.build(dims, config.mode, seed=config.seed)
    shuffle_rng = np.random.default_rng(config.seed + 1)

    metrics: list[EpochMetrics] = []
    best_epoch = None
    best_val = None
    best_params = None
    step_index = 0
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            rate = lr_schedule(epoch, config)
            order = shuffle_rng.permutation(len(train_samples))
            epoch_losses = []
            correct = 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_samples[i] for i in order[start:start + config.batch_size]]
                model.zero_grad()
                scale = 1.0 / len(batch)
                batch_total = 0.0
                for s in batch:
                    res = forward(s, model)
                    loss = sample_loss(res.probs, s.label)
                    batch_total += loss
                    epoch_losses.append(loss)
                    if int(np.argmax(res.probs)) == s.label:
                        correct += 1
                    backward(res.cache, s.label, model, scale=scale)
                if not np.isfinite(batch_total):
                    raise NumericError(
                        f"non-finite loss in epoch {epoch}, batch at offset {start}")
                step_index += 1
                adam_step(model.tensors(), config, step_index, lr=rate)
            val_acc = evaluate(model, val_samples).accuracy if val_samples else None
            row = EpochMetrics(epoch=epoch, lr=rate,
                               train_loss=float(np.mean(epoch_losses)),
                               train_acc=correct / len(train_samples),
                               val_acc=val_acc)
            metrics.append(row)
            if metrics_fh:
                metrics_fh.write(row.to_json() + "\n")
            if progress is not None:
                progress(row)
            if val_acc is not None and (best_val is None or val_acc > best_val):
                best_val = val_acc
                best_epoch = epoch
                best_params = model.snapshot()
        if best_params is None and config.epochs > 0:
            # no validation set: treat the final state as best
            best_epoch = config.epochs - 1
            best_params = model.snapshot()
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(model=model, metrics=metrics, best_epoch=best_epoch,
                       best_val_acc=best_val, best_params=best_params)


def write_metrics(metrics: list[EpochMetrics], path) -> None:
    text = "".join(m.to_json() + "\n" for m in metrics)
    atomic_write_bytes(path, text.encode("utf-8"))


def load_metrics(path) -> list[EpochMetrics]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append(EpochMetrics(epoch=obj["epoch"], lr=obj["lr"],
                                         train_loss=obj["train_loss"],
                                         train_acc=obj["train_acc"],
                                         val_acc=obj["val_acc"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(path, lineno, f"bad metrics row: {exc}") from exc
    return rows


def save_checkpoint(path, model: Model, params: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Serialize a model to the versioned binary layout, atomically.

    Layout: magic line, little-endian uint32 header length, UTF-8 JSON
    header (dims, mode, parameter manifest, optional metadata), then each
    parameter's float64 buffer in manifest order, row-major little-endian.
    Identical models produce identical bytes.
    """
    values = params if params is not None else model.snapshot()
    manifest = [{"name": t.name, "shape": list(t.value.shape)} for t in model.tensors()]
    header = {
        "format_version": 1,
        "dims": asdict(model.dims),
        "mode": asdict(model.mode),
        "seed": model.seed,
        "params": manifest,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for entry in manifest:
        arr = np.ascontiguousarray(values[entry["name"]], dtype="<f8")
        if list(arr.shape) != entry["shape"]:
            raise DimensionError(f"checkpoint value {entry['name']} has shape "
                                 f"{arr.shape}, manifest says {entry['shape']}")
        blob += arr.tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild a model (dims, mode, weights) from ``save_checkpoint`` output."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(path, 1, "not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise ParseError(path, 1, "truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(path, 1, f"bad checkpoint header: {exc}") from exc
    off += hlen
    if header.get("format_version") != 1:
        raise ParseError(path, 1, f"unsupported checkpoint version {header.get('format_version')}")
    dims = ModelDims(**header["dims"])
    mode = AblationMode(**header["mode"])
    model = Model.build(dims, mode, seed=header.get("seed", 0))
    by_name = {t.name: t for t in model.tensors()}
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in by_name:
            raise ParseError(path, 1, f"checkpoint parameter {name!r} unknown for this mode")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(data):
            raise ParseError(path, 1, f"checkpoint truncated in parameter {name!r}")
        arr = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(shape)
        if by_name[name].value.shape != arr.shape:
            raise ParseError(path, 1, f"parameter {name!r} shape mismatch")
        by_name[name].value[...] = arr
        off += nbytes
    if off != len(data):
        raise ParseError(path, 1, "trailing bytes after checkpoint payload")
    return model, header.get("meta", {})



def clone_config(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **overrides)
