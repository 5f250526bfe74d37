"""Data ingestion: detection records, embedding tables, scene features.

File formats
------------
Detections: newline-delimited JSON, one record per line with keys
``image_id`` (str), ``label`` (int), ``scene`` (d1 floats) and ``objects``
(exactly N entries of ``{"concept", "confidence", "visual"}``).  Extra
object keys such as ``attribute`` are accepted and ignored.

Embeddings: plain text, one ``token f1 f2 ... f_d2`` line per token
(the usual pretrained-word-vector layout).

Scenes (optional): newline-delimited JSON with keys ``image_id``,
``label``, ``scene``; used either as an override for the inline scene
vectors or as a standalone input for scene-only runs.

All floats are written as decimal text via ``repr`` and therefore
round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmographError, ParseError, UnknownConceptError
from .fileio import atomic_write_text

PAD_CONCEPT = "<pad>"

DEFAULT_FRACTIONS = (0.8, 0.05, 0.15)


@dataclass
class ObjectSlot:
    concept: str
    confidence: float
    visual: np.ndarray


@dataclass
class DetectionRecord:
    """One image's detector output: exactly N object slots plus scene/label."""

    image_id: str
    label: int
    scene: np.ndarray
    objects: list[ObjectSlot]


@dataclass
class EmbeddingTable:
    """Concept-string -> d2-dim vector.  Missing concepts raise, never zero.

    ``PAD_CONCEPT`` is a reserved token that always resolves to the zero
    vector; multi-token concepts resolve to the mean of their known token
    vectors.
    """

    vectors: dict[str, np.ndarray]
    dim: int

    def resolvable(self, concept: str) -> bool:
        if concept == PAD_CONCEPT:
            return True
        return any(tok in self.vectors for tok in concept.split())

    def lookup(self, concept: str) -> np.ndarray:
        if concept == PAD_CONCEPT:
            return np.zeros(self.dim)
        toks = [t for t in concept.split() if t in self.vectors]
        if not toks:
            raise UnknownConceptError(f"no embedding for concept {concept!r}")
        return np.mean([self.vectors[t] for t in toks], axis=0)


@dataclass
class Sample:
    """A fully assembled training sample."""

    image_id: str
    concepts: list[str]
    confidences: np.ndarray   # N, in [0, 1]
    visual: np.ndarray        # N x d1
    semantic: np.ndarray      # N x d2
    scene: np.ndarray         # d1
    label: int


@dataclass
class DatasetConfig:
    """Dimensions and split fractions; defaults mirror the reference setup."""

    num_classes: int
    n: int = 10
    d1: int = 2048
    d2: int = 300
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError("node count must be >= 1")
        if self.num_classes < 2:
            raise DimensionError("need at least 2 classes")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DimensionError(f"split fractions must sum to 1, got {self.fractions}")

    @classmethod
    def desk_scale(cls, num_classes: int = 4) -> "DatasetConfig":
        """Small dimensions that exercise the math without 2048-dim tensors."""
        return cls(num_classes=num_classes, n=10, d1=32, d2=16)


def _parse_float_list(value, length, path, line, what) -> np.ndarray:
    if not isinstance(value, list):
        raise ParseError(path, line, f"{what} must be a list of floats")
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1 or (length is not None and arr.shape[0] != length):
        raise ParseError(path, line, f"{what} has length {arr.shape[0]}, expected {length}")
    if not np.isfinite(arr).all():
        raise ParseError(path, line, f"{what} contains non-finite values")
    return arr


def load_detections(path, n: int | None = None, d1: int | None = None) -> list[DetectionRecord]:
    """Read and validate a detection file; dims are inferred when not given."""
    records: list[DetectionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid record syntax: {exc.msg}") from exc
            for key in ("image_id", "label", "scene", "objects"):
                if key not in obj:
                    raise ParseError(path, lineno, f"missing key {key!r}")
            scene = _parse_float_list(obj["scene"], d1, path, lineno, "scene")
            if d1 is None:
                d1 = scene.shape[0]
            slots_raw = obj["objects"]
            if n is None:
                n = len(slots_raw)
            if len(slots_raw) != n:
                raise ParseError(path, lineno, f"record has {len(slots_raw)} object slots, expected {n}")
            slots = []
            for k, s in enumerate(slots_raw):
                for key in ("concept", "confidence", "visual"):
                    if key not in s:
                        raise ParseError(path, lineno, f"object {k} missing key {key!r}")
                conf = float(s["confidence"])
                if not 0.0 <= conf <= 1.0:
                    raise ParseError(path, lineno, f"object {k} confidence {conf} out of range [0, 1]")
                visual = _parse_float_list(s["visual"], d1, path, lineno, f"object {k} visual")
                slots.append(ObjectSlot(str(s["concept"]), conf, visual))
            label = obj["label"]
            if not isinstance(label, int) or label < 0:
                raise ParseError(path, lineno, f"label must be a non-negative integer, got {label!r}")
            records.append(DetectionRecord(str(obj["image_id"]), label, scene, slots))
    return records


def write_detections(records: list[DetectionRecord], path) -> None:
    """Write detection records in the documented line format, atomically."""
    lines = []
    for r in records:
        lines.append(json.dumps({
            "image_id": r.image_id,
            "label": int(r.label),
            "scene": [float(x) for x in r.scene],
            "objects": [
                {"concept": s.concept,
                 "confidence": float(s.confidence),
                 "visual": [float(x) for x in s.visual]}
                for s in r.objects
            ],
        }))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    """Read a word-vector text file; every line must share one dimension."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            parts = raw.split()
            if len(parts) < 2:
                raise ParseError(path, lineno, "expected 'token f1 f2 ...'")
            token = parts[0]
            try:
                vec = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad float: {exc}") from exc
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ParseError(path, lineno, f"vector length {vec.shape[0]} != table dim {dim}")
            vectors[token] = vec
    if dim is None:
        raise ParseError(path, 0, "empty embedding table")
    return EmbeddingTable(vectors, dim)


def write_embeddings(table: EmbeddingTable, path) -> None:
    lines = [f"{tok} " + " ".join(repr(float(x)) for x in vec)
             for tok, vec in table.vectors.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_scenes(path) -> dict[str, tuple[int, np.ndarray]]:
    """Read a scenes file into image_id -> (label, scene vector)."""
    out: dict[str, tuple[int, np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid record syntax: {exc.msg}") from exc
            for key in ("image_id", "label", "scene"):
                if key not in obj:
                    raise ParseError(path, lineno, f"missing key {key!r}")
            scene = _parse_float_list(obj["scene"], None, path, lineno, "scene")
            out[str(obj["image_id"])] = (int(obj["label"]), scene)
    return out


def write_scenes(records: list[DetectionRecord], path) -> None:
    lines = [json.dumps({"image_id": r.image_id, "label": int(r.label),
                         "scene": [float(x) for x in r.scene]})
             for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def embed_concepts(record: DetectionRecord, table: EmbeddingTable) -> np.ndarray:
    """Row i of the result is the embedding of the i-th slot's concept."""
    return np.stack([table.lookup(s.concept) for s in record.objects])


def build_samples(records: list[DetectionRecord], table: EmbeddingTable,
                  unknown_ok: bool = False,
                  scenes: dict[str, tuple[int, np.ndarray]] | None = None) -> list[Sample]:
    """Assemble samples from records plus an embedding table.

    With ``unknown_ok`` unresolvable concepts become zero vectors with
    confidence forced to 0 so downstream filtering drops them; otherwise
    they raise.  ``scenes`` overrides inline scene vectors by image id.
    """
    samples = []
    for r in records:
        semantic = np.zeros((len(r.objects), table.dim))
        confidences = np.array([s.confidence for s in r.objects], dtype=np.float64)
        for i, slot in enumerate(r.objects):
            if table.resolvable(slot.concept):
                semantic[i] = table.lookup(slot.concept)
            elif unknown_ok:
                confidences[i] = 0.0
            else:
                raise UnknownConceptError(f"no embedding for concept {slot.concept!r} "
                                          f"(image {r.image_id})")
        scene = r.scene
        if scenes is not None and r.image_id in scenes:
            scene = scenes[r.image_id][1]
        samples.append(Sample(
            image_id=r.image_id,
            concepts=[s.concept for s in r.objects],
            confidences=confidences,
            visual=np.stack([s.visual for s in r.objects]),
            semantic=semantic,
            scene=scene,
            label=r.label,
        ))
    return samples


def scene_only_samples(scenes: dict[str, tuple[int, np.ndarray]],
                       n: int, d2: int) -> list[Sample]:
    """Build object-free samples (all slots padded) from a scenes file."""
    samples = []
    for image_id, (label, scene) in scenes.items():
        d1 = scene.shape[0]
        samples.append(Sample(
            image_id=image_id,
            concepts=[PAD_CONCEPT] * n,
            confidences=np.zeros(n),
            visual=np.zeros((n, d1)),
            semantic=np.zeros((n, d2)),
            scene=scene,
            label=label,
        ))
    return samples


def split_dataset(samples: list[Sample], fractions, rng_seed: int):
    """Disjoint, exhaustive (train, val, test) split, deterministic per seed."""
    if not samples:
        raise EmographError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DimensionError(f"invalid split fractions {fractions}")
    n = len(samples)
    order = np.random.default_rng(rng_seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


def with_node_budget(sample: Sample, n: int) -> Sample:
    """Keep the n highest-confidence slots (stable order); pad if n exceeds N."""
    cur = len(sample.concepts)
    if n == cur:
        return sample
    if n < cur:
        keep = np.argsort(-sample.confidences, kind="stable")[:n]
        keep = np.sort(keep)
        return Sample(
            image_id=sample.image_id,
            concepts=[sample.concepts[i] for i in keep],
            confidences=sample.confidences[keep],
            visual=sample.visual[keep],
            semantic=sample.semantic[keep],
            scene=sample.scene,
            label=sample.label,
        )
    pad = n - cur
    d1 = sample.visual.shape[1]
    d2 = sample.semantic.shape[1]
    return Sample(
        image_id=sample.image_id,
        concepts=sample.concepts + [PAD_CONCEPT] * pad,
        confidences=np.concatenate([sample.confidences, np.zeros(pad)]),
        visual=np.vstack([sample.visual, np.zeros((pad, d1))]),
        semantic=np.vstack([sample.semantic, np.zeros((pad, d2))]),
        scene=sample.scene,
        label=sample.label,
    )


# ---------------------------------------------------------------------------
# Synthetic data with planted structure.
#
# Rules:
#   "interaction" (default): every image carries one bright-context payload
#     and one dark-context payload; the scene cluster decides which of the
#     two determines the label.  Neither the scene alone, the object bag
#     alone, nor any single object identifies the class.
#   "pair": an activator object decides which payload carries the label;
#     the scene is uninformative noise.  The class is a function of object
#     co-occurrence only.
#   "scene": the label is the scene cluster id; objects are uninformative.
#
# In every rule the highest-confidence slot is always the ubiquitous filler
# "person", so a top-1-object view carries no label information.
# ---------------------------------------------------------------------------

FILLER_CONCEPTS = ["person", "tree", "sky", "grass", "building", "road", "water", "cloud"]
BRIGHT_PAYLOADS = ["balloon", "cake", "kite", "guitar", "lantern", "fountain", "garden", "rainbow"]
DARK_PAYLOADS = ["knife", "coffin", "wreck", "spider", "cage", "storm", "ruin", "snake"]
ACTIVATOR_CONCEPTS = ["bride", "hearse"]

PLANTED_RULES = ("interaction", "pair", "scene")


@dataclass
class SyntheticData:
    """Generated records plus the embedding table that resolves them."""

    records: list[DetectionRecord]
    table: EmbeddingTable
    samples: list[Sample] = field(default_factory=list)


def synthetic_vocabulary(num_classes: int) -> list[str]:
    if num_classes > len(BRIGHT_PAYLOADS):
        raise DimensionError(f"synthetic generator supports at most {len(BRIGHT_PAYLOADS)} classes")
    vocab = (FILLER_CONCEPTS + BRIGHT_PAYLOADS[:num_classes]
             + DARK_PAYLOADS[:num_classes] + ACTIVATOR_CONCEPTS)
    return vocab + [PAD_CONCEPT]


def synthesize(config: DatasetConfig, rng_seed: int, planted_rule: str = "interaction",
               n_samples: int = 512, noise: float = 0.1) -> SyntheticData:
    """Generate records, an embedding table, and assembled samples."""
    if planted_rule not in PLANTED_RULES:
        raise EmographError(f"unknown planted rule {planted_rule!r}; choose from {PLANTED_RULES}")
    if config.n < 4:
        raise DimensionError("synthetic generator needs at least 4 object slots")
    rng = np.random.default_rng(rng_seed)
    c = config.num_classes
    vocab = synthetic_vocabulary(c)

    semantic_vecs = {tok: (np.zeros(config.d2) if tok == PAD_CONCEPT
                           else rng.normal(0.0, 0.5, config.d2))
                     for tok in vocab}
    table = EmbeddingTable(semantic_vecs, config.d2)
    visual_proto = {tok: rng.normal(0.0, 1.0, config.d1) / np.sqrt(config.d1)
                    for tok in vocab}
    n_scene_clusters = c if planted_rule == "scene" else 2
    scene_proto = rng.normal(0.0, 1.0, (n_scene_clusters, config.d1)) / np.sqrt(config.d1)

    bright = BRIGHT_PAYLOADS[:c]
    dark = DARK_PAYLOADS[:c]

    records = []
    for idx in range(n_samples):
        ctx = int(rng.integers(n_scene_clusters))
        k = int(rng.integers(c))
        m = int(rng.integers(c))
        activator = int(rng.integers(2))
        if planted_rule == "interaction":
            label = k if ctx == 0 else m
        elif planted_rule == "pair":
            label = k if activator == 0 else m
        else:
            label = ctx

        slots: list[tuple[str, float]] = [("person", float(rng.uniform(0.85, 0.99)))]
        if planted_rule == "pair":
            slots.append((ACTIVATOR_CONCEPTS[activator], float(rng.uniform(0.45, 0.80))))
        slots.append((bright[k], float(rng.uniform(0.45, 0.80))))
        slots.append((dark[m], float(rng.uniform(0.45, 0.80))))
        n_noise = min(3, max(0, config.n - len(slots) - 1))
        n_fill = config.n - len(slots) - n_noise
        fill = rng.choice(len(FILLER_CONCEPTS) - 1, size=min(n_fill, len(FILLER_CONCEPTS) - 1),
                          replace=False)
        for j in fill:
            slots.append((FILLER_CONCEPTS[1 + int(j)], float(rng.uniform(0.35, 0.80))))
        while len(slots) < config.n - n_noise:
            slots.append((PAD_CONCEPT, 0.0))
        for _ in range(n_noise):
            tok = vocab[int(rng.integers(len(vocab) - 1))]
            slots.append((tok, float(rng.uniform(0.0, 0.25))))
        rng.shuffle(slots)

        objects = []
        for concept, conf in slots:
            base = visual_proto[concept]
            vis = base + noise * rng.normal(0.0, 1.0, config.d1) / np.sqrt(config.d1)
            if concept == PAD_CONCEPT:
                vis = np.zeros(config.d1)
            objects.append(ObjectSlot(concept, conf, vis))
        scene = scene_proto[ctx] + noise * rng.normal(0.0, 1.0, config.d1) / np.sqrt(config.d1)
        records.append(DetectionRecord(f"synth-{idx:05d}", label, scene, objects))

    samples = build_samples(records, table)
    return SyntheticData(records=records, table=table, samples=samples)


def generate_synthetic(config: DatasetConfig, rng_seed: int,
                       planted_rule: str = "interaction",
                       n_samples: int = 512, noise: float = 0.1) -> list[Sample]:
    """Generate planted-structure samples (see :func:`synthesize`)."""
    return synthesize(config, rng_seed, planted_rule, n_samples, noise).samples

