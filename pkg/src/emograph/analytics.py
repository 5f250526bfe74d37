"""Interpretability statistics over trained models.

Per emotion category c and concept i, over a labelled corpus:

  f_ci = N_ci / sum_j N_cj        relative detection frequency
  a_ci = mean attention the model pays to concept i inside category c
  w_ci = f_ci * a_ci              contribution score

plus a tf-idf re-ranking of w that suppresses concepts appearing in every
category: tf = w_ci / sum_i w_ci, idf = ln((1+C) / (1+df_i)) + 1 where
df_i counts categories whose corpus contains concept i.  The formulas are
repeated in every emitted table header so the files are self-describing.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmographError
from .fileio import atomic_write_text
from .ingestion import PAD_CONCEPT, Sample
from .model import Model, forward
from .training import parallel_map

TABLE_HEADER_NOTE = (
    "# f = count/category-total, a = mean attention, w = f*a, "
    "tfidf = (w/sum-w-in-category) * (ln((1+C)/(1+df)) + 1)"
)


@dataclass
class Observation:
    """One active object slot as seen by the model on one image."""

    category: int
    concept: str
    attention: float


def collect_observations(model: Model, samples: list[Sample],
                         group_by: str = "gold") -> list[Observation]:
    """Run the model over a corpus and record (category, concept, attention).

    Only slots that pass the confidence filter count; ``group_by`` chooses
    whether the gold label or the model's prediction names the category.
    """
    if group_by not in ("gold", "pred"):
        raise EmographError(f"group_by must be 'gold' or 'pred', got {group_by!r}")
    tau = model.dims.tau

    def run(sample: Sample):
        res = forward(sample, model)
        cat = sample.label if group_by == "gold" else int(np.argmax(res.probs))
        rows = []
        weights = res.attention if res.attention is not None else np.zeros(len(sample.concepts))
        for i, concept in enumerate(sample.concepts):
            if concept == PAD_CONCEPT or sample.confidences[i] < tau:
                continue
            rows.append(Observation(cat, concept, float(weights[i])))
        return rows

    out: list[Observation] = []
    for rows in parallel_map(run, samples):
        out.extend(rows)
    return out


def object_frequency(observations: list[Observation],
                     categories: list[int] | None = None):
    """Counts and relative frequencies per category.

    Returns ``(counts, freq)`` where ``counts[c][concept]`` is N_ci and
    ``freq[c][concept]`` is N_ci normalized over the category.  A category
    requested but absent from the corpus is an error naming the category.
    """
    counts: dict[int, dict[str, int]] = {}
    for obs in observations:
        counts.setdefault(obs.category, {})
        counts[obs.category][obs.concept] = counts[obs.category].get(obs.concept, 0) + 1
    if categories is None:
        categories = sorted(counts)
    freq: dict[int, dict[str, float]] = {}
    for c in categories:
        cat_counts = counts.get(c, {})
        total = sum(cat_counts.values())
        if total == 0:
            raise EmographError(f"category {c} has no detected objects; cannot normalize")
        freq[c] = {concept: n / total for concept, n in cat_counts.items()}
    return {c: counts.get(c, {}) for c in categories}, freq


def mean_attention(observations: list[Observation],
                   categories: list[int] | None = None) -> dict[int, dict[str, float]]:
    """Average attention per (category, concept) over its occurrences."""
    sums: dict[int, dict[str, float]] = {}
    nums: dict[int, dict[str, int]] = {}
    for obs in observations:
        sums.setdefault(obs.category, {})
        nums.setdefault(obs.category, {})
        sums[obs.category][obs.concept] = sums[obs.category].get(obs.concept, 0.0) + obs.attention
        nums[obs.category][obs.concept] = nums[obs.category].get(obs.concept, 0) + 1
    if categories is None:
        categories = sorted(sums)
    out: dict[int, dict[str, float]] = {}
    for c in categories:
        out[c] = {concept: sums[c][concept] / nums[c][concept]
                  for concept in sums.get(c, {})}
    return out


def weighted_frequency(freq: dict[int, dict[str, float]],
                       att: dict[int, dict[str, float]]) -> dict[int, dict[str, float]]:
    """w_ci = f_ci * a_ci; the two tables must cover identical keys."""
    if set(freq) != set(att):
        raise EmographError(f"category sets differ: frequency has {sorted(freq)}, "
                            f"attention has {sorted(att)}")
    out: dict[int, dict[str, float]] = {}
    for c in freq:
        fk, ak = set(freq[c]), set(att[c])
        if fk != ak:
            missing = sorted(fk.symmetric_difference(ak))
            raise EmographError(f"category {c}: concept keys differ between frequency "
                                f"and attention tables: {missing}")
        out[c] = {concept: freq[c][concept] * att[c][concept] for concept in freq[c]}
    return out


def tfidf_rank(weighted: dict[int, dict[str, float]],
               top_k: int | None = None) -> dict[int, list[tuple[str, float]]]:
    """Re-rank contribution scores by tf-idf; ties break alphabetically.

    tf is w normalized within the category; df counts categories whose
    table contains the concept; idf = ln((1+C)/(1+df)) + 1.
    """
    n_cat = len(weighted)
    if n_cat == 0:
        raise EmographError("tf-idf needs at least one category")
    df: dict[str, int] = {}
    for c in weighted:
        for concept in weighted[c]:
            df[concept] = df.get(concept, 0) + 1
    ranked: dict[int, list[tuple[str, float]]] = {}
    for c, table in weighted.items():
        total = sum(table.values())
        rows = []
        for concept, w in table.items():
            tf = w / total if total > 0 else 0.0
            idf = math.log((1 + n_cat) / (1 + df[concept])) + 1.0
            rows.append((concept, tf * idf))
        rows.sort(key=lambda r: (-r[1], r[0]))
        ranked[c] = rows[:top_k] if top_k is not None else rows
    return ranked


@dataclass
class ConceptRow:
    category: int
    rank: int
    concept: str
    count: int
    frequency: float
    attention: float
    weight: float
    tfidf: float


def concept_stats(model: Model, samples: list[Sample], group_by: str = "gold",
                  top_k: int | None = None,
                  categories: list[int] | None = None) -> list[ConceptRow]:
    """Full per-category concept ranking with every intermediate statistic."""
    observations = collect_observations(model, samples, group_by)
    counts, freq = object_frequency(observations, categories)
    att = mean_attention(observations, categories)
    weighted = weighted_frequency(freq, att)
    ranked = tfidf_rank(weighted, top_k)
    rows = []
    for c in sorted(ranked):
        for rank, (concept, score) in enumerate(ranked[c], start=1):
            rows.append(ConceptRow(
                category=c, rank=rank, concept=concept,
                count=counts[c][concept], frequency=freq[c][concept],
                attention=att[c][concept], weight=weighted[c][concept],
                tfidf=score))
    return rows


def write_concept_table(rows: list[ConceptRow], path) -> None:
    """Tab-separated concept table with a self-describing header."""
    lines = [TABLE_HEADER_NOTE,
             "category\trank\tconcept\tcount\tfrequency\tattention\tweight\ttfidf"]
    for r in rows:
        lines.append(f"{r.category}\t{r.rank}\t{r.concept}\t{r.count}"
                     f"\t{r.frequency:.6f}\t{r.attention:.6f}\t{r.weight:.6f}\t{r.tfidf:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_concept_tables(rows: list[ConceptRow], out_dir) -> list[str]:
    """One table per category plus a combined one; returns written paths."""
    paths = []
    combined = os.path.join(out_dir, "concepts.tsv")
    write_concept_table(rows, combined)
    paths.append(combined)
    for c in sorted({r.category for r in rows}):
        p = os.path.join(out_dir, f"concepts_cat{c}.tsv")
        write_concept_table([r for r in rows if r.category == c], p)
        paths.append(p)
    return paths


@dataclass
class RegionRow:
    slot: int
    concept: str
    confidence: float
    attention: float
    active: bool


@dataclass
class RegionReport:
    image_id: str
    predicted: int
    gold: int
    rows: list[RegionRow]          # sorted by attention, descending
    masked_affinity: np.ndarray | None
    note: str | None


def region_report(model: Model, sample: Sample) -> RegionReport:
    """Per-object attention for one image, highest attention first.

    Reuses the training forward pass, so reported weights match what the
    classifier consumed bit for bit.
    """
    res = forward(sample, model)
    tau = model.dims.tau
    weights = res.attention if res.attention is not None else np.zeros(len(sample.concepts))
    active_flags = res.cache.active if res.cache.active is not None \
        else np.zeros(len(sample.concepts), dtype=bool)
    rows = []
    for i, concept in enumerate(sample.concepts):
        is_active = bool(active_flags[i]) and concept != PAD_CONCEPT
        if not is_active:
            continue
        rows.append(RegionRow(slot=i, concept=concept,
                              confidence=float(sample.confidences[i]),
                              attention=float(weights[i]), active=True))
    rows.sort(key=lambda r: (-r.attention, r.slot))
    note = None
    if not rows:
        note = "no object passed the confidence filter; prediction used scene context only"
    affinity = res.cache.graph.masked_affinity if res.cache.graph is not None else None
    return RegionReport(image_id=sample.image_id, predicted=int(np.argmax(res.probs)),
                        gold=sample.label, rows=rows, masked_affinity=affinity, note=note)


def format_region_report(report: RegionReport, show_affinity: bool = True) -> str:
    """Human-readable rendering; attention shown to 3 decimals."""
    lines = [f"image {report.image_id}: predicted={report.predicted} gold={report.gold}"]
    if report.note:
        lines.append(f"  note: {report.note}")
    for r in report.rows:
        lines.append(f"  slot {r.slot:2d}  {r.concept:<20s} conf={r.confidence:.3f} "
                     f"attention={r.attention:.3f}")
    if show_affinity and report.masked_affinity is not None:
        lines.append("  masked affinity:")
        for row in report.masked_affinity:
            lines.append("    " + " ".join(f"{v: .4f}" for v in row))
    return "\n".join(lines) + "\n"

