"""Emotion Graph construction.

Pipeline: embed raw object visual features into an emotional space
(linear map + row-wise l2 norm), score pairwise affinities through two
independent linear branches, drop low-confidence object nodes, and zero
the affinity rows/columns adjacent to dropped nodes.  The result is a
graph whose nodes are (filtered) semantic features and whose edges are
the masked affinity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import ParamTensor

DEFAULT_TAU = 0.3
DEFAULT_AFFINITY_DIM = 512


@dataclass
class GraphParams:
    """Learnable tensors of the graph-construction stage.

    embed_w/embed_b map visual features within R^d1; aff_src_w scores the
    edge source and aff_dst_w the edge destination (both d_a x d1).  When
    the two affinity branches are configured as shared, aff_src_w and
    aff_dst_w reference the same ParamTensor.
    """

    embed_w: ParamTensor
    embed_b: ParamTensor
    aff_src_w: ParamTensor
    aff_dst_w: ParamTensor
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise DimensionError(f"tau must be in [0, 1], got {self.tau}")

    @property
    def shared_affinity(self) -> bool:
        return self.aff_src_w is self.aff_dst_w


@dataclass
class EmotionGraph:
    """Nodes, raw and masked affinity, node mask, and active flags."""

    nodes: np.ndarray          # N x d2, rows of inactive nodes are zero
    affinity: np.ndarray       # N x N, raw pairwise scores
    mask: np.ndarray           # N x N of {0.0, 1.0}
    masked_affinity: np.ndarray  # mask * affinity, elementwise
    active: np.ndarray         # N booleans


def emotional_embedding(visual: np.ndarray, params: GraphParams) -> np.ndarray:
    """Row i = l2_normalize(embed_w @ v_i + embed_b); shape N x d1."""
    d1 = params.embed_w.value.shape[0]
    v = nx.as_matrix(visual, cols=d1)
    pre = nx.matmul(v, params.embed_w.value.T) + params.embed_b.value
    return nx.l2_normalize_rows(pre)


def emotional_embedding_backward(d_emb: np.ndarray, visual: np.ndarray,
                                 params: GraphParams, accumulate: bool = True) -> np.ndarray:
    """Adjoint of ``emotional_embedding``; returns d(visual)."""
    pre = visual @ params.embed_w.value.T + params.embed_b.value
    d_pre = nx.l2_normalize_rows_backward(d_emb, pre)
    if accumulate:
        params.embed_w.accumulate(d_pre.T @ visual)
        params.embed_b.accumulate(d_pre.sum(axis=0))
    return d_pre @ params.embed_w.value


def affinity_matrix(emb: np.ndarray, params: GraphParams) -> np.ndarray:
    """Pairwise scores r[i, j] = (aff_src_w @ e_i) . (aff_dst_w @ e_j)."""
    src = nx.matmul(emb, params.aff_src_w.value.T)
    dst = nx.matmul(emb, params.aff_dst_w.value.T)
    return nx.matmul(src, dst.T)


def affinity_matrix_backward(d_aff: np.ndarray, emb: np.ndarray,
                             params: GraphParams, accumulate: bool = True) -> np.ndarray:
    """Adjoint of ``affinity_matrix``; returns d(emb).

    With shared branches both contributions accumulate into the one tensor.
    """
    src = emb @ params.aff_src_w.value.T
    dst = emb @ params.aff_dst_w.value.T
    d_src = d_aff @ dst
    d_dst = d_aff.T @ src
    if accumulate:
        params.aff_src_w.accumulate(d_src.T @ emb)
        params.aff_dst_w.accumulate(d_dst.T @ emb)
    return d_src @ params.aff_src_w.value + d_dst @ params.aff_dst_w.value


def filter_nodes(semantic: np.ndarray, confidences: np.ndarray, tau: float):
    """Zero the semantic rows of nodes below the confidence threshold.

    Returns (filtered nodes, active flags); the threshold is inclusive.
    """
    p = nx.as_vector(confidences, size=semantic.shape[0])
    if ((p < 0.0) | (p > 1.0)).any():
        raise DimensionError("confidences must lie in [0, 1]")
    active = p >= tau
    return semantic * active[:, None], active


def mask_matrix(active: np.ndarray) -> np.ndarray:
    """mask[i, j] = 1 iff nodes i and j are both active, else 0."""
    a = np.asarray(active, dtype=bool).astype(np.float64)
    return np.outer(a, a)


def masked_affinity(affinity: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise product of affinity and mask."""
    if affinity.shape != mask.shape:
        raise DimensionError(f"affinity {affinity.shape} != mask {mask.shape}")
    return affinity * mask


def build_graph(visual: np.ndarray, semantic: np.ndarray, confidences: np.ndarray,
                params: GraphParams, use_mask: bool = True) -> EmotionGraph:
    """Chain embedding -> affinity -> filter -> mask into an EmotionGraph.

    With ``use_mask`` false the redundancy-removal stage is skipped
    entirely: nodes stay unfiltered and the mask is all-ones.
    """
    emb = emotional_embedding(visual, params)
    aff = affinity_matrix(emb, params)
    n = aff.shape[0]
    if use_mask:
        nodes, active = filter_nodes(semantic, confidences, params.tau)
        mask = mask_matrix(active)
    else:
        nodes = nx.as_matrix(semantic)
        active = np.ones(n, dtype=bool)
        mask = np.ones((n, n))
    return EmotionGraph(
        nodes=nodes,
        affinity=aff,
        mask=mask,
        masked_affinity=masked_affinity(aff, mask),
        active=active,
    )


def build_graph_backward(d_masked_affinity: np.ndarray, visual: np.ndarray,
                         graph: EmotionGraph, params: GraphParams) -> np.ndarray:
    """Backpropagate a masked-affinity gradient into the graph parameters.

    Node features are constants (ingested embeddings), so only the edge
    path carries parameter gradients.  Returns d(visual).
    """
    d_aff = d_masked_affinity * graph.mask
    emb = emotional_embedding(visual, params)
    d_emb = affinity_matrix_backward(d_aff, emb, params)
    return emotional_embedding_backward(d_emb, visual, params)
