"""Scene-guided attention over object features and scene-object fusion.

Attention weight a_i is the sigmoid of the dot product between the
projected, normalized scene feature and the projected, normalized i-th
object feature; both projections land in R^d2.  Object features are then
summed with those (unnormalized) weights and concatenated after the
scene feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import ParamTensor


@dataclass
class FusionParams:
    """scene_w: d2 x d1 scene projection; obj_w: d2 x d2 object projection."""

    scene_w: ParamTensor
    obj_w: ParamTensor


def scene_attention(scene: np.ndarray, objects: np.ndarray, params: FusionParams) -> np.ndarray:
    """Per-object weights sigmoid(l2(scene_w @ scene) . l2(obj_w @ o_i)).

    Both projected vectors are unit or zero, so every weight lies in
    [sigmoid(-1), sigmoid(1)].
    """
    s_hat = nx.l2_normalize(nx.matmul(params.scene_w.value, scene[:, None])[:, 0])
    proj = nx.matmul(objects, params.obj_w.value.T)
    u_hat = nx.l2_normalize_rows(proj)
    return nx.sigmoid(u_hat @ s_hat)


def scene_attention_backward(d_att: np.ndarray, scene: np.ndarray, objects: np.ndarray,
                             att: np.ndarray, params: FusionParams,
                             accumulate: bool = True):
    """Adjoint of ``scene_attention``; returns (d_scene, d_objects)."""
    s_raw = params.scene_w.value @ scene
    s_hat = nx.l2_normalize(s_raw)
    proj = objects @ params.obj_w.value.T
    u_hat = nx.l2_normalize_rows(proj)

    d_dots = nx.sigmoid_backward(d_att, att)
    d_s_hat = u_hat.T @ d_dots
    d_u_hat = np.outer(d_dots, s_hat)

    d_s_raw = nx.l2_normalize_backward(d_s_hat, s_raw)
    d_proj = nx.l2_normalize_rows_backward(d_u_hat, proj)
    if accumulate:
        params.scene_w.accumulate(np.outer(d_s_raw, scene))
        params.obj_w.accumulate(d_proj.T @ objects)
    d_scene = params.scene_w.value.T @ d_s_raw
    d_objects = d_proj @ params.obj_w.value
    return d_scene, d_objects


def attend_fuse(att: np.ndarray, objects: np.ndarray) -> np.ndarray:
    """Weighted sum of object rows; weights are used as-is, not renormalized."""
    a = nx.as_vector(att, size=objects.shape[0])
    return objects.T @ a


def attend_fuse_backward(d_fused: np.ndarray, att: np.ndarray, objects: np.ndarray):
    """Adjoint of ``attend_fuse``; returns (d_att, d_objects)."""
    d_att = objects @ d_fused
    d_objects = np.outer(att, d_fused)
    return d_att, d_objects


def mean_pool(active: np.ndarray, objects: np.ndarray) -> np.ndarray:
    """Average of the active object rows; the attention-free fusion path."""
    k = int(active.sum())
    if k == 0:
        return np.zeros(objects.shape[1])
    return objects[active].sum(axis=0) / k


def mean_pool_weights(active: np.ndarray) -> np.ndarray:
    """Effective per-object weights of ``mean_pool``: 1/k on active rows."""
    k = int(active.sum())
    w = np.zeros(active.shape[0])
    if k:
        w[active] = 1.0 / k
    return w


def concat_features(scene: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """[scene || fused]: first d1 entries scene, last d2 entries objects."""
    return np.concatenate([scene, fused])


def split_features(combined: np.ndarray, d1: int):
    """Inverse of ``concat_features``."""
    if combined.shape[0] < d1:
        raise DimensionError(f"combined feature of length {combined.shape[0]} < d1={d1}")
    return combined[:d1], combined[d1:]
