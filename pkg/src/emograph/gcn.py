"""Residual graph-convolution reasoning over the masked affinity.

Each layer computes (R @ X @ W_g) @ W_r.T + X: message passing over the
edge matrix, a feature transform, a residual-side transform, and an
identity skip on the layer input.  Layers are purely linear as printed;
an optional tanh between layers exists for experiments and defaults off.
Weights are per-layer, not shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import ParamTensor

DEFAULT_DEPTH = 4


@dataclass
class GcnParams:
    """Per-layer (gcn_w, res_w) pairs, each d2 x d2."""

    layers: list[tuple[ParamTensor, ParamTensor]]
    activation: bool = field(default=False)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise DimensionError("GCN depth must be >= 1")

    @property
    def depth(self) -> int:
        return len(self.layers)


def gcn_layer(x_in: np.ndarray, edges: np.ndarray,
              gcn_w: ParamTensor, res_w: ParamTensor) -> np.ndarray:
    """One reasoning step: (edges @ x_in @ gcn_w) @ res_w.T + x_in."""
    msg = nx.matmul(edges, x_in)
    out = nx.matmul(nx.matmul(msg, gcn_w.value), res_w.value.T)
    return out + x_in


def gcn_layer_backward(d_out: np.ndarray, x_in: np.ndarray, edges: np.ndarray,
                       gcn_w: ParamTensor, res_w: ParamTensor,
                       accumulate: bool = True):
    """Adjoint of ``gcn_layer``; returns (d_x_in, d_edges)."""
    msg = edges @ x_in
    mixed = msg @ gcn_w.value
    d_mixed = d_out @ res_w.value
    d_msg = d_mixed @ gcn_w.value.T
    if accumulate:
        res_w.accumulate(d_out.T @ mixed)
        gcn_w.accumulate(msg.T @ d_mixed)
    d_edges = d_msg @ x_in.T
    d_x_in = edges.T @ d_msg + d_out
    return d_x_in, d_edges


def reason(nodes: np.ndarray, edges: np.ndarray, params: GcnParams):
    """Apply the layer stack; returns (final features, per-layer input cache).

    Zero rows with zero affinity rows/cols are fixed points, so inactive
    nodes stay exactly zero at every depth.
    """
    cache = [nodes]
    x = nodes
    for gcn_w, res_w in params.layers:
        x = gcn_layer(x, edges, gcn_w, res_w)
        if params.activation:
            x = np.tanh(x)
        cache.append(x)
    return x, cache


def reason_backward(d_out: np.ndarray, edges: np.ndarray, cache: list[np.ndarray],
                    params: GcnParams, accumulate: bool = True):
    """Adjoint of ``reason``; returns (d_nodes, d_edges)."""
    d_x = d_out
    d_edges = np.zeros_like(edges)
    for idx in range(params.depth - 1, -1, -1):
        gcn_w, res_w = params.layers[idx]
        if params.activation:
            d_x = d_x * (1.0 - cache[idx + 1] ** 2)
        d_x, d_e = gcn_layer_backward(d_x, cache[idx], edges, gcn_w, res_w, accumulate)
        d_edges += d_e
    return d_x, d_edges
