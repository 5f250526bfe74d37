"""Finite-difference verification of the hand-written backward passes.

Eight parameter groups are checked independently: embedding (weight and
bias), source affinity, destination affinity, graph-convolution weights,
residual-projection weights, scene projection, object projection, and the
classifier.  Each group's analytic gradient must match a central-difference
estimate within a relative tolerance measured against the larger gradient's
magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmographError
from .ingestion import DatasetConfig, Sample, synthesize
from .model import FULL_MODE, Model, ModelDims, backward, batch_loss, forward, sample_loss
from .numerics import ParamTensor, finite_diff_grad, group_relative_error

DEFAULT_TOLERANCE = 1e-5
DEFAULT_STEP = 1e-5

GROUP_ORDER = ["embed", "aff_src", "aff_dst", "gcn", "residual",
               "scene_proj", "obj_proj", "classifier"]


def parameter_groups(model: Model) -> dict[str, list[ParamTensor]]:
    """Map group label -> tensors; shared affinity lands in both aff groups."""
    groups: dict[str, list[ParamTensor]] = {g: [] for g in GROUP_ORDER}
    if model.graph is not None:
        groups["embed"] = [model.graph.embed_w, model.graph.embed_b]
        groups["aff_src"] = [model.graph.aff_src_w]
        groups["aff_dst"] = [model.graph.aff_dst_w]
    if model.gcn is not None:
        groups["gcn"] = [w for w, _ in model.gcn.layers]
        groups["residual"] = [w for _, w in model.gcn.layers]
    if model.fusion is not None:
        groups["scene_proj"] = [model.fusion.scene_w]
        groups["obj_proj"] = [model.fusion.obj_w]
    groups["classifier"] = [model.cls_w]
    return {g: ts for g, ts in groups.items() if ts}


@dataclass
class GroupCheck:
    group: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    checks: list[GroupCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"{c.group:<12s} max_rel_err={c.max_rel_err:.3e}  {status}")
        return out


def tiny_instance(seed: int = 0, batch: int = 2):
    """Small full-mode model plus a labelled batch for checking gradients."""
    config = DatasetConfig(num_classes=3, n=4, d1=8, d2=6)
    dims = ModelDims(n=4, d1=8, d2=6, d_a=5, depth=2, num_classes=3, tau=0.3)
    data = synthesize(config, rng_seed=seed, planted_rule="interaction",
                      n_samples=batch, noise=0.1)
    # ensure the confidence filter actually drops a node so the masked
    # paths of the backward pass are exercised too
    data.samples[0].confidences[0] = 0.05
    model = Model.build(dims, FULL_MODE, seed=seed)
    return model, data.samples


def analytic_grads(model: Model, samples: list[Sample]) -> dict[str, np.ndarray]:
    """Backward-pass gradients of the mean batch loss, keyed by tensor name."""
    model.zero_grad()
    scale = 1.0 / len(samples)
    for s in samples:
        res = forward(s, model)
        backward(res.cache, s.label, model, scale=scale)
    return {t.name: t.grad.copy() for t in model.tensors()}


def run_gradcheck(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                  step: float = DEFAULT_STEP, corrupt: str | None = None,
                  model: Model | None = None,
                  samples: list[Sample] | None = None) -> GradcheckReport:
    """Compare analytic and finite-difference gradients per group.

    ``corrupt`` names a group whose analytic gradient gets a deliberate
    offset before comparison; the run must then fail, which makes the
    checker itself checkable.
    """
    if model is None or samples is None:
        model, samples = tiny_instance(seed)
    groups = parameter_groups(model)
    if corrupt is not None and corrupt not in groups:
        raise EmographError(f"unknown parameter group {corrupt!r}; "
                            f"choose from {sorted(groups)}")

    analytic = analytic_grads(model, samples)
    if corrupt is not None:
        for t in groups[corrupt]:
            analytic[t.name] = analytic[t.name] + 0.1

    def loss_fn():
        return batch_loss(model, samples)

    estimated = finite_diff_grad(loss_fn, model.tensors(), h=step)

    checks = []
    for group in GROUP_ORDER:
        if group not in groups:
            continue
        err = 0.0
        for t in groups[group]:
            err = max(err, group_relative_error(analytic[t.name], estimated[t.name]))
        checks.append(GroupCheck(group=group, max_rel_err=err, passed=err <= tolerance))
    return GradcheckReport(checks=checks, tolerance=tolerance)
