"""Full classifier: graph construction, graph reasoning, fusion, softmax head.

The ablation switches mirror the rows of the component study: each flag
removes one stage while leaving the remaining stages numerically identical
to the full model.  Parameter construction is mode-aware, so e.g. the
scene-only variant owns nothing but a classifier over the scene feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion as fu
from . import gcn as gc
from . import graph as gr
from .errors import DimensionError, EmographError
from .ingestion import Sample
from .numerics import ParamTensor, check_finite, matmul, softmax

LOSS_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelDims:
    """Shape configuration shared by every stage."""

    n: int = 10
    d1: int = 2048
    d2: int = 300
    d_a: int = 512
    depth: int = gc.DEFAULT_DEPTH
    num_classes: int = 2
    tau: float = gr.DEFAULT_TAU

    def __post_init__(self):
        for name in ("n", "d1", "d2", "d_a", "depth", "num_classes"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise DimensionError("need at least 2 classes")


@dataclass(frozen=True)
class AblationMode:
    """Which stages participate.  The defaults describe the full model."""

    use_scene: bool = True
    use_objects: bool = True
    multi_object: bool = True
    use_gcn: bool = True
    use_mask: bool = True
    two_embeddings: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if not (self.use_scene or self.use_objects):
            raise EmographError("ablation removes both scene and object branches")
        if not self.use_objects:
            for flag in ("multi_object", "use_gcn", "use_attention"):
                if getattr(self, flag):
                    raise EmographError(f"{flag} requires use_objects")
        if not self.multi_object:
            for flag in ("use_gcn", "use_attention"):
                if getattr(self, flag):
                    raise EmographError(f"{flag} requires multi_object")
        if self.use_attention and not self.use_scene:
            raise EmographError("attention weights are scene-conditioned; needs use_scene")

    @property
    def feature_dim_parts(self) -> tuple[bool, bool]:
        return self.use_scene, self.use_objects


def _mode(**kw) -> AblationMode:
    base = dict(use_scene=False, use_objects=False, multi_object=False, use_gcn=False,
                use_mask=False, two_embeddings=False, use_attention=False)
    base.update(kw)
    return AblationMode(**base)


FULL_MODE = AblationMode()

# The component study grid: the object-branch build-up (graph section, 6
# rows), then the same build-up fused with the scene feature (fusion
# section, 8 rows).  Order and count are part of the reporting contract.
ABLATION_GRID: list[tuple[str, str, AblationMode]] = [
    ("object-single", "emotion-graph",
     _mode(use_objects=True)),
    ("object-multi", "emotion-graph",
     _mode(use_objects=True, multi_object=True)),
    ("object-multi-gcn-1emb", "emotion-graph",
     _mode(use_objects=True, multi_object=True, use_gcn=True)),
    ("object-multi-gcn-2emb", "emotion-graph",
     _mode(use_objects=True, multi_object=True, use_gcn=True, two_embeddings=True)),
    ("object-multi-gcn-mask-1emb", "emotion-graph",
     _mode(use_objects=True, multi_object=True, use_gcn=True, use_mask=True)),
    ("object-multi-gcn-mask-2emb", "emotion-graph",
     _mode(use_objects=True, multi_object=True, use_gcn=True, use_mask=True,
           two_embeddings=True)),
    ("scene", "fusion",
     _mode(use_scene=True)),
    ("scene-object-single", "fusion",
     _mode(use_scene=True, use_objects=True)),
    ("scene-object-multi", "fusion",
     _mode(use_scene=True, use_objects=True, multi_object=True)),
    ("scene-object-multi-att", "fusion",
     _mode(use_scene=True, use_objects=True, multi_object=True, use_attention=True)),
    ("scene-object-multi-gcn-1emb-att", "fusion",
     _mode(use_scene=True, use_objects=True, multi_object=True, use_gcn=True,
           use_attention=True)),
    ("scene-object-multi-gcn-2emb-att", "fusion",
     _mode(use_scene=True, use_objects=True, multi_object=True, use_gcn=True,
           two_embeddings=True, use_attention=True)),
    ("scene-object-multi-gcn-mask-1emb-att", "fusion",
     _mode(use_scene=True, use_objects=True, multi_object=True, use_gcn=True,
           use_mask=True, use_attention=True)),
    ("full", "fusion", FULL_MODE),
]

MODE_NAMES = {name: mode for name, _, mode in ABLATION_GRID}


def feature_dim(dims: ModelDims, mode: AblationMode) -> int:
    dim = 0
    if mode.use_scene:
        dim += dims.d1
    if mode.use_objects:
        dim += dims.d2
    return dim


@dataclass
class Model:
    """Parameter bundle for one (dims, mode) configuration."""

    dims: ModelDims
    mode: AblationMode
    graph: gr.GraphParams | None
    gcn: gc.GcnParams | None
    fusion: fu.FusionParams | None
    cls_w: ParamTensor
    seed: int = 0
    _tensor_cache: list[ParamTensor] = field(default=None, repr=False, compare=False)

    @classmethod
    def build(cls, dims: ModelDims, mode: AblationMode = FULL_MODE, seed: int = 0) -> "Model":
        """Allocate parameters in a fixed order from one seeded stream."""
        rng = np.random.default_rng(seed)
        graph_p = None
        gcn_p = None
        fusion_p = None
        if mode.use_objects and mode.use_gcn:
            embed_w = ParamTensor.init_uniform("embed_w", (dims.d1, dims.d1), dims.d1, rng)
            embed_b = ParamTensor("embed_b", np.zeros(dims.d1))
            if mode.two_embeddings:
                aff_src = ParamTensor.init_uniform("aff_src_w", (dims.d_a, dims.d1), dims.d1, rng)
                aff_dst = ParamTensor.init_uniform("aff_dst_w", (dims.d_a, dims.d1), dims.d1, rng)
            else:
                aff_src = ParamTensor.init_uniform("aff_w", (dims.d_a, dims.d1), dims.d1, rng)
                aff_dst = aff_src
            graph_p = gr.GraphParams(embed_w, embed_b, aff_src, aff_dst, dims.tau)
            layers = []
            for layer in range(dims.depth):
                gcn_w = ParamTensor.init_uniform(f"gcn_w_{layer}", (dims.d2, dims.d2), dims.d2, rng)
                res_w = ParamTensor.init_uniform(f"res_w_{layer}", (dims.d2, dims.d2), dims.d2, rng)
                layers.append((gcn_w, res_w))
            gcn_p = gc.GcnParams(layers)
        if mode.use_attention:
            scene_w = ParamTensor.init_uniform("scene_w", (dims.d2, dims.d1), dims.d1, rng)
            obj_w = ParamTensor.init_uniform("obj_w", (dims.d2, dims.d2), dims.d2, rng)
            fusion_p = fu.FusionParams(scene_w, obj_w)
        fdim = feature_dim(dims, mode)
        cls_w = ParamTensor.init_uniform("cls_w", (dims.num_classes, fdim), fdim, rng)
        return cls(dims=dims, mode=mode, graph=graph_p, gcn=gcn_p, fusion=fusion_p,
                   cls_w=cls_w, seed=seed)

    def tensors(self) -> list[ParamTensor]:
        """Unique parameter tensors in construction order."""
        if self._tensor_cache is not None:
            return self._tensor_cache
        out: list[ParamTensor] = []
        seen: set[int] = set()

        def add(t: ParamTensor):
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)

        if self.graph is not None:
            add(self.graph.embed_w)
            add(self.graph.embed_b)
            add(self.graph.aff_src_w)
            add(self.graph.aff_dst_w)
        if self.gcn is not None:
            for gcn_w, res_w in self.gcn.layers:
                add(gcn_w)
                add(res_w)
        if self.fusion is not None:
            add(self.fusion.scene_w)
            add(self.fusion.obj_w)
        add(self.cls_w)
        self._tensor_cache = out
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {t.name: t.value.copy() for t in self.tensors()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for t in self.tensors():
            t.value[...] = snap[t.name]


@dataclass
class ForwardCache:
    """Intermediates needed by the manual backward pass."""

    sample: Sample
    mode: AblationMode
    graph: gr.EmotionGraph | None
    enhanced: np.ndarray | None
    gcn_cache: list[np.ndarray] | None
    weights: np.ndarray | None
    attention_raw: np.ndarray | None
    f_obj: np.ndarray | None
    feature: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    active: np.ndarray | None
    single_slot: int | None


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    attention: np.ndarray | None
    cache: ForwardCache


def forward(sample: Sample, model: Model, mode: AblationMode | None = None) -> ForwardResult:
    """Run one sample through every enabled stage."""
    if mode is None:
        mode = model.mode
    dims = model.dims
    if sample.visual.shape != (len(sample.concepts), dims.d1):
        raise DimensionError(f"sample visual shape {sample.visual.shape} does not match d1={dims.d1}")
    if sample.semantic.shape[1] != dims.d2:
        raise DimensionError(f"sample semantic dim {sample.semantic.shape[1]} != d2={dims.d2}")

    graph_out = None
    enhanced = None
    gcn_cache = None
    weights = None
    att_raw = None
    f_obj = None
    active = None
    single_slot = None

    if mode.use_objects:
        if mode.use_gcn:
            if model.graph is None or model.gcn is None:
                raise EmographError("mode enables the graph stage but the model has no graph parameters")
            graph_out = gr.build_graph(sample.visual, sample.semantic, sample.confidences,
                                       model.graph, use_mask=mode.use_mask)
            active = graph_out.active
            enhanced, gcn_cache = gc.reason(graph_out.nodes, graph_out.masked_affinity, model.gcn)
        else:
            if mode.use_mask:
                nodes, active = gr.filter_nodes(sample.semantic, sample.confidences, dims.tau)
            else:
                nodes = np.array(sample.semantic, dtype=np.float64)
                active = np.ones(len(sample.concepts), dtype=bool)
            enhanced = nodes

        if not mode.multi_object:
            single_slot = int(np.argmax(sample.confidences))
            weights = np.zeros(len(sample.concepts))
            weights[single_slot] = 1.0
        elif mode.use_attention:
            if model.fusion is None:
                raise EmographError("mode enables attention but the model has no fusion parameters")
            att_raw = fu.scene_attention(sample.scene, enhanced, model.fusion)
            weights = att_raw
        else:
            weights = fu.mean_pool_weights(active)
        f_obj = fu.attend_fuse(weights, enhanced)

    if mode.use_scene and mode.use_objects:
        featv = fu.concat_features(sample.scene, f_obj)
    elif mode.use_scene:
        featv = np.array(sample.scene, dtype=np.float64)
    else:
        featv = f_obj

    logits = matmul(model.cls_w.value, featv[:, None])[:, 0]
    check_finite(logits, "logits")
    probs = softmax(logits)
    cache = ForwardCache(sample=sample, mode=mode, graph=graph_out, enhanced=enhanced,
                         gcn_cache=gcn_cache, weights=weights, attention_raw=att_raw,
                         f_obj=f_obj, feature=featv, logits=logits, probs=probs,
                         active=active, single_slot=single_slot)
    return ForwardResult(logits=logits, probs=probs, attention=weights, cache=cache)


def sample_loss(probs: np.ndarray, label: int) -> float:
    """Negative log-likelihood of the gold class, probability floored."""
    if not 0 <= label < probs.shape[0]:
        raise DimensionError(f"label {label} outside [0, {probs.shape[0]})")
    return float(-np.log(max(float(probs[label]), LOSS_PROB_FLOOR)))


def batch_loss(model: Model, samples: list[Sample], mode: AblationMode | None = None) -> float:
    """Mean negative log-likelihood over a batch."""
    if not samples:
        raise EmographError("batch_loss needs at least one sample")
    total = 0.0
    for s in samples:
        total += sample_loss(forward(s, model, mode).probs, s.label)
    return total / len(samples)


@dataclass
class InputGrads:
    d_visual: np.ndarray | None
    d_semantic: np.ndarray | None
    d_scene: np.ndarray


def backward(cache: ForwardCache, label: int, model: Model, scale: float = 1.0) -> InputGrads:
    """Accumulate parameter gradients of ``scale * nll(label)`` for one sample.

    Gradients add into each tensor's ``grad`` buffer so batch members can be
    accumulated and averaged by the caller.
    """
    mode = cache.mode
    dims = model.dims
    sample = cache.sample
    probs = cache.probs

    d_logits = probs.copy()
    d_logits[label] -= 1.0
    d_logits *= scale

    model.cls_w.accumulate(np.outer(d_logits, cache.feature))
    d_feature = model.cls_w.value.T @ d_logits

    d_scene = np.zeros(dims.d1)
    d_visual = None
    d_semantic = None

    if mode.use_scene and mode.use_objects:
        d_scene_part, d_obj_part = fu.split_features(d_feature, dims.d1)
        d_scene += d_scene_part
    elif mode.use_scene:
        d_scene += d_feature
        d_obj_part = None
    else:
        d_obj_part = d_feature

    if mode.use_objects:
        d_weights, d_enhanced = fu.attend_fuse_backward(d_obj_part, cache.weights,
                                                        cache.enhanced)
        if mode.multi_object and mode.use_attention:
            d_scene_att, d_enh_att = fu.scene_attention_backward(
                d_weights, sample.scene, cache.enhanced, cache.attention_raw, model.fusion)
            d_scene += d_scene_att
            d_enhanced = d_enhanced + d_enh_att
        # single-object and mean-pool weights are constants of the parameters

        if mode.use_gcn:
            d_nodes, d_edges = gc.reason_backward(d_enhanced, cache.graph.masked_affinity,
                                                  cache.gcn_cache, model.gcn)
            d_visual = gr.build_graph_backward(d_edges, sample.visual, cache.graph, model.graph)
            d_semantic = d_nodes * cache.graph.active[:, None].astype(np.float64) \
                if mode.use_mask else d_nodes
        else:
            d_semantic = d_enhanced * cache.active[:, None].astype(np.float64) \
                if mode.use_mask else d_enhanced

    return InputGrads(d_visual=d_visual, d_semantic=d_semantic, d_scene=d_scene)
