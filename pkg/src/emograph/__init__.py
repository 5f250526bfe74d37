"""Graph-reasoning emotion classifier over precomputed detector features.

The pipeline: object slots become an emotion graph (normalized emotional
embeddings, a learned pairwise affinity, confidence-based node and edge
masking), a residual graph convolution propagates semantic features along
the affinities, a scene-conditioned attention fuses the objects into one
vector, and a linear softmax head classifies the concatenated scene and
object features.  Every backward pass is written by hand and verified
against finite differences.
"""

from .analytics import (ConceptRow, Observation, RegionReport, collect_observations,
                        concept_stats, mean_attention, object_frequency, region_report,
                        tfidf_rank, weighted_frequency)
from .errors import (DimensionError, EmographError, NumericError, ParseError,
                     UnknownConceptError)
from .gcn import GcnParams, gcn_layer, reason
from .gradcheck import run_gradcheck
from .graph import EmotionGraph, GraphParams, build_graph, filter_nodes, mask_matrix
from .ingestion import (DatasetConfig, DetectionRecord, EmbeddingTable, Sample,
                        build_samples, generate_synthetic, load_detections,
                        load_embeddings, load_scenes, split_dataset, synthesize,
                        with_node_budget)
from .model import (ABLATION_GRID, FULL_MODE, MODE_NAMES, AblationMode, ForwardResult,
                    Model, ModelDims, backward, batch_loss, forward, sample_loss)
from .numerics import ParamTensor, finite_diff_grad, group_relative_error, l2_normalize
from .training import (EvalResult, TrainConfig, TrainResult, adam_step, evaluate,
                       load_checkpoint, lr_schedule, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_GRID", "AblationMode", "ConceptRow", "DatasetConfig", "DetectionRecord",
    "DimensionError", "EmbeddingTable", "EmographError", "EmotionGraph", "EvalResult",
    "ForwardResult", "FULL_MODE", "GcnParams", "GraphParams", "MODE_NAMES", "Model",
    "ModelDims", "NumericError", "Observation", "ParamTensor", "ParseError",
    "RegionReport", "Sample", "TrainConfig", "TrainResult", "UnknownConceptError",
    "adam_step", "backward", "batch_loss", "build_graph", "build_samples",
    "collect_observations", "concept_stats", "evaluate", "filter_nodes",
    "finite_diff_grad", "forward", "gcn_layer", "generate_synthetic",
    "group_relative_error", "l2_normalize", "load_checkpoint", "load_detections",
    "load_embeddings", "load_scenes", "lr_schedule", "mask_matrix", "mean_attention",
    "object_frequency", "reason", "region_report", "run_gradcheck", "sample_loss",
    "save_checkpoint", "split_dataset", "synthesize", "tfidf_rank", "train",
    "weighted_frequency", "with_node_budget",
]
