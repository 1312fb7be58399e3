"""Distributed early-exit inference runtime and edge-cluster simulator."""

__version__ = "0.1.0"

from .kernels import (
    AddShortcut,
    AvgPool,
    BatchNorm,
    Conv2d,
    DegenerateFeatureError,
    Fc,
    GlobalAvgPool,
    Relu,
    ShapeError,
    cosine_similarity,
    entropy,
    flops_of_layer,
    softmax,
    tensor,
)
from .model import (
    BranchNetSpec,
    Cell,
    build_wrn16,
    count_flops,
    count_params,
    forward_exit,
    forward_stage,
    fusion_forward,
    validate_spec,
)
from .policies import (
    DEFAULT_FEATURE_DIFF_THRESHOLDS,
    DEFAULT_SIMILARITY_THRESHOLDS,
    ExitController,
    ExitDecision,
    PolicyConfig,
    feature_diff,
    neighbor_similarity,
    run_policy,
)
from .simulator import (
    ClusterConfig,
    DeviceProfile,
    InferenceTrace,
    LinkProfile,
    default_cluster,
    simulate_dataset,
    simulate_inference,
)
from .weights import (
    WeightStore,
    load_weights,
    random_weights,
    save_weights,
    validate_weights,
)

__all__ = [name for name in dir() if not name.startswith("_")]
