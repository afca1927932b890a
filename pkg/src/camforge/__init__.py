"""Weakly-supervised CAM generation from precomputed dense tensors.

The pipeline enhances smooth per-layer attention with clustered diffusion
attention, scores patches against text embeddings, retrieves dense knowledge
from a prototype key-value cache, optionally trains a small adapter on the
static pseudo masks, and evaluates the resulting segmentations.
"""

from .adapter import (
    AdapterState,
    TrainConfig,
    adamw_step,
    adapter_backward,
    adapter_forward,
    adapter_loss,
    fuse_dynamic,
    init_adapter,
    train_adapter,
)
from .attention import (
    AffinityLabel,
    AttentionMap,
    ClusterMask,
    VceConfig,
    acr_refine,
    affinity_from_clusters,
    apply_attention,
    cluster_attention,
    enhance_features,
    fuse_attention,
    refine_sd_attention,
    threshold_filter,
)
from .cache import (
    CacheModel,
    PrototypeSet,
    RetrievalConfig,
    assemble_cache,
    build_keys,
    build_values,
    fuse_static,
    kmeans,
    mask_average_pool,
    negative_values,
    static_retrieve,
)
from .cam import Cam, PseudoMask, cam_to_mask, cosine_sim, generate_patch_text_cam, minmax_norm
from .config import PipelineConfig, build_config, load_config_file, write_config_file
from .metrics import (
    ConfusionTally,
    accumulate,
    confusion_ratio,
    miou,
    precision_recall,
    split_by_cooccurrence,
)
from .tensorio import (
    Manifest,
    SampleRecord,
    SampleTensors,
    load_manifest,
    load_tensor,
    write_tensor,
)

__version__ = "0.1.0"
