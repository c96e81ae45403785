"""Dual-surrogate contrastive pretraining for skeleton action segmentation."""

from .augment import (
    MultiActionPermutation,
    SimilarityTransform,
    crop,
    estimate_similarity_transform,
    shear,
    shuffle,
    shuffle_and_warp,
    warp_pair,
)
from .cpc import BankSet, MemoryBank, cpc_loss, instance_loss, permutation_loss, update_banks
from .data import (
    Dataset,
    SegmentAnnotation,
    SkeletonGraph,
    TrimmedClip,
    UntrimmedVideo,
    default_skeleton_graph,
    load_dataset,
    load_sequence,
    save_sequence,
    synth_trimmed,
    synth_untrimmed,
    trim_untrimmed,
)
from .encoder import (
    Encoder,
    EncoderConfig,
    ProjectionSet,
    extract_features,
    gcn_forward,
    load_checkpoint,
    momentum_update,
    project,
    save_checkpoint,
    similarity,
    tcn_forward,
)
from .metrics import frame_accuracy, frames_to_segments, map_at_iou, mean_iou, per_frame_map, segment_iou
from .pretrain import PretrainConfig, pretrain, pretrain_step, sample_clip_set, train_baseline_recognition
from .ror import RORHead, mapping_from_index, mapping_index, positional_encoding, ror_loss
from .segmentation import SegmentationHead, frame_labels_from_annotations, segment_forward, train_head

__version__ = "0.1.0"
