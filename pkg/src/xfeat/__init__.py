"""Lightweight local feature extraction, matching and homography evaluation."""

from .tensor import Tensor, FlopCounter, no_grad
from .backbone import BackboneConfig, XFeatModel, build_model, forward_features, reduced_config
from .heads import Keypoint, keypoint_head_forward, reassemble_heatmap, detect_keypoints
from .matcher import (
    FeatureSet, MatchSet, sample_descriptors, mnn_match, refine_matches,
    sparse_extract, semi_dense_extract,
)
from .training import (
    CorrespondenceSet, LossWeights, TrainConfig, HarrisTeacher,
    loss_dual_softmax, loss_reliability, loss_fine, loss_keypoint, total_loss,
    synth_warp_pair, train,
)
from .geometry import (
    dlt_homography, ransac_homography, corner_error, mha, mean_inlier_ratio,
    inlier_count, EvalReport,
)
from .io import save_weights, load_weights, save_features, load_features, decode_image
from .estimator import XFeatExtractor, HomographyMatcher

__all__ = [
    "Tensor", "FlopCounter", "no_grad",
    "BackboneConfig", "XFeatModel", "build_model", "forward_features", "reduced_config",
    "Keypoint", "keypoint_head_forward", "reassemble_heatmap", "detect_keypoints",
    "FeatureSet", "MatchSet", "sample_descriptors", "mnn_match", "refine_matches",
    "sparse_extract", "semi_dense_extract",
    "CorrespondenceSet", "LossWeights", "TrainConfig", "HarrisTeacher",
    "loss_dual_softmax", "loss_reliability", "loss_fine", "loss_keypoint", "total_loss",
    "synth_warp_pair", "train",
    "dlt_homography", "ransac_homography", "corner_error", "mha",
    "mean_inlier_ratio", "inlier_count", "EvalReport",
    "save_weights", "load_weights", "save_features", "load_features", "decode_image",
    "XFeatExtractor", "HomographyMatcher",
]

__version__ = "0.1.0"
