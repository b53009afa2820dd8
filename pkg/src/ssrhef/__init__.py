"""Crowd counting with multi-scale semantic refinement and a hard-example
focusing regression loss, on a small numpy autodiff core."""

from .groundtruth import AnnotationSet, compute_thr, encode_class_label, encode_density, make_bundle
from .losses import HefConfig, LossBreakdown, LossWeights, cls_loss, dice_loss, hef_loss, overall_loss
from .model import ModelConfig, backward, build_model, forward, predict_count

__version__ = "0.1.0"
