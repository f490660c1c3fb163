"""Person-centric action recognition: an inflated 3D ResNet with a pose head
and a pose-sequence classifier, trained jointly and fused at test time."""

from .backbone import BackboneConfig, build_backbone, inflate_weights, rgb_loss
from .config import TrainConfig, load_config, toy_config
from .geometry import Box, ClipSpec, crop_resize, expand_to_aspect, jitter_box, merge_boxes, sample_clip
from .inference import compute_cam, evaluate_video, oks_ap, three_crop_boxes, top1_accuracy
from .model import ActionMachine, build_model
from .posehead import decode_keypoints, encode_targets, heatmap_loss, offset_loss, pose_loss
from .synthdata import SynthConfig, generate_dataset, load_manifest
from .trainer import clip_gradients, fit, lr_at, multitask_loss, train_step

__version__ = "0.1.0"
