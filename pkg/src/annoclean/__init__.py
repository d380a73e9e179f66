"""Learned removal of annotation overlays from ultrasound images."""
from .datagen import (ChannelNormalizer, DatasetManifest, NormalizationMode, SampleTuple, build_dataset,
                      compute_channel_stats, load_sample, split, tree_digest)
from .estimator import AnnotationRemover, check_images
from .exceptions import (AnnocleanError, CheckpointError, CollisionError, ConfigurationError,
                         NonFiniteLossError, RegistryError, ShapeError, StampError)
from .metrics import (MetricReport, dice, evaluate, extract_segmentation, format_table, iou, pixel_accuracy,
                      psnr_hvs_m, ssim)
from .model import ModelSpec, TrainedModel, build_model, forward, load_checkpoint, save_checkpoint
from .synth import AnnotationKind, AnnotationStamp, Annotator, composite, load_stamp_library, render_annotation
from .train import LossCurve, LossSpec, TrainConfig, convergence_step, make_loss, train

__version__ = "0.1.0"
