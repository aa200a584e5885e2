"""Few-shot prototype adaptation for text-prompted segmentation.

The engine is backbone-agnostic: it consumes exported tensors (dense
features, decoder queries, text classification scores, masks) from an
interchange directory format, builds per-class visual prototypes from a
handful of annotated examples, fuses prototype similarity with the text
scores through a learnable scalar, fine-tunes only those parameters,
and evaluates the result.
"""

from .bundle_io import FeatureBundle, read_bundle, read_bundle_set, write_bundle
from .errors import BundleIOError, ConfigError, NumericalError, ProtoAdaptError
from .masks import (PooledFeature, decode_masks, iou, mask_average_pool,
                    resample_mask, rle_decode, rle_encode)
from .matching import (ExampleAssignment, TargetAssignment, assign_targets,
                       hungarian, match_examples)
from .metrics import (EvalReport, SegmentPrediction, compute_ap, compute_miou,
                      compute_pq, evaluate_bundles, infer_panoptic,
                      infer_semantic, iou_histogram, oracle_relabel)
from .prototypes import (PredictionRep, PrototypeBank, VisualExample,
                         fuse_scores, init_prototypes, load_bank, param_count,
                         prediction_reps, save_bank, visual_similarity)
from .rng import Rng
from .synthetic import SynthSpec, gen_synthetic, load_examples
from .training import (AdaptConfig, TrainState, adamw_step, ce_loss_and_grads,
                       cosine_lr, fit)

__all__ = [
    "AdaptConfig", "BundleIOError", "ConfigError", "EvalReport",
    "ExampleAssignment", "FeatureBundle", "NumericalError", "PooledFeature",
    "PredictionRep", "ProtoAdaptError", "PrototypeBank", "Rng",
    "SegmentPrediction", "SynthSpec", "TargetAssignment", "TrainState",
    "VisualExample", "adamw_step", "assign_targets", "ce_loss_and_grads",
    "compute_ap", "compute_miou", "compute_pq", "cosine_lr", "decode_masks",
    "evaluate_bundles", "fit", "fuse_scores", "gen_synthetic", "hungarian",
    "infer_panoptic", "infer_semantic", "init_prototypes", "iou",
    "iou_histogram", "load_bank", "load_examples", "mask_average_pool",
    "match_examples", "oracle_relabel", "param_count", "prediction_reps",
    "read_bundle", "read_bundle_set", "resample_mask", "rle_decode",
    "rle_encode", "save_bank", "visual_similarity", "write_bundle",
]

__version__ = "0.1.0"
