"""Separable prompt learning for face-forgery detection.

Dual learnable prompts over a frozen vision-language dual encoder: a
forgery-specific stream drives classification while a forgery-irrelevant
stream absorbs content cues, trained in two stages with disentanglement,
diversity, alignment, and contrastive objectives. Ships a deterministic toy
backend, video-level forensic metrics, and a perturbation-robustness
harness.
"""

from .config import (ConfigBundle, ConfigError, LossWeights, ModelConfig,
                     TrainConfig, bundle_from_dict, load_config, save_config,
                     warmup_weight)
from .backend import DTYPE, DualEncoder, LowRankAdapter, TextEmbedding, ToyDualEncoder, VisionFeature
from .prompts import PromptStream, encode_stream
from .alignment import AlignmentBlock, ConcatFusion, SigmaProjection
from .model import (FROZEN_PREFIX, STAGE1_TRAINABLE_PREFIXES, FeatureBundle,
                    ForgeryDetector, build_toy_detector, from_archive_name,
                    parameter_checksum, to_archive_name)
from .losses import (FeatureCollapseError, LossReport, loss_align, loss_align_terms,
                     loss_cls, loss_con, loss_dis, loss_div, loss_pre, loss_total)
from .checkpoint import CheckpointError, load_archive, load_checkpoint, save_archive, save_checkpoint
from .data import (AUGMENT_FAMILIES, PERTURB_FAMILIES, Batch, BatchStream,
                   DataExhaustedError, ManifestError, PerturbationSpec, Sample,
                   augment, load_image, load_manifest, make_toy_dataset, perturb,
                   probe_features, save_image, split_samples)
from .metrics import ap, auc, eer, eer_detail
from .evaluation import (EvalReport, ScoreTable, aggregate_video, evaluate,
                         export_embeddings, export_saliency, linear_probe,
                         robustness_sweep, saliency_map, score_samples)
from .trainer import (FreezeViolationError, NonFiniteLossError, StagePlan,
                      TrainState, load_model_for_eval, predict, run_stage1,
                      run_stage2, save_initial_checkpoint, stage1_plan, stage2_plan)

__version__ = "0.1.0"
