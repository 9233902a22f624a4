"""Few-shot prompt learning with jigsaw self-supervision and visual-attentive prompts."""

from .backbone import ClipBackbone, StandInBackbone, build_backbone
from .data import DatasetManifest, SplitFile, generate_synthetic_dataset, load_manifest, make_b2n_split, sample_shots
from .jigsaw import PatchPermutation, apply_jigsaw, inverse, sample_permutation
from .losses import LossReport, LossWeights, barlow_twins, cross_entropy, diversity_loss, reconstruction_loss, total_loss
from .model import CSaw
from .protocols import EvalResult, TaskSpec, build_task, evaluate, harmonic_mean
from .recon import Reconstructor, reconstruct
from .trainer import Checkpoint, ImageClassifier, TrainConfig, TrainSet, fit
from .vatp import VatGenerator, ape, assemble_prompts, compute_style_stats, predict_probs

__version__ = "0.1.0"
