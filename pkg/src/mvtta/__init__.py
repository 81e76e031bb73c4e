"""Source-free multi-view test-time adaptation on a small NumPy classifier."""

from .augment import AugmentSpec, strong_augment, weak_augment
from .datagen import PatientRecord, SynthConfig, ViewSample, generate, load_jsonl, save_jsonl
from .memory_queue import MemoryQueue, cosine_distance, knn_refine
from .metrics import MetricsReport, accuracy, macro_auc, macro_f1
from .model import (Architecture, Model, MomentumModel, Params, backward, ema_update,
                    sgd_step)
from .mvlce import multiview_ensemble, predict_offline, predict_online
from .pdc import balanced_undersample, pseudo_label
from .tsd import AdaptConfig, ce_loss, diversity_loss, smooth_label, total_loss

__version__ = "0.1.0"
