"""Desk-scale siamese self-supervised pre-training with per-view-type
predictors, multi-crop, and asymmetric cutout views."""

import os as _os

# Honor MULAN_THREADS before numpy spins up its thread pools.  Best-effort:
# if numpy was imported first, the cli applies threadpoolctl at runtime.
_threads = _os.environ.get("MULAN_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .augment import (AugRecord, CropRect, Recipe, View, ViewType,  # noqa: E402
                      apply_cutout, build_views, photometric,
                      sample_cutout_rect, sample_resized_crop)
from .config import RunConfig  # noqa: E402
from .data import (Dataset, DatasetStats, compute_stats,  # noqa: E402
                   load_cifar_binary, make_synth_dataset, synth_shapes)
from .errors import (CheckpointError, ConfigError, DataFormatError,  # noqa: E402
                     DegenerateBatchError, MulanError, NonFiniteError,
                     ShapeError)
from .evaluate import (EvalReport, FeatureBank, evaluate, knn_classify,  # noqa: E402
                       linear_probe, standardize)
from .model import HeadConfig, SiameseModel  # noqa: E402
from .objective import (LossWeights, Pair, byol_pair_loss,  # noqa: E402
                        infonce_loss, route_pairs, simsiam_pair_loss,
                        total_loss)
from .tensor import Tape, Tensor, no_grad  # noqa: E402
from .train import (CollapseStats, MetricsRow, Schedule,  # noqa: E402
                    SGDMomentum, TrainSettings, collapse_stats, ema_tau_at,
                    lr_at, run_training, train_step)

__version__ = "0.1.0"
