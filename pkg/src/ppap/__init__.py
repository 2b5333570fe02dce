"""Plateau-phase activity profiles for continual learning, with SI/EWC baselines."""

from .data import Batch, LabeledSet, SplitPlan, TaskSpec
from .errors import ConfigError, ContractError, FormatError, NumericError, StateError
from .harness import MethodSpec, MetricsRecord, RunConfig, euclidean_score, evaluate, run_loco, run_sequence, sweep_loco
from .models import activate_head, build_cnn_multihead, build_convnet, build_mlp, init_params
from .nn import ParamStore, backward, finite_diff_check, forward
from .optim import SGD, Adam, apply_update
from .plateau import (
    ActivityAccumulator,
    BlendConfig,
    PlateauProfile,
    PlateauProfiler,
    combine_profiles,
    finalize_profile,
    load_profile,
    make_ppap_hook,
    save_profile,
)

__version__ = "0.1.0"
