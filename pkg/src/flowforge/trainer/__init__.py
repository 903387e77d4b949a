from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticDataset, TargetRegion, nft_reward_fn, right_half_fraction
from .ema import RUNNING_MEAN, EmaState, ema_update
from .identity import ToyIdentityHarness, batch_identity_loss
from .model import MLPSpec, ParameterVector, backward_velocity, forward_velocity
from .optim import AdamW, clip_grad_norm, warmup_lr
from .sampling import euler_sample, integrate
from .train import (
    METRIC_COLUMNS, PRESETS, STAGES, FULL_SCALE_SCHEDULE, DivergenceError, TrainConfig, TrainResult,
    preset, target_region, train_stage,
)
