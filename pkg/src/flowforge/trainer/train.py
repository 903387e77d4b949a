"""Stage loop for the toy rectified-flow trainer: pretrain -> sft -> dpo -> nft.

"Ranks" are simulated inside one process: the global batch is split into
``world_size`` contiguous shards and shard r draws its timesteps from the
interval the rotation schedule gives rank r at that step.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import objectives as obj
from ..timesteps import (
    CurriculumSchedule,
    StratifiedConfig,
    WeightConfig,
    draw_timestep,
    logit_normal_weight,
    rank_generators,
    rotation_permutation,
)
from .data import SyntheticDataset, TargetRegion, nft_reward_fn
from .ema import EmaState, ema_update
from .identity import ToyIdentityHarness, batch_identity_loss
from .model import ParameterVector, backward_velocity, forward_velocity
from .optim import AdamW, clip_grad_norm, warmup_lr
from .sampling import integrate

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft", "dpo", "nft")

# full-scale per-stage schedule; the toy presets keep its warm-up / steps ratio
FULL_SCALE_SCHEDULE = {
    "pretrain": {"steps": 300_000, "warmup_steps": 0, "resolution": "384-512"},
    "ct": {"steps": 65_000, "warmup_steps": 0, "resolution": "512-1024"},
    "sft": {"steps": 5_000, "warmup_steps": 500, "resolution": "1024"},
    "dpo": {"steps": 5_000, "warmup_steps": 500, "resolution": "1024"},
    "nft": {"steps": 500, "warmup_steps": 0, "resolution": "1024"},
}

METRIC_COLUMNS = (
    "step", "stage", "loss", "flow_loss", "mse", "id_loss", "dpo_loss", "win_diff",
    "lose_diff", "nft_loss", "reward_mean", "lr", "grad_norm", "t_mean", "t_min", "t_max",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 2000
    warmup_steps: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_clip: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    world_size: int = 8
    rotation_period: int = 1
    # high-noise bias exponent a0 at step 0; None disables the curriculum
    curriculum_exponent: float | None = None
    logit_normal: bool = True
    logit_loc: float = 0.0
    logit_scale: float = 1.0
    ema_decay: float | str | None = None
    identity_eta: float = 0.0
    dpo_beta: float = 1.0
    dpo_omega: float = 2.0
    dpo_lambda: float = 0.0
    nft_beta: float = 1.0
    nft_old_refresh: int = 0
    nft_sample_steps: int = 10
    preferred_modes: tuple[int, ...] | None = None
    reward_radius: float = 3.0
    reward_sharpness: float = 2.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("steps and warmup_steps must be >= 0")
        if self.batch_size < 1 or self.batch_size % self.world_size:
            raise ValueError("batch_size must be a positive multiple of world_size")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, TrainConfig] = {
    "pretrain": TrainConfig(stage="pretrain", steps=2000, learning_rate=1e-3, curriculum_exponent=3.0),
    "sft": TrainConfig(stage="sft", steps=500, warmup_steps=50, learning_rate=2e-4, ema_decay="mean"),
    "dpo": TrainConfig(stage="dpo", steps=500, warmup_steps=50, learning_rate=1e-3, logit_normal=False,
                       dpo_beta=1.0, dpo_omega=2.0, dpo_lambda=0.1),
    "nft": TrainConfig(stage="nft", steps=300, warmup_steps=0, learning_rate=1e-3, logit_normal=False,
                       nft_beta=1.0),
}


def preset(stage: str, **overrides) -> TrainConfig:
    return PRESETS[stage].replace(**overrides)


@dataclass
class TrainResult:
    params: ParameterVector
    ema: EmaState | None
    metrics: list[dict] = field(default_factory=list)
    # (step, rank, interval, t) for the first draw of each rank at each step
    timesteps: list[tuple[int, int, int, float]] = field(default_factory=list)


class _Timesteps:
    def __init__(self, config: TrainConfig):
        self.strat = StratifiedConfig(config.world_size, config.rotation_period, config.seed)
        self.gens = rank_generators(config.seed, config.world_size)
        self.shard = config.batch_size // config.world_size
        self.curriculum = (
            CurriculumSchedule(config.steps, config.curriculum_exponent)
            if config.curriculum_exponent is not None else None
        )

    def draw(self, step: int, log_rows: list) -> np.ndarray:
        perm = rotation_permutation(self.strat, step)
        out = []
        for rank, gen in enumerate(self.gens):
            t = draw_timestep(self.strat, rank, step, gen, self.shard, self.curriculum)
            log_rows.append((step, rank, perm[rank], float(t[0])))
            out.append(t)
        return np.concatenate(out)


def _preferred(config: TrainConfig, dataset: SyntheticDataset) -> np.ndarray:
    if config.preferred_modes is not None:
        return np.asarray(config.preferred_modes, dtype=int)
    return dataset.right_modes()


def target_region(config: TrainConfig, dataset: SyntheticDataset) -> TargetRegion:
    return TargetRegion(
        dataset.centers[_preferred(config, dataset)], config.reward_radius, config.reward_sharpness
    )


def _blank_row(step: int, stage: str) -> dict:
    row = dict.fromkeys(METRIC_COLUMNS, "")
    row["step"], row["stage"] = step, stage
    return row


def _noised(x0, eps, t):
    return (1.0 - t[:, None]) * x0 + t[:, None] * eps


def _flow_step(config, params, dataset, t, rng, harness, row):
    idx = rng.integers(len(dataset.x), size=config.batch_size)
    x0 = dataset.x[idx]
    eps = rng.standard_normal(x0.shape)
    x_t, v_target = _noised(x0, eps, t), eps - x0
    weights = (
        logit_normal_weight(t, WeightConfig(config.logit_loc, config.logit_scale))
        if config.logit_normal else np.ones_like(t)
    )
    v, cache = forward_velocity(params, x_t, t, return_cache=True)
    err = v - v_target
    b, d = err.shape
    mse = np.mean(err * err, axis=1)
    flow = float(np.mean(weights * mse))
    grad_v = (2.0 / (b * d)) * weights[:, None] * err
    loss = flow
    row["flow_loss"], row["mse"] = flow, float(np.mean(mse))
    if config.identity_eta > 0:
        x_hat = obj.one_step_denoise(x_t, t, v)
        id_loss, id_grad = batch_identity_loss(harness, x_hat, x0)
        lam = obj.identity_weight(t, obj.ConsistencyConfig(config.identity_eta))
        loss += float(np.mean(lam * id_loss))
        # d x_hat / d v = -sigma
        grad_v += (lam / b)[:, None] * id_grad * (-t[:, None])
        row["id_loss"] = float(np.mean(id_loss))
    return loss, backward_velocity(params, cache, grad_v)


def _dpo_step(config, params, reference, dataset, t, rng, row):
    pref = dataset.mask(_preferred(config, dataset))
    win_pool, lose_pool = np.flatnonzero(pref), np.flatnonzero(~pref)
    b = config.batch_size
    x_w = dataset.x[rng.choice(win_pool, size=b)]
    x_l = dataset.x[rng.choice(lose_pool, size=b)]
    # one (t, eps) per pair, shared by its win and lose member
    eps = rng.standard_normal(x_w.shape)
    x0 = np.concatenate([x_w, x_l])
    tt = np.concatenate([t, t])
    ee = np.concatenate([eps, eps])
    x_t, v_target = _noised(x0, ee, tt), ee - x0
    v, cache = forward_velocity(params, x_t, tt, return_cache=True)
    v_ref = forward_velocity(reference, x_t, tt)
    d = v.shape[1]
    err = v - v_target
    l_pol = np.mean(err * err, axis=1)
    l_ref = np.mean((v_ref - v_target) ** 2, axis=1)
    cfg = obj.DpoConfig(config.dpo_beta, config.dpo_omega, config.dpo_lambda)
    loss, d_win, d_lose = obj.asymmetric_dpo_batch(l_pol[:b], l_ref[:b], l_pol[b:], l_ref[b:], cfg)
    dl = np.concatenate([d_win, d_lose]) / b
    grad_v = (2.0 / d) * dl[:, None] * err
    row["dpo_loss"] = float(np.mean(loss))
    row["win_diff"] = float(np.mean(l_pol[:b] - l_ref[:b]))
    row["lose_diff"] = float(np.mean(l_pol[b:] - l_ref[b:]))
    row["mse"] = row["flow_loss"] = float(np.mean(l_pol))
    return float(np.mean(loss)), backward_velocity(params, cache, grad_v)


def _nft_step(config, params, old, region, t, rng, row):
    b = config.batch_size
    x0 = integrate(old, rng.standard_normal((b, params.spec.data_dim)), config.nft_sample_steps)
    reward = nft_reward_fn(x0, region)
    eps = rng.standard_normal(x0.shape)
    x_t, v_target = _noised(x0, eps, t), eps - x0
    v, cache = forward_velocity(params, x_t, t, return_cache=True)
    v_old = forward_velocity(old, x_t, t)
    per, grad_v = obj.nft_terms(v, v_old, v_target, reward, obj.NftConfig(config.nft_beta))
    row["nft_loss"] = float(np.mean(per))
    row["reward_mean"] = float(np.mean(reward))
    row["mse"] = row["flow_loss"] = float(np.mean((v - v_target) ** 2))
    return float(np.mean(per)), backward_velocity(params, cache, grad_v / b)


def train_stage(
    config: TrainConfig,
    dataset: SyntheticDataset,
    params: ParameterVector,
    reference: ParameterVector | None = None,
    ema: EmaState | None = None,
) -> TrainResult:
    """Run one stage; ``reference`` is the frozen DPO reference / initial NFT snapshot."""
    if config.stage in ("dpo", "nft") and reference is None:
        raise ValueError(f"stage {config.stage!r} needs a frozen reference checkpoint")
    params = params.copy()
    if ema is None and config.ema_decay is not None:
        ema = EmaState.start(params.values, config.ema_decay)
    result = TrainResult(params, ema)
    if config.steps == 0:
        return result

    opt = AdamW(config.learning_rate, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    sampler = _Timesteps(config)
    rng = np.random.default_rng([config.seed, STAGES.index(config.stage), 0xBA7C])
    harness = ToyIdentityHarness(params.spec.data_dim, seed=config.seed)
    old = reference.copy() if reference is not None else None
    region = target_region(config, dataset)

    for step in range(1, config.steps + 1):
        if config.stage == "nft" and config.nft_old_refresh and step > 1 and (step - 1) % config.nft_old_refresh == 0:
            old = params.copy()
        row = _blank_row(step, config.stage)
        t = sampler.draw(step - 1, result.timesteps)
        # overflow is caught by the explicit finiteness checks below
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                if config.stage in ("pretrain", "sft"):
                    loss, grad = _flow_step(config, params, dataset, t, rng, harness, row)
                elif config.stage == "dpo":
                    loss, grad = _dpo_step(config, params, reference, dataset, t, rng, row)
                else:
                    loss, grad = _nft_step(config, params, old, region, t, rng, row)
            except FloatingPointError as exc:
                raise DivergenceError(step, str(exc).removeprefix("non-finite ")) from exc
            if not np.isfinite(loss):
                raise DivergenceError(step)
            grad, norm = clip_grad_norm(grad, config.gradient_clip)
            lr = warmup_lr(config.learning_rate, step, config.warmup_steps)
            params = ParameterVector(opt.step(params.values, grad, lr), params.spec)
        if not np.all(np.isfinite(params.values)):
            raise DivergenceError(step, "parameters")
        if ema is not None:
            ema = ema_update(ema, params.values)
        row.update(loss=loss, lr=lr, grad_norm=norm,
                   t_mean=float(t.mean()), t_min=float(t.min()), t_max=float(t.max()))
        result.metrics.append(row)
        if step % 500 == 0:
            log.info("%s step %d loss %.5f", config.stage, step, loss)

    result.params, result.ema = params, ema
    return result
