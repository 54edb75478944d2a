"""Losses, optimizer and the two-phase training procedure.

Phase 1 minimizes mean absolute intensity error with Adam.  Phase 2 adds a
Wasserstein critic with gradient penalty: the critic trains alone for a
warmup stretch, then alternates with the generator at a fixed critic:generator
ratio, with periodic critic-only bursts so the critic stays well trained.
The combined generator objective is ``l1 + lambda_gan * (-mean critic score)``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .autodiff import (
    ShapeError, Tensor, add, add_scalar, backward, grad, mul_scalar, negate,
    no_grad, reduce_mean, reduce_sum, reshape, sqrt, square, sub,
)
from .models import (
    ModelParams, discriminator_forward, generator_forward, save_checkpoint,
)

METRICS_COLUMNS = ("step", "phase", "action", "l1", "loss_gan", "em_estimate",
                   "penalty", "lr", "wall_ms")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; a diagnostic checkpoint was written."""


class MissingGradientError(RuntimeError):
    """A parameter had no gradient in the map passed to the optimizer."""


@dataclass
class TrainConfig:
    """Every knob of the two-phase procedure, with published defaults."""

    lambda_gan: float = 0.001
    lambda_gp: float = 10.0
    lr_pretrain: float = 1e-4
    lr_gan: float = 5e-6
    batch_size: int = 2
    pretrain_steps: int = 500_000
    gan_steps: int = 550_000
    critic_warmup_steps: int = 10_000
    critic_per_gen: int = 7
    extra_critic_every: int = 500
    extra_critic_steps: int = 200
    seed: int = 0
    patch_size: int = 32
    precision: str = "float32"
    checkpoint_every: int = 1000
    validate_every: int = 200

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_gan <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_gan < 0 or self.lambda_gp < 0:
            raise ValueError("loss weights must be non-negative")
        if self.critic_per_gen < 1:
            raise ValueError("critic_per_gen must be >= 1")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("batch_size and patch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


# ---------------------------------------------------------------------------
# losses


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean absolute difference over every voxel (and batch item)."""
    if sr.shape != hr.shape:
        raise ShapeError(f"l1_loss: shapes differ, {sr.shape} vs {hr.shape}")
    return reduce_mean(sub(sr, hr).abs())


def gan_generator_loss(critic_scores: Tensor) -> Tensor:
    """Negative mean critic score of generated images."""
    return negate(reduce_mean(critic_scores))


def combined_loss(l1: Tensor, gan: Tensor, lambda_gan: float) -> Tensor:
    return add(l1, mul_scalar(gan, lambda_gan))


def gradient_penalty(critic: Callable[[Tensor], Tensor], hr_batch: Tensor,
                     sr_batch: Tensor, epsilons: np.ndarray) -> Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Gradients are taken at per-item random interpolates between real and
    generated batches; the result is built with a recorded backward pass so
    it can itself be differentiated with respect to the critic parameters.
    """
    if hr_batch.shape != sr_batch.shape:
        raise ShapeError(f"gradient_penalty: batch shapes differ, "
                         f"{hr_batch.shape} vs {sr_batch.shape}")
    n = hr_batch.shape[0]
    eps = np.asarray(epsilons, dtype=hr_batch.dtype).reshape(n, 1, 1, 1, 1)
    if eps.shape[0] != n or np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("epsilons must be one value in [0,1] per batch item")
    mixed = Tensor(eps * hr_batch.data + (1.0 - eps) * sr_batch.data,
                   requires_grad=True)
    scores = critic(mixed)
    g = grad(reduce_sum(scores), mixed, create_graph=True)
    flat = reshape(g, (n, g.size // n))
    norms = sqrt(reduce_sum(square(flat), axes=1))
    return reduce_mean(square(add_scalar(norms, -1.0)))


def critic_loss(critic: Callable[[Tensor], Tensor], hr_batch: Tensor,
                sr_batch: Tensor, lambda_gp: float,
                epsilons: np.ndarray) -> Tensor:
    """Wasserstein critic objective: score gap plus weighted gradient penalty."""
    em_term = sub(reduce_mean(critic(sr_batch)), reduce_mean(critic(hr_batch)))
    gp = gradient_penalty(critic, hr_batch, sr_batch, epsilons)
    return add(em_term, mul_scalar(gp, lambda_gp))


def em_distance_estimate(critic: Callable[[Tensor], Tensor], hr_batch: Tensor,
                         sr_batch: Tensor) -> float:
    """Critic score gap between real and generated batches (quality indicator)."""
    with no_grad():
        return float(reduce_mean(critic(hr_batch)).item()
                     - reduce_mean(critic(sr_batch)).item())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[Tensor, Tensor],
              state: AdamState, lr: float):
    """Standard bias-corrected Adam update, in place on the parameter data.

    Every parameter must have a gradient in ``grads``; silent skips are a
    training bug, so a missing entry raises.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        entry = grads.get(p)
        if entry is None:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
        g = entry.data
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.shape} for {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# GAN schedule


@dataclass(frozen=True)
class GanSchedule:
    """Counters of the alternating phase; advanced purely by schedule_next."""

    critic_steps: int = 0
    generator_steps: int = 0
    phase2_actions: int = 0
    cycle_pos: int = 0
    extra_remaining: int = 0
    next_burst_at: int = 0  # 0 means "not yet initialized from the config"


CRITIC_STEP = "critic_step"
GENERATOR_STEP = "generator_step"


def schedule_next(s: GanSchedule, cfg: TrainConfig) -> tuple[str, GanSchedule]:
    """Pure transition: warmup -> ratio alternation with periodic bursts.

    Warmup: critic only until ``critic_warmup_steps``.  Afterwards every
    action (critic or generator, bursts included) counts toward the
    ``extra_critic_every`` boundary; when the boundary is reached a run of
    ``extra_critic_steps`` consecutive critic actions is interleaved and the
    ratio cycle resumes where it left off.
    """
    if s.critic_steps < cfg.critic_warmup_steps:
        return CRITIC_STEP, replace(s, critic_steps=s.critic_steps + 1)

    bursts_on = cfg.extra_critic_every > 0 and cfg.extra_critic_steps > 0
    next_burst = s.next_burst_at if s.next_burst_at else cfg.extra_critic_every

    if s.extra_remaining > 0:
        return CRITIC_STEP, replace(
            s, critic_steps=s.critic_steps + 1,
            phase2_actions=s.phase2_actions + 1,
            extra_remaining=s.extra_remaining - 1,
            next_burst_at=next_burst)
    if bursts_on and s.phase2_actions >= next_burst:
        return CRITIC_STEP, replace(
            s, critic_steps=s.critic_steps + 1,
            phase2_actions=s.phase2_actions + 1,
            extra_remaining=cfg.extra_critic_steps - 1,
            next_burst_at=next_burst + cfg.extra_critic_every)
    if s.cycle_pos < cfg.critic_per_gen:
        return CRITIC_STEP, replace(
            s, critic_steps=s.critic_steps + 1,
            phase2_actions=s.phase2_actions + 1,
            cycle_pos=s.cycle_pos + 1,
            next_burst_at=next_burst)
    return GENERATOR_STEP, replace(
        s, generator_steps=s.generator_steps + 1,
        phase2_actions=s.phase2_actions + 1,
        cycle_pos=0,
        next_burst_at=next_burst)


# ---------------------------------------------------------------------------
# data source


class PatchDataset:
    """Paired LR/HR patches extracted on a margin grid from whole volumes.

    Batches cycle epochs with a seeded reshuffle, so the sample stream is a
    pure function of the seed.  Optional augmentation applies the same seeded
    axis flips to both members of a pair.
    """

    def __init__(self, lr_volumes, hr_volumes, patch_size: int,
                 margin: int = 3, dtype=np.float32, augment_flips: bool = False):
        from .patches import extract, plan_grid

        if len(lr_volumes) != len(hr_volumes):
            raise ValueError("need one LR volume per HR volume")
        lr_parts, hr_parts = [], []
        for lr, hr in zip(lr_volumes, hr_volumes):
            if lr.shape != hr.shape:
                raise ValueError(f"LR/HR shape mismatch: {lr.shape} vs {hr.shape}")
            grid = plan_grid(lr.shape, (patch_size,) * 3, margin)
            lr_parts.append(extract(np.asarray(lr.values, dtype=dtype), grid))
            hr_parts.append(extract(np.asarray(hr.values, dtype=dtype), grid))
        self.lr = np.concatenate(lr_parts)[:, None]  # (P, 1, d, h, w)
        self.hr = np.concatenate(hr_parts)[:, None]
        self.augment_flips = augment_flips

    def __len__(self) -> int:
        return self.lr.shape[0]

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(self))
            for start in range(0, len(order) - batch_size + 1, batch_size):
                idx = order[start:start + batch_size]
                lr, hr = self.lr[idx].copy(), self.hr[idx].copy()
                if self.augment_flips:
                    for axis in (2, 3, 4):
                        if rng.random() < 0.5:
                            lr = np.flip(lr, axis=axis)
                            hr = np.flip(hr, axis=axis)
                    lr, hr = np.ascontiguousarray(lr), np.ascontiguousarray(hr)
                yield lr, hr

    def fixed_batches(self, batch_size: int, count: int, seed: int
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
        """A frozen list of batches, e.g. for validation."""
        gen = self.batches(batch_size, seed)
        return [next(gen) for _ in range(count)]


# ---------------------------------------------------------------------------
# sinks


class TrainSink:
    """Receives metric rows, validation rows and checkpoints.

    With an output directory it appends metrics.csv / validation.csv and
    writes checkpoints; without one it only keeps rows in memory (tests).
    """

    def __init__(self, out_dir: Optional[Path] = None):
        self.out_dir = Path(out_dir) if out_dir else None
        self.rows: list[dict] = []
        self.validation_rows: list[dict] = []
        self._metrics_fh = None
        self._val_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
            self._metrics_fh = open(self.out_dir / "metrics.csv", "w", newline="")
            self._metrics_writer = csv.writer(self._metrics_fh)
            self._metrics_writer.writerow(METRICS_COLUMNS)
            self._val_fh = open(self.out_dir / "validation.csv", "w", newline="")
            self._val_writer = csv.writer(self._val_fh)
            self._val_writer.writerow(("step", "phase", "l1", "nrmse"))

    def log_step(self, **row):
        self.rows.append(row)
        if self._metrics_fh:
            self._metrics_writer.writerow([row.get(c, "") for c in METRICS_COLUMNS])

    def log_validation(self, **row):
        self.validation_rows.append(row)
        if self._val_fh:
            self._val_writer.writerow([row.get(c, "") for c in ("step", "phase", "l1", "nrmse")])

    def save(self, name: str, *models: ModelParams):
        if not self.out_dir:
            return
        for model in models:
            save_checkpoint(self.out_dir / "checkpoints" / f"{name}.{model.kind}.ckpt",
                            model)

    def close(self):
        for fh in (self._metrics_fh, self._val_fh):
            if fh:
                fh.close()
        self._metrics_fh = self._val_fh = None


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    generator: ModelParams
    critic: Optional[ModelParams]
    sink: TrainSink
    initial_val_l1: Optional[float] = None
    final_val_l1: Optional[float] = None


def _check_finite(value: float, step: int, what: str, sink: TrainSink,
                  *models: ModelParams):
    if math.isfinite(value):
        return
    sink.save(f"diverged-{step:08d}", *models)
    raise TrainingDiverged(f"{what} became non-finite ({value}) at step {step}")


def _ensure_norm_stats(gen: ModelParams, data: "PatchDataset", cfg: TrainConfig):
    """Populate batch-norm running statistics with one no-grad train-mode
    forward, so eval-mode passes (validation, critic-step SR generation) are
    legal before the first optimizer step."""
    if all(s.initialized for s in gen.states.values()):
        return
    warm_lr, _ = next(data.batches(cfg.batch_size, cfg.seed + 4242))
    with no_grad():
        generator_forward(gen, Tensor(warm_lr), mode="train")


def _validate(gen: ModelParams, batches, data_range: float = 1.0
              ) -> tuple[float, float]:
    """Mean L1 and range-normalized RMSE over frozen validation batches."""
    l1_sum = 0.0
    sq_sum = 0.0
    count = 0
    with no_grad():
        for lr, hr in batches:
            sr = generator_forward(gen, Tensor(lr), mode="eval").data
            l1_sum += float(np.abs(sr - hr).mean())
            sq_sum += float(((sr - hr) ** 2).mean())
            count += 1
    return l1_sum / count, math.sqrt(sq_sum / count) / data_range


def train(cfg: TrainConfig, generator: ModelParams, data: PatchDataset,
          critic: Optional[ModelParams] = None,
          val_data: Optional[PatchDataset] = None,
          sink: Optional[TrainSink] = None) -> TrainResult:
    """Run phase 1 (L1 pretraining) then phase 2 (GAN) per the config.

    Either phase is skipped when its step budget is zero.  The GAN phase
    expects ``generator`` to carry pretrained weights (load them from a
    phase-1 checkpoint) and a critic sized for ``cfg.patch_size`` inputs.
    Fully deterministic for a fixed config: data order, gradient-penalty
    draws and initialization all derive from ``cfg.seed``.
    """
    sink = sink or TrainSink()
    dtype = cfg.dtype
    gen = generator if generator.dtype == dtype else generator.cast(dtype)
    cri = None
    if cfg.gan_steps > 0:
        if critic is None:
            raise ValueError("GAN phase requested but no critic parameters given")
        cri = critic if critic.dtype == dtype else critic.cast(dtype)
        if cri.config.input_size != cfg.patch_size:
            raise ShapeError(f"critic built for {cri.config.input_size}^3 inputs "
                             f"but patches are {cfg.patch_size}^3")

    val_batches = None
    if val_data is not None:
        n_val = max(1, min(8, len(val_data) // cfg.batch_size))
        val_batches = val_data.fixed_batches(cfg.batch_size, n_val, cfg.seed + 9999)

    if val_batches or cfg.gan_steps > 0:
        _ensure_norm_stats(gen, data, cfg)

    result = TrainResult(gen, cri, sink)

    if cfg.pretrain_steps > 0:
        _run_pretrain(cfg, gen, data, val_batches, sink, result)
    if cfg.gan_steps > 0:
        _run_gan(cfg, gen, cri, data, val_batches, sink, result)
    sink.save("final", *(m for m in (gen, cri) if m is not None))
    return result


def _run_pretrain(cfg, gen, data, val_batches, sink, result):
    opt = AdamState.for_params(gen.params)
    stream = data.batches(cfg.batch_size, cfg.seed)
    if val_batches:
        l1_val, nrmse_val = _validate(gen, val_batches)
        result.initial_val_l1 = l1_val
        sink.log_validation(step=0, phase="pretrain", l1=l1_val, nrmse=nrmse_val)
    for step in range(1, cfg.pretrain_steps + 1):
        t0 = time.perf_counter()
        lr_b, hr_b = next(stream)
        sr = generator_forward(gen, Tensor(lr_b), mode="train")
        loss = l1_loss(sr, Tensor(hr_b))
        value = loss.item()
        _check_finite(value, step, "pretrain L1", sink, gen)
        grads = backward(loss)
        adam_step(gen.params, grads, opt, cfg.lr_pretrain)
        sink.log_step(step=step, phase="pretrain", action=GENERATOR_STEP,
                      l1=value, loss_gan="", em_estimate="", penalty="",
                      lr=cfg.lr_pretrain,
                      wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
        if val_batches and step % cfg.validate_every == 0:
            l1_val, nrmse_val = _validate(gen, val_batches)
            result.final_val_l1 = l1_val
            sink.log_validation(step=step, phase="pretrain", l1=l1_val,
                                nrmse=nrmse_val)
        if step % cfg.checkpoint_every == 0:
            sink.save(f"pretrain-{step:08d}", gen)
    if val_batches:
        l1_val, nrmse_val = _validate(gen, val_batches)
        result.final_val_l1 = l1_val
        sink.log_validation(step=cfg.pretrain_steps, phase="pretrain",
                            l1=l1_val, nrmse=nrmse_val)


def _run_gan(cfg, gen, cri, data, val_batches, sink, result):
    gen_opt = AdamState.for_params(gen.params)
    cri_opt = AdamState.for_params(cri.params)
    stream = data.batches(cfg.batch_size, cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    schedule = GanSchedule()

    def critic_fn(x):
        return discriminator_forward(cri, x)

    for step in range(1, cfg.gan_steps + 1):
        t0 = time.perf_counter()
        action, schedule = schedule_next(schedule, cfg)
        lr_b, hr_b = next(stream)
        eps = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        if action == CRITIC_STEP:
            with no_grad():
                sr_b = generator_forward(gen, Tensor(lr_b), mode="eval").data
            hr_t, sr_t = Tensor(hr_b), Tensor(sr_b)
            mean_sr = reduce_mean(critic_fn(sr_t))
            mean_hr = reduce_mean(critic_fn(hr_t))
            gp = gradient_penalty(critic_fn, hr_t, sr_t, eps)
            loss = add(sub(mean_sr, mean_hr), mul_scalar(gp, cfg.lambda_gp))
            value = loss.item()
            em = float(mean_hr.item() - mean_sr.item())
            penalty = gp.item()
            _check_finite(value, step, "critic loss", sink, gen, cri)
            grads = backward(loss)
            adam_step(cri.params, grads, cri_opt, cfg.lr_gan)
            sink.log_step(step=step, phase="gan", action=action, l1="",
                          loss_gan=value, em_estimate=em, penalty=penalty,
                          lr=cfg.lr_gan,
                          wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
        else:
            cri.set_requires_grad(False)
            try:
                sr = generator_forward(gen, Tensor(lr_b), mode="train")
                l1 = l1_loss(sr, Tensor(hr_b))
                gan = gan_generator_loss(critic_fn(sr))
                loss = combined_loss(l1, gan, cfg.lambda_gan)
                value = loss.item()
                _check_finite(value, step, "generator loss", sink, gen, cri)
                grads = backward(loss)
                adam_step(gen.params, grads, gen_opt, cfg.lr_gan)
            finally:
                cri.set_requires_grad(True)
            sink.log_step(step=step, phase="gan", action=action, l1=l1.item(),
                          loss_gan=gan.item(), em_estimate="", penalty="",
                          lr=cfg.lr_gan,
                          wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
        if val_batches and step % cfg.validate_every == 0:
            l1_val, nrmse_val = _validate(gen, val_batches)
            result.final_val_l1 = l1_val
            sink.log_validation(step=step, phase="gan", l1=l1_val, nrmse=nrmse_val)
        if step % cfg.checkpoint_every == 0:
            sink.save(f"gan-{step:08d}", gen, cri)
