"""Optimization loop for both model kinds.

Each epoch shuffles the training eyes (epoch index XOR run seed), walks
minibatches of 32 sequences (the baseline sees 32 * l single images per
minibatch so both kinds consume the same number of image slots), applies
the composite loss, and takes Adam steps. The validation metric is the
mean time-dependent concordance over the (t, dt) grid; the best epoch's
weights are kept, the learning rate halves after three stagnant epochs,
and training stops after ten epochs without improvement.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from .encoders import augment_images, pixel_stats, standardize
from .errors import ConfigError, EmptyCellError, NumericalError
from .losses import LossConfig, sequence_loss, baseline_loss
from .metrics import (DEFAULT_T_YEARS, DEFAULT_DT_YEARS, ModelScorer,
                      build_risk_cells, mean_grid_concordance)
from .model import (ModelConfig, KIND_LONGITUDINAL, forward_sequences,
                    forward_single_images, init_params)
from . import diffgraph as dg
from .survival import TimeGrid
from .synthcohort import EyeRecord, pad_and_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    patience: int = 10
    lr: float = 1e-4
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    batch_size_sequences: int = 32
    improvement_epsilon: float = 1e-6
    seed: int = 0
    val_t_years: tuple = DEFAULT_T_YEARS
    val_dt_years: tuple = DEFAULT_DT_YEARS

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size_sequences < 1:
            raise ConfigError("epochs, patience and batch size must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_t_years"] = list(self.val_t_years)
        d["val_dt_years"] = list(self.val_dt_years)
        return d


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place adaptive-moment update with bias correction."""
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite adjoint for tensor {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= (lr / b1t) * m / (np.sqrt(v / b2t) + eps)


@dataclass
class TrainResult:
    params: dict
    record: dict
    history: list
    best_epoch: int
    best_metric: float
    stopped_epoch: int
    diverged: bool = False


class TrainingSchedule:
    """Best-epoch tracking, plateau-based halving, and early stopping.

    An epoch improves when its metric exceeds the best by at least
    ``improvement_epsilon`` (ties are non-improvements). The learning rate
    halves once ``plateau_patience`` consecutive stagnant epochs accumulate
    (the counter then resets); training stops after ``patience`` epochs
    without a new best.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best_metric = -np.inf
        self.best_epoch = 0
        self.epochs_since_best = 0
        self._plateau_count = 0
        self.should_stop = False

    def update(self, epoch: int, metric: float) -> bool:
        """Record one epoch's validation metric; True if it is a new best."""
        improved = (np.isfinite(metric)
                    and metric - self.best_metric >= self.cfg.improvement_epsilon)
        if improved:
            self.best_metric = metric
            self.best_epoch = epoch
            self.epochs_since_best = 0
            self._plateau_count = 0
        else:
            self.epochs_since_best += 1
            self._plateau_count += 1
            if self._plateau_count >= self.cfg.plateau_patience:
                self.lr *= self.cfg.plateau_factor
                self._plateau_count = 0
                log.info("plateau: halving learning rate to %.2e", self.lr)
        if self.epochs_since_best >= self.cfg.patience:
            self.should_stop = True
        return improved


def _derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence(entropy=key[0], spawn_key=key[1:])
               .generate_state(1)[0])


def baseline_batch_size(train_cfg: TrainConfig, l_max: int) -> int:
    """Images per baseline minibatch: matches the sequence model's image slots."""
    return train_cfg.batch_size_sequences * l_max


def _collect_grads(leaves: dict, params: dict) -> dict:
    return {name: (leaves[name].adjoint if leaves[name].adjoint is not None
                   else np.zeros_like(arr)) for name, arr in params.items()}


def train(train_eyes: list[EyeRecord], val_eyes: list[EyeRecord],
          model_cfg: ModelConfig, train_cfg: TrainConfig,
          loss_cfg: LossConfig | None = None,
          warm_start: dict | None = None) -> TrainResult:
    """Full training run; returns the best-validation-epoch weights.

    ``warm_start`` replaces the seeded initialization with weights loaded
    from a checkpoint of the same architecture.
    """
    loss_cfg = loss_cfg or LossConfig()
    grid = TimeGrid(model_cfg.step_months, model_cfg.j_max)
    l_max = max(e.n_visits for e in train_eyes + val_eyes)
    dt = model_cfg.np_dtype

    all_train_images = np.concatenate([e.images for e in train_eyes])
    px_mean, px_std = pixel_stats(all_train_images)
    del all_train_images
    record = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "loss": {"beta": loss_cfg.beta, "variant": loss_cfg.variant,
                 "supervise_all_subsequences": loss_cfg.supervise_all_subsequences},
        "pixel_mean": px_mean,
        "pixel_std": px_std,
        "l_max": l_max,
        "seed": train_cfg.seed,
    }

    if warm_start is not None:
        params = {k: np.array(v, copy=True) for k, v in warm_start.items()}
    else:
        params = init_params(model_cfg, seed=train_cfg.seed)
    state = AdamState()
    schedule = TrainingSchedule(train_cfg)
    is_sequence = model_cfg.kind == KIND_LONGITUDINAL
    batch_eyes = (train_cfg.batch_size_sequences if is_sequence
                  else baseline_batch_size(train_cfg, l_max))

    best_params = copy.deepcopy(params)
    history = []
    diverged = False
    stopped_epoch = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        t_start = time.time()
        order = np.random.default_rng(train_cfg.seed ^ epoch).permutation(len(train_eyes))
        epoch_losses = []
        for bi, start in enumerate(range(0, len(order), batch_eyes)):
            part = [train_eyes[i] for i in order[start:start + batch_eyes]]
            aug_rng = np.random.default_rng(np.random.SeedSequence(
                entropy=train_cfg.seed, spawn_key=(epoch, bi, 0)))
            fwd_seed = _derive_seed(train_cfg.seed, epoch, bi, 1)
            if is_sequence:
                batch = pad_and_batch(part, l_max)
                flat = batch.images.reshape(-1, *batch.images.shape[2:])
                flat = augment_images(flat, aug_rng)
                flat = standardize(flat, px_mean, px_std)
                batch.images = flat.reshape(batch.images.shape).astype(dt)
                fp = forward_sequences(params, model_cfg, batch, train=True,
                                       seed=fwd_seed)
                loss_node, parts = sequence_loss(fp, batch.outcomes, loss_cfg)
            else:
                imgs = np.stack([e.images[-1] for e in part])
                imgs = standardize(augment_images(imgs, aug_rng),
                                   px_mean, px_std).astype(dt)
                fp = forward_single_images(params, model_cfg, imgs, train=True,
                                           seed=fwd_seed)
                loss_node, parts = baseline_loss(fp, [e.outcome for e in part],
                                                 loss_cfg)
            loss_value = float(loss_node.value)
            if not np.isfinite(loss_value):
                log.error("non-finite loss at epoch %d batch %d; aborting with "
                          "best checkpoint from epoch %d", epoch, bi,
                          schedule.best_epoch)
                diverged = True
                break
            dg.backward(loss_node)
            adam_step(params, _collect_grads(fp.leaves, params), state, schedule.lr)
            epoch_losses.append(loss_value)
        if diverged:
            stopped_epoch = epoch
            break

        scorer = ModelScorer(params, record)
        cells = build_risk_cells(scorer, val_eyes, grid,
                                 t_years=train_cfg.val_t_years,
                                 dt_years=train_cfg.val_dt_years)
        try:
            val_metric, _ = mean_grid_concordance(cells)
        except EmptyCellError:
            log.warning("validation grid entirely empty at epoch %d", epoch)
            val_metric = float("nan")
        train_loss = float(np.mean(epoch_losses))
        lr_used = schedule.lr
        if schedule.update(epoch, val_metric):
            best_params = copy.deepcopy(params)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_metric": val_metric, "lr": lr_used})
        log.info("epoch %d: loss %.4f val %.4f lr %.2e (%.1fs)",
                 epoch, train_loss, val_metric, lr_used, time.time() - t_start)
        stopped_epoch = epoch
        if schedule.should_stop:
            log.info("early stop at epoch %d; best epoch %d (%.4f)",
                     epoch, schedule.best_epoch, schedule.best_metric)
            break

    record["best_epoch"] = schedule.best_epoch
    record["best_metric"] = (float(schedule.best_metric)
                             if np.isfinite(schedule.best_metric) else None)
    return TrainResult(params=best_params, record=record, history=history,
                       best_epoch=schedule.best_epoch,
                       best_metric=float(schedule.best_metric),
                       stopped_epoch=stopped_epoch, diverged=diverged)


def write_history(path: str, history: list) -> None:
    lines = ["epoch\ttrain_loss\tval_metric\tlr"]
    for row in history:
        lines.append(f"{row['epoch']}\t{row['train_loss']!r}"
                     f"\t{row['val_metric']!r}\t{row['lr']!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
