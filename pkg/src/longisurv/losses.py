"""Composite training objective.

The survival part mixes a censoring cross-entropy term with extra weight on
uncensored cases:

    L_surv = (1 - beta) * (-c * log S(tau))
             + beta * (-(1 - c) * [log S(tau - 1) + log h(tau)])

with S(0) := 1 and log arguments clamped at 1e-12. The default "weighted"
variant keeps the two terms separate as written above; ``variant="combined"``
additionally counts the uncensored log-likelihood inside the main term,
which collapses to a coefficient of 1 on the uncensored term. The auxiliary part is the mean squared error between
each position's step-ahead prediction and the next visit's image embedding
(gradient-stopped), pooled over all valid (position, dimension) entries.

Scalar reference implementations live alongside the graph builders so tests
can hand-compute every value outside the graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .errors import ConfigError, DataError
from .model import ForwardPass
from .survival import EventOutcome

LOSS_VARIANTS = ("weighted", "combined")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.15
    supervise_all_subsequences: bool = True
    variant: str = "weighted"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.variant not in LOSS_VARIANTS:
            raise ConfigError(f"variant must be one of {LOSS_VARIANTS}")

    @property
    def uncensored_coef(self) -> float:
        return 1.0 if self.variant == "combined" else self.beta


def survival_loss(hazard: np.ndarray, outcome: EventOutcome,
                  beta: float = 0.15, variant: str = "weighted") -> float:
    """Scalar survival loss for one hazard curve (reference implementation)."""
    h = np.asarray(hazard, dtype=float)
    tau = outcome.event_step
    if not 1 <= tau <= len(h):
        raise DataError(f"event step {tau} outside grid of {len(h)} steps")
    clamp = dg.LOG_CLAMP
    s = np.cumprod(1.0 - h)
    s_tau = max(float(s[tau - 1]), clamp)
    s_prev = 1.0 if tau == 1 else max(float(s[tau - 2]), clamp)
    c = 1.0 if outcome.censored else 0.0
    l_ce = -c * np.log(s_tau)
    l_unc = -(1.0 - c) * (np.log(s_prev) + np.log(max(float(h[tau - 1]), clamp)))
    coef = 1.0 if variant == "combined" else beta
    return float((1.0 - beta) * l_ce + coef * l_unc)


def step_ahead_loss(predicted: np.ndarray, targets: np.ndarray,
                    pair_valid: np.ndarray) -> float:
    """Scalar step-ahead MSE over valid pairs; 0 when no pair exists."""
    pair_valid = np.asarray(pair_valid, dtype=bool)
    n = int(pair_valid.sum())
    if n == 0:
        return 0.0
    diff = (predicted - targets)[pair_valid]
    return float(np.mean(diff * diff))


def _survival_selectors(event_steps: np.ndarray, censored: np.ndarray,
                        j_max: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(event_steps)
    sel_ce = np.zeros((n, j_max), dtype=dtype)
    sel_s_unc = np.zeros((n, j_max), dtype=dtype)
    sel_h_unc = np.zeros((n, j_max), dtype=dtype)
    rows = np.arange(n)
    cens = censored.astype(bool)
    sel_ce[rows[cens], event_steps[cens] - 1] = 1.0
    unc = ~cens
    sel_h_unc[rows[unc], event_steps[unc] - 1] = 1.0
    prev = unc & (event_steps >= 2)
    sel_s_unc[rows[prev], event_steps[prev] - 2] = 1.0
    return sel_ce, sel_s_unc, sel_h_unc


def survival_loss_rows(hz: dg.Node, event_steps: np.ndarray, censored: np.ndarray,
                       cfg: LossConfig) -> dg.Node:
    """Mean survival loss over a (N, j_max) node of hazard rows."""
    n, j_max = hz.value.shape
    if np.any((event_steps < 1) | (event_steps > j_max)):
        raise DataError("event step outside grid")
    dt = hz.value.dtype
    log_h = dg.log(hz)
    log_1mh = dg.log(1.0 - hz)
    cum = np.triu(np.ones((j_max, j_max), dtype=dt))   # cum[s, j] = 1 for s <= j
    log_s = dg.matmul(log_1mh, dg.constant(cum))
    sel_ce, sel_s_unc, sel_h_unc = _survival_selectors(event_steps, censored, j_max, dt)
    l_ce = -dg.sum_all(log_s * dg.constant(sel_ce))
    l_unc = -(dg.sum_all(log_s * dg.constant(sel_s_unc))
              + dg.sum_all(log_h * dg.constant(sel_h_unc)))
    return dg.scale(l_ce, (1.0 - cfg.beta) / n) + dg.scale(l_unc, cfg.uncensored_coef / n)


def shifted_targets(fp: ForwardPass) -> np.ndarray:
    """Next-visit embedding targets aligned to each position (last row zero)."""
    targets = np.zeros_like(fp.node_eimg.value)
    targets[:, :-1] = fp.node_eimg.value[:, 1:]
    return targets


def step_ahead_loss_node(fp: ForwardPass,
                         frozen_targets: np.ndarray | None = None) -> tuple[dg.Node, int]:
    """Graph step-ahead MSE pooled over valid pairs; (constant 0, 0) when skipped.

    The target side is gradient-stopped. ``frozen_targets`` pins the targets
    to values from a reference forward pass, which is what a central
    finite-difference probe of this objective must differentiate against.
    """
    valid = fp.valid[:, :fp.l_trim]
    b, lt = valid.shape
    pair = np.zeros((b, lt), dtype=bool)
    if lt > 1:
        pair[:, :-1] = valid[:, :-1] & valid[:, 1:]
    n_pairs = int(pair.sum())
    if n_pairs == 0:
        return dg.constant(np.zeros((), dtype=fp.node_step.value.dtype)), 0
    d = fp.node_step.value.shape[-1]
    targets = shifted_targets(fp) if frozen_targets is None else frozen_targets
    mask = pair[:, :, None].astype(fp.node_step.value.dtype)
    diff = fp.node_step - dg.constant(targets)
    sq = diff * diff * dg.constant(mask)
    return dg.scale(dg.sum_all(sq), 1.0 / (n_pairs * d)), n_pairs


def sequence_loss(fp: ForwardPass, outcomes: list, cfg: LossConfig,
                  frozen_targets: np.ndarray | None = None) -> tuple[dg.Node, dict]:
    """Total longitudinal objective: survival + step-ahead, each batch-averaged."""
    valid = fp.valid[:, :fp.l_trim]
    b, lt = valid.shape
    j_max = fp.node_hazards.value.shape[-1]
    if cfg.supervise_all_subsequences:
        flat_idx = np.flatnonzero(valid.reshape(-1))
    else:
        flat_idx = (np.arange(b) * lt + valid.sum(axis=1) - 1).astype(np.intp)
    rows = dg.gather_rows(dg.reshape(fp.node_hazards, (b * lt, j_max)), flat_idx)
    eye_of_row = flat_idx // lt
    steps = np.array([outcomes[i].event_step for i in eye_of_row])
    cens = np.array([outcomes[i].censored for i in eye_of_row])
    l_surv = survival_loss_rows(rows, steps, cens, cfg)
    l_pred, n_pairs = step_ahead_loss_node(fp, frozen_targets)
    total = l_surv + l_pred
    parts = {"surv": float(l_surv.value), "pred": float(l_pred.value),
             "n_rows": len(flat_idx), "n_pairs": n_pairs}
    return total, parts


def baseline_loss(fp: ForwardPass, outcomes: list, cfg: LossConfig) -> tuple[dg.Node, dict]:
    """Baseline objective: survival loss only, one hazard row per eye."""
    steps = np.array([o.event_step for o in outcomes])
    cens = np.array([o.censored for o in outcomes])
    l_surv = survival_loss_rows(fp.node_hazards, steps, cens, cfg)
    return l_surv, {"surv": float(l_surv.value), "pred": 0.0,
                    "n_rows": len(outcomes), "n_pairs": 0}
