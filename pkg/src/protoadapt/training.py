"""Prototype fine-tuning: weighted cross-entropy on fused scores.

Only the prototype rows and the fusion scalar are trainable; the
exported tensors stay frozen, so per-query representations, text
scores, and loss targets are computed once per image and cached.
Gradients are analytic (checked against central finite differences in
the test suite), the optimizer is AdamW with decoupled decay on the
prototype rows only, and the learning rate follows a cosine schedule
without warmup.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bundle_io import FeatureBundle
from .errors import ConfigError, NumericalError
from .matching import TargetAssignment, assign_targets
from .prototypes import (COSINE_EPS, INIT_MODES, PrototypeBank, VisualExample,
                         init_prototypes, predicted_masks, scoring_reps)
from .rng import Rng


@dataclass
class AdaptConfig:
    lr0: float = 0.008
    iterations: int = 1000
    alpha_init: float = 80.0
    alpha_trainable: bool = True
    batch_size: int = 8
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    void_weight: float = 0.1
    seed: int = 0
    init_mode: str = "combined"

    def validate(self) -> "AdaptConfig":
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.init_mode!r}")
        if self.void_weight <= 0:
            raise ConfigError("void_weight must be positive")
        return self


@dataclass
class TrainState:
    bank: PrototypeBank
    m_protos: np.ndarray
    v_protos: np.ndarray
    m_alpha: float = 0.0
    v_alpha: float = 0.0
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    alpha_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, bank: PrototypeBank) -> "TrainState":
        return cls(bank, np.zeros_like(bank.protos), np.zeros_like(bank.protos))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cosine_lr(lr0: float, step: int, total: int) -> float:
    """Cosine decay from lr0 to 0 over ``total`` steps, no warmup."""
    if not 0 <= step < total:
        raise ConfigError(f"step {step} outside [0, {total})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _loss_and_grads_from_parts(protos: np.ndarray, alpha: float,
                               reps: np.ndarray, s_text: np.ndarray,
                               targets: TargetAssignment,
                               alpha_trainable: bool
                               ) -> tuple[float, np.ndarray, float]:
    """Weighted-mean cross-entropy and analytic gradients (dProtos, dAlpha).

    Representations are constants of the frozen model; only the cosine
    against the prototype rows and the fusion scalar carry gradient.
    """
    n = reps.shape[0]
    k = protos.shape[0]
    t = targets.class_target
    w = targets.weight
    if t.min() < 0 or t.max() >= k:
        raise ConfigError("target index out of range")

    rn = np.maximum(np.linalg.norm(reps, axis=1), COSINE_EPS)
    pn = np.maximum(np.linalg.norm(protos, axis=1), COSINE_EPS)
    u = reps / rn[:, None]
    s_visual = (u @ protos.T) / pn[None, :]
    s_final = s_text + alpha * s_visual

    p = softmax_rows(s_final)
    wsum = float(w.sum())
    loss = float(np.sum(w * -np.log(np.maximum(p[np.arange(n), t], 1e-300)))) / wsum

    dsf = p.copy()
    dsf[np.arange(n), t] -= 1.0
    dsf *= (w / wsum)[:, None]

    d_alpha = float(np.sum(dsf * s_visual)) if alpha_trainable else 0.0

    dsv = alpha * dsf  # (n, k)
    # d s_visual(i,j) / d protos_j = (u_i - s_visual(i,j) * protos_j / pn_j) / pn_j
    # (second term vanishes where the norm clamp is active)
    d_protos = (dsv.T @ u) / pn[:, None]
    coef = np.sum(dsv * s_visual, axis=0) / (pn * pn)
    unclamped = np.linalg.norm(protos, axis=1) > COSINE_EPS
    d_protos[unclamped] -= coef[unclamped, None] * protos[unclamped]
    return loss, d_protos, d_alpha


def ce_loss_and_grads(bank: PrototypeBank, bundle: FeatureBundle,
                      targets: TargetAssignment
                      ) -> tuple[float, np.ndarray, float]:
    """Loss and gradients for one bundle at the bank's current state."""
    reps = scoring_reps(bundle, bank)
    return _loss_and_grads_from_parts(
        bank.protos, bank.alpha, reps,
        np.asarray(bundle.text_logits, dtype=np.float64),
        targets, bank.alpha_trainable)


def adamw_step(state: TrainState, d_protos: np.ndarray, d_alpha: float,
               lr: float, cfg: AdaptConfig) -> TrainState:
    """One decoupled-weight-decay Adam update on protos (and alpha).

    Decay applies to the prototype rows only; decaying the fusion
    scalar toward zero would silently disable the visual signal.
    """
    if d_protos.shape != state.bank.protos.shape:
        raise ConfigError("gradient shape does not match prototypes")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    state.m_protos = b1 * state.m_protos + (1 - b1) * d_protos
    state.v_protos = b2 * state.v_protos + (1 - b2) * d_protos * d_protos
    m_hat = state.m_protos / bc1
    v_hat = state.v_protos / bc2
    state.bank.protos = state.bank.protos - lr * (
        m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
        + cfg.weight_decay * state.bank.protos)

    if state.bank.alpha_trainable:
        state.m_alpha = b1 * state.m_alpha + (1 - b1) * d_alpha
        state.v_alpha = b2 * state.v_alpha + (1 - b2) * d_alpha * d_alpha
        state.bank.alpha = state.bank.alpha - lr * (
            (state.m_alpha / bc1) / (math.sqrt(state.v_alpha / bc2) + cfg.eps_adam))
    return state


def fit(bundles: list[FeatureBundle], examples: list[VisualExample],
        cfg: AdaptConfig, dry_run: bool = False
        ) -> tuple[PrototypeBank, TrainState]:
    """Adapt prototypes and the fusion scalar on the few-shot set.

    Per-image representations, text scores, and matching targets are
    cached up front; each step then samples ``batch_size`` images with
    replacement and averages their losses and gradients. The run is
    fully determined by (inputs, cfg).
    """
    cfg.validate()
    if not bundles:
        raise ConfigError("fit needs at least one bundle")
    if len({b.C for b in bundles}) != 1:
        raise ConfigError("all bundles must share the same class count")
    rng = Rng(cfg.seed)
    bank = init_prototypes(bundles, examples, cfg.init_mode,
                           bundles[0].C, rng)
    bank.alpha = float(cfg.alpha_init)
    bank.alpha_trainable = cfg.alpha_trainable
    state = TrainState.fresh(bank)
    if dry_run:
        return bank, state

    cache = []
    for bundle in bundles:
        if bundle.gt_segments is None:
            raise ConfigError(
                f"bundle {bundle.image_id!r} has no GT segments; cannot train")
        reps = scoring_reps(bundle, bank)
        targets = assign_targets(predicted_masks(bundle), bundle.gt_segments,
                                 bundle.C, cfg.void_weight)
        cache.append((reps, np.asarray(bundle.text_logits, np.float64), targets))

    for step in range(cfg.iterations):
        lr = cosine_lr(cfg.lr0, step, cfg.iterations)
        idxs = sorted(rng.index(len(bundles)) for _ in range(cfg.batch_size))
        loss_acc = 0.0
        gp_acc = np.zeros_like(bank.protos)
        ga_acc = 0.0
        for i in idxs:
            reps, s_text, targets = cache[i]
            loss, gp, ga = _loss_and_grads_from_parts(
                bank.protos, bank.alpha, reps, s_text, targets,
                cfg.alpha_trainable)
            loss_acc += loss
            gp_acc += gp
            ga_acc += ga
        inv = 1.0 / cfg.batch_size
        adamw_step(state, gp_acc * inv, ga_acc * inv, lr, cfg)
        state.loss_history.append(loss_acc * inv)
        state.alpha_history.append(float(bank.alpha))
        state.lr_history.append(lr)

    if not np.all(np.isfinite(bank.protos)) or not math.isfinite(bank.alpha):
        raise NumericalError("training produced non-finite parameters")
    return bank, state


def write_training_log(state: TrainState, path: str) -> None:
    """One JSON record per step: {step, lr, loss, alpha}."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, (lr, loss, alpha) in enumerate(zip(
                state.lr_history, state.loss_history, state.alpha_history)):
            fh.write(json.dumps({"step": i, "lr": lr, "loss": loss,
                                 "alpha": alpha}) + "\n")
