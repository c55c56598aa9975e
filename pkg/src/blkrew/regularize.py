"""Group-lasso and reweighted group-lasso penalties over block row/column groups.

The reweighted penalty for one layer and direction is

    lam * sum_groups P(g) * ||g||_2

with one scalar ``P(g)`` per group, refreshed between training phases as
``P(g) = 1 / (||g||_2^2 + eps)``. Static group lasso is the same sum with
``P == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import (DIRECTIONS, BlockScheme, GroupRef, expand_groups, group_sq_norms,
                     valid_groups)

MODES = ("reweighted", "static_lasso")
KINK = 1e-12


class RegularizationError(KeyError):
    """Penalty state does not cover the requested groups."""


@dataclass(frozen=True)
class RegConfig:
    lam: float
    epsilon_scale: float = 1e-3
    epsilon: float | None = None
    directions: tuple[str, ...] = ("row", "column")
    mode: str = "reweighted"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epsilon_scale <= 0 or (self.epsilon is not None and self.epsilon <= 0):
            raise ValueError("epsilon must be > 0")
        dirs = tuple(self.directions)
        if not dirs or any(d not in DIRECTIONS for d in dirs) or len(set(dirs)) != len(dirs):
            raise ValueError(f"directions must be a nonempty subset of {DIRECTIONS}")
        object.__setattr__(self, "directions", dirs)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class PenaltyState:
    """Per-group penalty arrays, keyed by direction, one array per layer.

    Arrays follow the ``(Br, Bc, m)`` / ``(Br, Bc, n)`` layout of
    :mod:`blkrew.blocks`. ``eps`` is fixed at initialization.
    """

    schemes: list[BlockScheme]
    penalties: dict[str, list[np.ndarray]]
    eps: dict[str, list[float]]
    t: int = 0

    def penalty(self, g: GroupRef) -> float:
        try:
            arr = self.penalties[g.direction][g.layer]
        except (KeyError, IndexError):
            raise RegularizationError(f"no penalty for {g.direction} groups of layer {g.layer}")
        bi, bj = divmod(g.block, self.schemes[g.layer].grid[1])
        return float(arr[bi, bj, g.index])

    def copy(self) -> "PenaltyState":
        return PenaltyState(list(self.schemes),
                            {d: [a.copy() for a in v] for d, v in self.penalties.items()},
                            {d: list(v) for d, v in self.eps.items()}, self.t)


def _weights_of(net_or_weights) -> list[np.ndarray]:
    return list(getattr(net_or_weights, "weights", net_or_weights))


def _penalty_arrays(state: PenaltyState, direction: str, n_layers: int) -> list[np.ndarray]:
    arrs = state.penalties.get(direction)
    if arrs is None or len(arrs) != n_layers:
        raise RegularizationError(f"penalty state has no {direction} entries for all layers")
    return arrs


def layer_epsilon(sq: np.ndarray, valid: np.ndarray, cfg: RegConfig) -> float:
    if cfg.epsilon is not None:
        return cfg.epsilon
    mean_sq = float(sq[valid].mean()) if valid.any() else 0.0
    return cfg.epsilon_scale * mean_sq if mean_sq > 0 else cfg.epsilon_scale


def init_penalties(pretrained, schemes: list[BlockScheme], cfg: RegConfig) -> PenaltyState:
    """Apply the update rule once to the pretrained weights; ``t = 0``."""
    weights = _weights_of(pretrained)
    penalties: dict[str, list[np.ndarray]] = {}
    eps: dict[str, list[float]] = {}
    for d in cfg.directions:
        penalties[d], eps[d] = [], []
        for w, s in zip(weights, schemes):
            sq = group_sq_norms(w, s, d)
            e = layer_epsilon(sq, valid_groups(s, d), cfg)
            eps[d].append(e)
            penalties[d].append(1.0 / (sq + e))
    return PenaltyState(list(schemes), penalties, eps, 0)


def update_penalties(state: PenaltyState, weights, cfg: RegConfig) -> PenaltyState:
    weights = _weights_of(weights)
    new = {}
    for d in cfg.directions:
        _penalty_arrays(state, d, len(weights))
        new[d] = [1.0 / (group_sq_norms(w, s, d) + e)
                  for w, s, e in zip(weights, state.schemes, state.eps[d])]
    return PenaltyState(list(state.schemes), new, {d: list(state.eps[d]) for d in new}, state.t + 1)


def _layer_penalty(state, cfg, d, i, shape):
    if cfg.mode == "static_lasso":
        return np.ones(shape)
    return _penalty_arrays(state, d, len(state.schemes))[i]


def reg_loss(weights, penalties: PenaltyState | None, cfg: RegConfig,
             schemes: list[BlockScheme] | None = None) -> float:
    """``lam * sum P(g) ||g||`` over enabled directions, layers, blocks and groups."""
    weights = _weights_of(weights)
    schemes = schemes if schemes is not None else penalties.schemes
    # lam applied per direction so the two-direction loss is exactly the sum of both
    total = 0.0
    for d in cfg.directions:
        part = 0.0
        for i, (w, s) in enumerate(zip(weights, schemes)):
            norms = np.sqrt(group_sq_norms(w, s, d))
            p = _layer_penalty(penalties, cfg, d, i, norms.shape)
            part += float(np.sum(p * norms))
        total += cfg.lam * part
    return total


def reg_grad(weights, penalties: PenaltyState | None, cfg: RegConfig,
             schemes: list[BlockScheme] | None = None) -> list[np.ndarray]:
    """Subgradient of :func:`reg_loss`; groups with norm below 1e-12 contribute 0."""
    weights = _weights_of(weights)
    schemes = schemes if schemes is not None else penalties.schemes
    grads = []
    for i, (w, s) in enumerate(zip(weights, schemes)):
        g = np.zeros_like(w)
        for d in cfg.directions:
            norms = np.sqrt(group_sq_norms(w, s, d))
            p = _layer_penalty(penalties, cfg, d, i, norms.shape)
            safe = np.where(norms < KINK, 1.0, norms)
            coef = np.where(norms < KINK, 0.0, p / safe)
            g += expand_groups(coef, s, d) * w
        grads.append(cfg.lam * g)
    return grads


@dataclass
class Regularizer:
    """Callable gradient hook for :func:`blkrew.nn.train_epoch`."""

    cfg: RegConfig
    schemes: list[BlockScheme]
    state: PenaltyState | None = None
    history: list[PenaltyState] = field(default_factory=list)

    def __call__(self, weights):
        if self.cfg.lam == 0:
            return None
        return reg_grad(weights, self.state, self.cfg, self.schemes)

    def loss(self, weights) -> float:
        return reg_loss(weights, self.state, self.cfg, self.schemes)
