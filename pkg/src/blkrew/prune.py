"""Reweighted block pruning: regularize, threshold, retrain.

The pipeline starts from a pretrained network, runs ``T`` outer iterations of
regularized SGD with a penalty refresh after each, removes row/column groups
whose norm is close to zero, then retrains the surviving weights with the
pruned entries pinned at zero.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import logging
import math

import numpy as np

from . import nn
from .blocks import (BlockScheme, ConfigError, LayerMask, SparseMask, apply_mask,
                     group_norms, scheme_for_layer, valid_groups)
from .regularize import PenaltyState, RegConfig, Regularizer, init_penalties, update_penalties

log = logging.getLogger(__name__)

THRESHOLD_MODES = ("relative", "absolute")
BASELINES = ("none", "static_lasso", "magnitude")
SCHEDULES = ("simultaneous", "sequential")


class PruneError(RuntimeError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    T: int = 3
    epochs_per_iteration: int = 10
    retrain_epochs: int = 30
    threshold_mode: str = "relative"
    tau: float = 0.05
    baseline: str = "none"
    schedule: str = "simultaneous"
    floor: bool = True
    target_rate: float = 8.0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.epochs_per_iteration < 0 or self.retrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    @property
    def reweight_epochs(self) -> int:
        return self.T * self.epochs_per_iteration


def make_schemes(net: nn.Network, m: int | None, n: int | None) -> list[BlockScheme]:
    """One scheme per parameterized layer; oversized blocks clamp to the layer."""
    return [scheme_for_layer(*w.shape, m, n) for w in net.weights]


def reweight_train(net: nn.Network, schemes: list[BlockScheme], regcfg: RegConfig,
                   prunecfg: PruneConfig, data, labels, state: nn.TrainState,
                   ) -> tuple[nn.Network, list[PenaltyState]]:
    """Run the outer reweighting loop in place on ``net``.

    Each iteration trains ``epochs_per_iteration`` epochs on data loss plus
    regularizer, then refreshes the penalties from the current weights.
    Penalties carry over between iterations. The sequential schedule runs the
    full loop once per direction, rows first.
    """
    phases = [regcfg] if prunecfg.schedule == "simultaneous" else \
        [replace(regcfg, directions=(d,)) for d in regcfg.directions]
    history: list[PenaltyState] = []
    for cfg in phases:
        reg = Regularizer(cfg, schemes, init_penalties(net, schemes, cfg))
        history.append(reg.state)
        for _ in range(prunecfg.T):
            nn.fit(net, data, labels, prunecfg.epochs_per_iteration, state, reg=reg)
            reg.state = update_penalties(reg.state, net, cfg)
            history.append(reg.state)
            log.debug("reweight iteration %d done, reg loss %.4g", reg.state.t, reg.loss(net.weights))
    return net, history


def _floor(alive: np.ndarray, norms: np.ndarray, valid: np.ndarray, restrict=None) -> None:
    """Revive the largest-norm valid group (optionally within block ``restrict``)."""
    score = np.where(valid, norms, -np.inf)
    if restrict is not None:
        keep = np.full(score.shape, -np.inf)
        keep[restrict] = score[restrict]
        score = keep
    alive[np.unravel_index(int(np.argmax(score)), score.shape)] = True


def threshold_mask(weights: list[np.ndarray], schemes: list[BlockScheme], prunecfg: PruneConfig,
                   directions=("row", "column")) -> SparseMask:
    """Kill groups whose norm falls under the threshold; never apply it.

    Relative mode compares against ``tau * max group norm`` of the same layer
    and direction; absolute mode against ``tau``. With ``floor`` set, a layer
    whose groups all die keeps its single strongest group per direction (the
    column pick is confined to the block of the kept row); without it, an
    emptied layer raises :class:`PruneError`.
    """
    layers = []
    for i, (w, s) in enumerate(zip(weights, schemes)):
        lm = LayerMask.full(s)
        norms = {}
        for d in directions:
            norms[d] = group_norms(w, s, d)
            valid = valid_groups(s, d)
            cut = prunecfg.tau * norms[d][valid].max() if prunecfg.threshold_mode == "relative" \
                else prunecfg.tau
            lm.alive(d)[...] = valid & (norms[d] >= cut)
        if lm.surviving() == 0:
            if not prunecfg.floor:
                raise PruneError(f"threshold removes every weight of layer {i}")
            restrict = None
            if "row" in directions and not lm.row_alive.any():
                _floor(lm.row_alive, norms["row"], valid_groups(s, "row"))
            if "row" in directions:
                # column survivor must share a block with a surviving row
                bi, bj, _ = np.nonzero(lm.row_alive)
                restrict = (bi[0], bj[0])
            if "column" in directions and lm.surviving() == 0:
                lm.col_alive[...] = False
                _floor(lm.col_alive, norms["column"], valid_groups(s, "column"), restrict)
        layers.append(lm)
    return SparseMask(layers)


def prune_threshold(net: nn.Network, schemes: list[BlockScheme], prunecfg: PruneConfig,
                    directions=("row", "column")) -> SparseMask:
    """Threshold-prune ``net`` in place and return the mask."""
    mask = threshold_mask(net.weights, schemes, prunecfg, directions)
    for i, lm in enumerate(mask.layers):
        net.weights[i] = apply_mask(net.weights[i], lm)
    return mask


def retrain(net: nn.Network, mask: SparseMask, epochs: int, data, labels,
            state: nn.TrainState, on_epoch=None) -> nn.Network:
    """Masked SGD on the data loss only; pruned entries stay exactly 0.0."""
    elems = mask.elements()
    for i, e in enumerate(elems):
        net.weights[i] = apply_mask(net.weights[i], e)
    for _ in range(epochs):
        nn.train_epoch(net, data, labels, state, masks=elems)
        if on_epoch is not None:
            on_epoch(net)
    return net


def magnitude_order(weights: list[np.ndarray], schemes: list[BlockScheme],
                    directions=("row", "column")) -> list[tuple[float, int, int, int]]:
    """All valid groups as ``(norm, layer, direction index, flat index)``, weakest first."""
    entries = []
    for i, (w, s) in enumerate(zip(weights, schemes)):
        for di, d in enumerate(directions):
            norms = group_norms(w, s, d).ravel()
            for k in np.flatnonzero(valid_groups(s, d).ravel()):
                entries.append((float(norms[k]), i, di, int(k)))
    entries.sort()
    return entries


def magnitude_baseline(net: nn.Network, schemes: list[BlockScheme], target_rate: float,
                       directions=("row", "column")) -> tuple[SparseMask, int]:
    """Kill the globally smallest-norm groups until compression reaches ``target_rate``.

    Returns the mask and the number of groups killed (a prefix of
    :func:`magnitude_order`).
    """
    if target_rate < 1:
        raise ConfigError("target_rate must be >= 1")
    total = sum(w.size for w in net.weights)
    if target_rate > total:
        raise PruneError(f"compression {target_rate}x needs fewer than one surviving weight")
    mask = SparseMask([LayerMask.full(s) for s in schemes])
    elems = [np.ones(w.shape, dtype=bool) for w in net.weights]
    alive = total
    killed = 0
    for _, i, di, k in magnitude_order(net.weights, schemes, directions):
        if total / alive >= target_rate:
            break
        d = directions[di]
        arr = mask.layers[i].alive(d)
        arr.flat[k] = False
        g = _group_from_flat(schemes[i], d, k)
        region = elems[i][g.rows[0]:g.rows[1], g.cols[0]:g.cols[1]]
        alive -= int(region.sum())
        region[...] = False
        killed += 1
    return mask, killed


def _group_from_flat(scheme: BlockScheme, direction: str, k: int):
    br, bc, width = scheme.group_shape(direction)
    bi, rest = divmod(k, bc * width)
    bj, idx = divmod(rest, width)
    r0, r1, c0, c1 = scheme.block_extent(bi * bc + bj)
    if direction == "row":
        return _Span((r0 + idx, r0 + idx + 1), (c0, c1))
    return _Span((r0, r1), (c0 + idx, c0 + idx + 1))


@dataclass(frozen=True)
class _Span:
    rows: tuple[int, int]
    cols: tuple[int, int]


def log_histogram(values: np.ndarray, edges: np.ndarray) -> list[int]:
    values = np.abs(values[values != 0])
    if values.size == 0:
        return [0] * (len(edges) - 1)
    return np.histogram(np.log10(values), bins=edges)[0].astype(int).tolist()


def critical_weight_report(rew_mask: SparseMask, reference: nn.Network, bins: int = 20) -> dict:
    """Magnitude histograms of the reference weights, all vs. surviving positions.

    Bins are log10-spaced over the nonzero magnitudes of each reference layer.
    ``below_median_survivors`` counts surviving positions whose reference
    magnitude lies under that layer's median magnitude.
    """
    if len(rew_mask.layers) != len(reference.weights):
        raise nn.ShapeError("mask and reference network have different layer counts")
    out = []
    for i, (lm, w) in enumerate(zip(rew_mask.layers, reference.weights)):
        e = lm.elements()
        if e.shape != w.shape:
            raise nn.ShapeError(f"layer {i}: mask {e.shape} vs weights {w.shape}")
        mags = np.abs(w)
        nz = mags[mags > 0]
        lo, hi = (np.log10(nz.min()), np.log10(nz.max())) if nz.size else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        median = float(np.median(mags))
        kept = w[e]
        out.append({
            "layer": i,
            "log10_edges": edges.tolist(),
            "reference": log_histogram(w.ravel(), edges),
            "surviving": log_histogram(kept, edges),
            "median_magnitude": median,
            "surviving_count": int(e.sum()),
            "below_median_survivors": int(np.sum(np.abs(kept) < median)),
        })
    return {"layers": out,
            "below_median_survivors": sum(l["below_median_survivors"] for l in out)}


@dataclass
class PruneReport:
    base_accuracy: float
    pruned_accuracy: float
    compression_rate: float
    total_weights: int
    surviving_weights: int
    layers: list[dict]
    critical_weights: dict
    epochs: dict
    regularized_accuracy: float | None = None
    clamped_layers: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.compression_rate < 1:
            raise ValueError("compression rate below 1")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_stats(mask: SparseMask, weights: list[np.ndarray]) -> list[dict]:
    stats = []
    for i, (lm, w) in enumerate(zip(mask.layers, weights)):
        s = lm.scheme
        e = lm.elements()
        per_block = []
        for j in range(s.num_blocks):
            r0, r1, c0, c1 = s.block_extent(j)
            per_block.append(float(e[r0:r1, c0:c1].mean()))
        stats.append({
            "layer": i,
            "shape": list(w.shape),
            "block": s.describe(),
            "surviving": int(e.sum()),
            "nonzero": int(np.count_nonzero(w)),
            "density": float(e.mean()),
            "rows_alive": int(lm.row_alive.sum()),
            "cols_alive": int(lm.col_alive.sum()),
            "block_density_histogram": np.histogram(per_block, bins=10, range=(0.0, 1.0))[0]
            .astype(int).tolist(),
        })
    return stats


def group_survival(net: nn.Network, schemes: list[BlockScheme], tau: float,
                   direction: str = "row", relative: bool = True) -> float:
    """Fraction of valid ``direction`` groups with norm under the threshold."""
    below = total = 0
    for w, s in zip(net.weights, schemes):
        norms = group_norms(w, s, direction)
        valid = valid_groups(s, direction)
        cut = tau * norms[valid].max() if relative else tau
        below += int(np.sum(norms[valid] < cut))
        total += int(valid.sum())
    return below / total


def run_pipeline(pretrained: nn.Network, data, labels, schemes: list[BlockScheme],
                 regcfg: RegConfig, prunecfg: PruneConfig, state: nn.TrainState,
                 ) -> tuple[nn.Network, SparseMask, PruneReport]:
    """Regularize (or pick a baseline), threshold, retrain and report.

    ``pretrained`` is left untouched; ``state`` supplies the learning rate
    and the shuffling RNG for every training phase.
    """
    base_acc = nn.evaluate(pretrained, data, labels)
    net = pretrained.copy()
    reg_acc = None
    directions = regcfg.directions
    if prunecfg.baseline == "magnitude":
        mask, _ = magnitude_baseline(net, schemes, prunecfg.target_rate, directions)
        for i, lm in enumerate(mask.layers):
            net.weights[i] = apply_mask(net.weights[i], lm)
        reweight_epochs = 0
    else:
        cfg = replace(regcfg, mode="static_lasso") if prunecfg.baseline == "static_lasso" else regcfg
        reweight_train(net, schemes, cfg, prunecfg, data, labels, state)
        reg_acc = nn.evaluate(net, data, labels)
        mask = prune_threshold(net, schemes, prunecfg, directions)
        phases = 1 if prunecfg.schedule == "simultaneous" else len(directions)
        reweight_epochs = prunecfg.reweight_epochs * phases
    retrain(net, mask, prunecfg.retrain_epochs, data, labels, state)
    pruned_acc = nn.evaluate(net, data, labels)
    report = PruneReport(
        base_accuracy=base_acc,
        pruned_accuracy=pruned_acc,
        compression_rate=mask.compression_rate,
        total_weights=mask.total,
        surviving_weights=mask.surviving,
        layers=layer_stats(mask, net.weights),
        critical_weights=critical_weight_report(mask, pretrained),
        epochs={"reweight": reweight_epochs, "retrain": prunecfg.retrain_epochs,
                "total": reweight_epochs + prunecfg.retrain_epochs},
        regularized_accuracy=reg_acc,
        clamped_layers=[i for i, s in enumerate(schemes) if s.clamped],
        config={"reg": asdict(regcfg), "prune": asdict(prunecfg),
                "lr": state.lr, "batch_size": state.batch_size},
    )
    if not math.isfinite(report.compression_rate):
        raise PruneError("pruning removed every weight")
    return net, mask, report
