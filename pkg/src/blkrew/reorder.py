"""Row reordering and compact execution of block-sparse weight matrices.

Rows with identical sparsity signatures are moved next to each other; each
run of equal rows becomes a group whose weights are stored column-compacted
(dense ``rows x len(gather)``) together with the input rows it reads. Groups
are executed one after another, and inside a group every worker takes a
contiguous range of rows. All-zero rows go to a trailing range that is never
executed.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math
import os
import statistics
import time

import numpy as np

from .blocks import BlockScheme, LayerMask, partition
from .tensor import ShapeError, as_matrix, gemm

THREADS_ENV = "BLKREW_THREADS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RowSignature:
    """Surviving block-columns of one row and the surviving columns in each.

    ``columns[k]`` is the in-block column bitset of the k-th set bit of
    ``blocks`` (bit ``q`` = column ``q`` of that block).
    """

    blocks: int
    columns: tuple[int, ...]

    @property
    def empty(self) -> bool:
        return self.blocks == 0

    def per_block(self) -> dict[int, int]:
        ids = [b for b in range(self.blocks.bit_length()) if self.blocks >> b & 1]
        return dict(zip(ids, self.columns))


def _elements_and_width(mask) -> tuple[np.ndarray, int]:
    if isinstance(mask, LayerMask):
        return mask.elements(), mask.scheme.n
    e = np.asarray(mask, dtype=bool)
    return e, e.shape[1]


def compute_signatures(mask, block_cols: int | None = None) -> list[RowSignature]:
    """One signature per row of a :class:`LayerMask` (or a boolean matrix).

    For a raw matrix, ``block_cols`` gives the block width; it defaults to
    the full row, i.e. a single block-column.
    """
    e, n = _elements_and_width(mask)
    if block_cols is not None:
        n = block_cols
    rows, cols = e.shape
    bc = max(1, math.ceil(cols / n))
    padded = np.zeros((rows, bc * n), dtype=bool)
    padded[:, :cols] = e
    weights = 1 << np.arange(n, dtype=object)
    per_block = padded.reshape(rows, bc, n)
    out = []
    for r in range(rows):
        bits = per_block[r]
        alive = np.flatnonzero(bits.any(axis=1))
        blocks = sum(1 << int(b) for b in alive)
        columns = tuple(int(np.dot(bits[b].astype(object), weights)) for b in alive)
        out.append(RowSignature(blocks, columns))
    return out


def signature_distance(a: RowSignature, b: RowSignature) -> int:
    """Number of block-columns whose column pattern differs between two rows."""
    pa, pb = a.per_block(), b.per_block()
    return sum(pa.get(k) != pb.get(k) for k in set(pa) | set(pb))


@dataclass
class RowGroup:
    start: int
    stop: int
    gather: np.ndarray
    weights: np.ndarray

    @property
    def rows(self) -> int:
        return self.stop - self.start


@dataclass
class ReorderedModel:
    """Executable form of one masked layer.

    ``order[k]`` is the original row placed at reordered position ``k``;
    ``position`` is its inverse (original row -> reordered position).
    Positions ``n_active`` and above hold the all-zero rows.
    """

    shape: tuple[int, int]
    order: np.ndarray
    groups: list[RowGroup]

    @property
    def n_active(self) -> int:
        return self.groups[-1].stop if self.groups else 0

    @property
    def position(self) -> np.ndarray:
        pos = np.empty_like(self.order)
        pos[self.order] = np.arange(len(self.order))
        return pos

    def row_costs(self) -> np.ndarray:
        """Scalar multiplies per reordered row for one input column."""
        costs = np.zeros(self.shape[0], dtype=np.int64)
        for g in self.groups:
            costs[g.start:g.stop] = len(g.gather)
        return costs

    def multiply_count(self, n_cols: int = 1) -> int:
        return int(sum(g.rows * len(g.gather) for g in self.groups)) * n_cols

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for g in self.groups:
            rows = self.order[g.start:g.stop]
            out[np.ix_(rows, g.gather)] = g.weights
        return out

    def element_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for g in self.groups:
            out[np.ix_(self.order[g.start:g.stop], g.gather)] = True
        return out


def reorder(weights, mask, similarity: int = 0) -> ReorderedModel:
    """Group rows by signature and compact each group's columns.

    Rows are stably sorted by signature class, classes taken in order of
    first appearance. With ``similarity > 0`` a class joins the first earlier
    group whose leading signature differs in at most that many block-columns;
    the group then executes the union of its rows' columns with explicit
    zeros.
    """
    weights = as_matrix(weights, "weights")
    e, _ = _elements_and_width(mask)
    if e.shape != weights.shape:
        raise ShapeError(f"mask {e.shape} does not match weights {weights.shape}")
    sigs = compute_signatures(mask)
    classes: dict[RowSignature, list[int]] = {}
    zero_rows = []
    for r, s in enumerate(sigs):
        if s.empty:
            zero_rows.append(r)
        else:
            classes.setdefault(s, []).append(r)
    merged: list[tuple[RowSignature, list[int]]] = []
    for sig, rows in classes.items():
        if similarity > 0:
            for rep, members in merged:
                if signature_distance(rep, sig) <= similarity:
                    members.extend(rows)
                    break
            else:
                merged.append((sig, list(rows)))
        else:
            merged.append((sig, list(rows)))
    order, groups, start = [], [], 0
    for _, rows in merged:
        rows = np.asarray(rows, dtype=np.int64)
        gather = np.flatnonzero(e[rows].any(axis=0)).astype(np.int64)
        compact = np.where(e[np.ix_(rows, gather)], weights[np.ix_(rows, gather)], 0.0)
        groups.append(RowGroup(start, start + len(rows), gather, np.ascontiguousarray(compact)))
        order.extend(rows.tolist())
        start += len(rows)
    order.extend(zero_rows)
    return ReorderedModel(weights.shape, np.asarray(order, dtype=np.int64), groups)


@dataclass
class ExecutionPlan:
    """``passes[p][w]`` is the ``(start, stop)`` reordered-row range worker ``w``
    runs in pass ``p`` (one pass per row group)."""

    workers: int
    passes: list[list[tuple[int, int]]]

    def worker_ranges(self, w: int) -> list[tuple[int, int]]:
        return [p[w] for p in self.passes if p[w][1] > p[w][0]]


def _split_pass(start: int, stop: int, loads: np.ndarray, cost: int) -> list[tuple[int, int]]:
    """Contiguous equal-cost chunks of ``[start, stop)``; bigger chunks go to
    the least-loaded workers."""
    workers = len(loads)
    rows = stop - start
    base, extra = divmod(rows, workers)
    sizes = [base + (k < extra) for k in range(workers)]
    pref = np.argsort(loads, kind="stable")
    chunks = []
    pos = start
    for s in sizes:
        chunks.append((pos, pos + s))
        pos += s
    out: list[tuple[int, int]] = [(stop, stop)] * workers
    for rank, w in enumerate(pref):
        out[w] = chunks[rank]
        loads[w] += sizes[rank] * cost
    return out


def make_plan(model: ReorderedModel, workers: int = 1) -> ExecutionPlan:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    loads = np.zeros(workers, dtype=np.int64)
    passes = [_split_pass(g.start, g.stop, loads, len(g.gather)) for g in model.groups]
    return ExecutionPlan(workers, passes)


def naive_plan(n_rows: int, workers: int = 1) -> ExecutionPlan:
    """Static schedule over the original row order: one pass, equal row counts."""
    loads = np.zeros(workers, dtype=np.int64)
    return ExecutionPlan(workers, [_split_pass(0, n_rows, loads, 0)])


def _run_ranges(model, xg, out, ranges):
    for gi, (lo, hi) in ranges:
        g = model.groups[gi]
        res = gemm(g.weights[lo - g.start:hi - g.start], xg[gi])
        out[model.order[lo:hi]] = res


def sparse_exec(model: ReorderedModel, x, plan: ExecutionPlan | None = None) -> np.ndarray:
    """``masked_weights @ x`` through the reordered groups.

    Each group's input rows are gathered once and shared by every worker.
    Each output row is produced by one worker as a fixed ascending-column
    sum, so the result does not depend on the worker count.
    """
    x = as_matrix(x, "input")
    if x.shape[0] != model.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} rows, weights have {model.shape[1]} columns")
    plan = plan or make_plan(model, 1)
    if len(plan.passes) != len(model.groups):
        raise ValueError("plan does not match model groups")
    out = np.zeros((model.shape[0], x.shape[1]))
    xg = [np.ascontiguousarray(x[g.gather]) for g in model.groups]
    jobs = [[(gi, p[w]) for gi, p in enumerate(plan.passes) if p[w][1] > p[w][0]]
            for w in range(plan.workers)]
    if plan.workers == 1:
        _run_ranges(model, xg, out, jobs[0])
    else:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            list(pool.map(lambda j: _run_ranges(model, xg, out, j), jobs))
    return out


def naive_sparse_exec(weights, mask, x, plan: ExecutionPlan | None = None) -> np.ndarray:
    """Row-by-row sparse product in original row order, no regrouping."""
    weights = as_matrix(weights, "weights")
    x = as_matrix(x, "input")
    e, _ = _elements_and_width(mask)
    if x.shape[0] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} rows, weights have {weights.shape[1]} columns")
    plan = plan or naive_plan(weights.shape[0], 1)
    out = np.zeros((weights.shape[0], x.shape[1]))
    cols = [np.flatnonzero(e[r]) for r in range(weights.shape[0])]

    def run(ranges):
        for lo, hi in ranges:
            for r in range(lo, hi):
                if len(cols[r]):
                    out[r] = gemm(weights[r, cols[r]][None, :], x[cols[r]])[0]

    jobs = [plan.worker_ranges(w) for w in range(plan.workers)]
    if plan.workers == 1:
        run(jobs[0])
    else:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            list(pool.map(run, jobs))
    return out


def _pairwise_abs_sum(c: np.ndarray) -> float:
    c = np.sort(c)
    n = len(c)
    return float(np.dot(2 * np.arange(n) - n + 1, c))


def balance_metrics(model, plan: ExecutionPlan) -> dict[str, float]:
    """Divergence and imbalance of a plan.

    ``model`` is a :class:`ReorderedModel` or an array of per-row multiply
    counts in plan coordinates. Divergence is the mean absolute difference of
    row costs over all row pairs that share a worker range; imbalance is the
    max over mean of per-worker multiply totals (1.0 when there is no work).
    """
    costs = model.row_costs() if isinstance(model, ReorderedModel) else np.asarray(model)
    loads = np.zeros(plan.workers)
    diff_sum, pairs = 0.0, 0
    for p in plan.passes:
        for w, (lo, hi) in enumerate(p):
            c = costs[lo:hi]
            loads[w] += c.sum()
            n = len(c)
            if n > 1:
                diff_sum += _pairwise_abs_sum(c)
                pairs += n * (n - 1) // 2
    mean = loads.mean()
    return {"divergence": diff_sum / pairs if pairs else 0.0,
            "imbalance": float(loads.max() / mean) if mean > 0 else 1.0}


def prototype_mask(rows: int, cols: int, scheme: BlockScheme, rng, n_patterns: int = 16,
                   block_keep: float = 0.3, row_keep: float = 0.5, col_keep: float = 0.5) -> LayerMask:
    """Random block-structured mask where block-rows draw from a few prototypes.

    Each prototype fixes, per block-column, whether the block survives and
    which of its rows and columns survive; every block-row copies one
    prototype. Pruned layers show this kind of repetition when many filters
    end up with the same structure.
    """
    br, bc = scheme.grid
    protos_block = rng.random((n_patterns, bc)) < block_keep
    protos_row = rng.random((n_patterns, bc, scheme.m)) < row_keep
    protos_col = rng.random((n_patterns, bc, scheme.n)) < col_keep
    pick = rng.integers(0, n_patterns, size=br)
    lm = LayerMask.full(scheme)
    lm.row_alive &= protos_row[pick] & protos_block[pick][:, :, None]
    lm.col_alive &= protos_col[pick]
    return lm


def _time(fn, repeats: int) -> dict:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return {"median_ms": statistics.median(samples) * 1e3, "min_ms": min(samples) * 1e3,
            "max_ms": max(samples) * 1e3, "samples": len(samples)}


def bench_case(weights, mask, x, repeats: int = 3, workers: int = 1, similarity: int = 0) -> dict:
    """Median/min/max wall-clock of dense, naive-sparse and reordered products."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    e, _ = _elements_and_width(mask)
    masked = np.where(e, weights, 0.0)
    model = reorder(masked, mask, similarity)
    plan = make_plan(model, workers)
    nplan = naive_plan(masked.shape[0], workers)
    row_nnz = e.sum(axis=1)
    return {
        "shape": [int(masked.shape[0]), int(masked.shape[1]), int(x.shape[1])],
        "sparsity": float(1.0 - e.mean()),
        "groups": len(model.groups),
        "workers": workers,
        "balance_reordered": balance_metrics(model, plan),
        "balance_naive": balance_metrics(row_nnz, nplan),
        "dense": _time(lambda: gemm(masked, x), repeats),
        "naive_sparse": _time(lambda: naive_sparse_exec(masked, e, x, nplan), repeats),
        "reordered": _time(lambda: sparse_exec(model, x, plan), repeats),
    }


def bench(shapes, repeats: int = 3, workers: int = 1, block=(4, 8), n_patterns: int = 16,
          seed: int = 0) -> list[dict]:
    """Time all three variants on synthetic ``(M, K, N)`` block-sparse products."""
    rng = np.random.default_rng(seed)
    table = []
    for m, k, n in shapes:
        scheme = partition(m, k, min(block[0], m), min(block[1], k))
        mask = prototype_mask(m, k, scheme, rng, n_patterns=n_patterns)
        w = rng.standard_normal((m, k))
        x = rng.standard_normal((k, n))
        table.append(bench_case(w, mask, x, repeats, workers))
    return table
