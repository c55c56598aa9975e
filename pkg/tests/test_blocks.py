import itertools

import numpy as np
import pytest

from blkrew.blocks import (ConfigError, LayerMask, SparseMask, apply_mask, enumerate_groups,
                           group_norm, group_norms, parse_block, partition, scheme_for_layer)
from blkrew.tensor import ShapeError
from oracles import norm_loop


def test_block_counts():
    assert partition(8, 8, 4, 4).num_blocks == 4
    s = partition(512, 1152, 4, 16)
    assert s.grid == (128, 72) and s.num_blocks == 9216


def test_whole_matrix_block_is_single_block():
    s = scheme_for_layer(6, 10, None, None)
    assert s.num_blocks == 1
    rows = enumerate_groups(s, "row")
    assert [g.cols for g in rows] == [(0, 10)] * 6
    assert [g.rows for g in enumerate_groups(s, "column")] == [(0, 6)] * 10


def test_one_by_one_block_groups_are_single_weights():
    s = partition(3, 4, 1, 1)
    for d in ("row", "column"):
        groups = enumerate_groups(s, d)
        assert len(groups) == 12 and all(g.size == 1 for g in groups)


def test_row_group_count_example():
    groups = enumerate_groups(partition(4, 4, 2, 2), "row")
    assert len(groups) == 8 and all(g.size == 2 for g in groups)


@pytest.mark.parametrize("bad", [(0, 2), (2, 0), (9, 2), (2, 9)])
def test_partition_rejects_bad_block(bad):
    with pytest.raises(ConfigError):
        partition(8, 8, *bad)


def test_clamp_records_flag():
    s = scheme_for_layer(3, 20, 4, 8)
    assert (s.m, s.n, s.clamped) == (3, 8, True)
    assert not scheme_for_layer(8, 8, 4, 4).clamped


def test_parse_block():
    assert parse_block("4x16") == (4, 16)
    assert parse_block(" whole ") == (None, None)
    with pytest.raises(ConfigError):
        parse_block("4by16")


def test_partition_and_groups_cover_every_element_once():
    # brute force over all small schemes
    for rows, cols in [(1, 1), (5, 7), (12, 12), (7, 12), (12, 5)]:
        for m, n in itertools.product(range(1, min(6, rows) + 1), range(1, min(6, cols) + 1)):
            s = partition(rows, cols, m, n)
            seen = np.zeros((rows, cols), int)
            for j in range(s.num_blocks):
                r0, r1, c0, c1 = s.block_extent(j)
                seen[r0:r1, c0:c1] += 1
            assert (seen == 1).all()
            for d in ("row", "column"):
                count = np.zeros((rows, cols), int)
                for g in enumerate_groups(s, d):
                    r0, r1, c0, c1 = s.block_extent(g.block)
                    for r, c in g.coords():
                        assert r0 <= r < r1 and c0 <= c < c1
                        count[r, c] += 1
                assert (count == 1).all()


def test_group_order_is_block_major():
    s = partition(5, 6, 2, 4)
    keys = [(g.block, g.index) for g in enumerate_groups(s, "column")]
    assert keys == sorted(keys)


def test_group_norm_examples():
    w = np.array([[3.0, 4.0]])
    g = enumerate_groups(partition(1, 2, 1, 2), "row")[0]
    assert group_norm(w, g) == 5.0
    assert group_norm(np.zeros((1, 2)), g) == 0.0
    with pytest.raises(IndexError):
        group_norm(np.zeros((1, 1)), g)


def test_group_norm_matches_loop(rng):
    w = rng.standard_normal((11, 13))
    s = partition(11, 13, 4, 5)
    for d in ("row", "column"):
        bulk = group_norms(w, s, d).ravel()
        groups = enumerate_groups(s, d)
        # bulk arrays include phantom slots past the ragged edge; map groups onto them
        per = s.m if d == "row" else s.n
        for g in groups:
            ref = norm_loop(w[g.rows[0]:g.rows[1], g.cols[0]:g.cols[1]].ravel())
            assert abs(group_norm(w, g) - ref) <= 1e-15 * max(ref, 1.0)
            assert abs(bulk[g.block * per + g.index] - ref) <= 1e-15 * max(ref, 1.0)


def test_elementwise_mask_is_row_col_intersection(rng):
    s = partition(9, 10, 4, 3)
    lm = LayerMask.full(s)
    lm.row_alive &= rng.random(lm.row_alive.shape) < 0.5
    lm.col_alive &= rng.random(lm.col_alive.shape) < 0.5
    e = lm.elements()
    for j in range(s.num_blocks):
        bi, bj = divmod(j, s.grid[1])
        r0, r1, c0, c1 = s.block_extent(j)
        for r in range(r0, r1):
            for c in range(c0, c1):
                want = lm.row_alive[bi, bj, r - r0] and lm.col_alive[bi, bj, c - c0]
                assert e[r, c] == want


def test_apply_mask_cases(rng):
    w = rng.standard_normal((4, 6))
    s = partition(4, 6, 2, 3)
    full = LayerMask.full(s)
    np.testing.assert_array_equal(apply_mask(w, full), w)
    dead = LayerMask(s, np.zeros_like(full.row_alive), full.col_alive.copy())
    out = apply_mask(w, dead)
    assert not out.any() and not np.signbit(out).any()
    one = LayerMask.full(s)
    one.row_alive[0, 1, 1] = False
    g = next(g for g in enumerate_groups(s, "row") if (g.block, g.index) == (1, 1))
    assert group_norm(apply_mask(w, one), g) == 0.0
    with pytest.raises(ShapeError):
        apply_mask(w, np.ones((4, 5), bool))


def test_sparse_mask_compression():
    s = partition(10, 100, 10, 100)
    lm = LayerMask.full(s)
    lm.row_alive[0, 0, 1:] = False
    lm.col_alive[0, 0, 50:] = False
    sm = SparseMask([lm])
    assert sm.total == 1000 and sm.surviving == 50 and sm.compression_rate == 20.0
