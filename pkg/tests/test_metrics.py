"""Attention metrics, endpoint error, and their aggregation/serialization."""

import numpy as np
import pytest

from tsaflow.attention import normal_grid
from tsaflow.errors import DimensionError, UndefinedMetricError
from tsaflow.metrics import (
    MetricsRecord,
    aepe_partitioned,
    aggregate,
    downsample_occ_gt,
    endpoint_error,
    mma,
    moa,
    mrd,
    read_metrics_csv,
    write_metrics_csv,
)


def _stochastic(rng, n):
    m = rng.random((n, n))
    return m / m.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------
# occlusion-cell downsampling
# ---------------------------------------------------------------------


def test_downsample_square_block():
    occ = np.zeros((32, 32), np.uint8)
    occ[8:24, 8:24] = 1  # 16x16 block covering cells (1,1),(1,2),(2,1),(2,2)
    oc = downsample_occ_gt(occ)
    assert oc.quasi_occ.sum() == 4
    # every quasi-occluded cell touches a quasi-non neighbor -> none confirmed
    assert oc.occ.sum() == 0
    # the ring adjacent to the block is quasi-non but its neighbors include
    # quasi-occ cells, so confirmation excludes it
    assert oc.non_occ[0, 0] == 1
    assert oc.non_occ[1, 1] == 0 and oc.non_occ[0, 1] == 0


def test_downsample_full_side_confirmed():
    occ = np.zeros((32, 32), np.uint8)
    occ[:, :16] = 1  # left half occluded
    oc = downsample_occ_gt(occ)
    assert oc.quasi_occ[:, :2].all() and oc.quasi_non[:, 2:].all()
    assert oc.occ[:, 0].all() and not oc.occ[:, 1].any()  # column 1 borders non
    assert oc.non_occ[:, 3].all() and not oc.non_occ[:, 2].any()


def test_downsample_half_mean_is_neither():
    occ = np.zeros((8, 16), np.uint8)
    occ[:4, :8] = 1  # left cell mean exactly 0.5
    oc = downsample_occ_gt(occ)
    assert oc.quasi_occ[0, 0] == 0 and oc.quasi_non[0, 0] == 0
    assert oc.quasi_non[0, 1] == 1


def test_downsample_matches_rule_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h8, w8 = rng.integers(2, 6, size=2)
        occ = (rng.random((h8 * 8, w8 * 8)) < 0.5).astype(np.uint8)
        oc = downsample_occ_gt(occ)
        for y in range(h8):
            for x in range(w8):
                mean = occ[8 * y : 8 * y + 8, 8 * x : 8 * x + 8].mean()
                assert oc.quasi_occ[y, x] == (1 if mean > 0.5 else 0)
                assert oc.quasi_non[y, x] == (1 if mean < 0.5 else 0)
                for quasi, conf in ((oc.quasi_occ, oc.occ), (oc.quasi_non, oc.non_occ)):
                    nb = [quasi[yy, xx] for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
                          if 0 <= yy < h8 and 0 <= xx < w8]
                    assert conf[y, x] == (1 if quasi[y, x] and all(nb) else 0)


def test_downsample_rejects_ragged():
    with pytest.raises(DimensionError):
        downsample_occ_gt(np.zeros((20, 16), np.uint8))


# ---------------------------------------------------------------------
# attention metrics vs loop oracles
# ---------------------------------------------------------------------


def test_moa_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h8, w8 = rng.integers(2, 9, size=2)
        n = h8 * w8
        m = _stochastic(rng, n)
        occ_side = rng.integers(0, 2, size=(h8, w8)).astype(np.uint8)
        query = rng.integers(0, 2, size=(h8, w8)).astype(np.uint8)
        if query.sum() == 0:
            query[0, 0] = 1
        got = moa(m, occ_side, query)
        occ_flat, q_flat = occ_side.ravel(), query.ravel()
        per_row = []
        for i in range(n):
            if q_flat[i]:
                per_row.append(sum(m[i, j] for j in range(n) if occ_flat[j]) * 100.0)
        assert abs(got - np.mean(per_row)) < 1e-10


def test_mrd_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h8, w8 = rng.integers(2, 9, size=2)
        n = h8 * w8
        m = _stochastic(rng, n)
        om_n = rng.integers(0, 2, size=n).astype(np.uint8)
        if om_n.sum() == 0:
            om_n[0] = 1
        grid = normal_grid(h8, w8)
        got = mrd(m, om_n, grid)
        per_row = []
        for i in range(n):
            if om_n[i]:
                acc = 0.0
                for j in range(n):
                    acc += m[i, j] * np.hypot(grid[i, 0] - grid[j, 0], grid[i, 1] - grid[j, 1])
                per_row.append(acc)
        assert abs(got - np.mean(per_row)) < 1e-10


def test_mma_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h8, w8 = rng.integers(2, 9, size=2)
        n = h8 * w8
        m = _stochastic(rng, n)
        mask = rng.integers(0, 2, size=n).astype(np.uint8)
        if mask.sum() == 0:
            mask[-1] = 1
        got = mma(m, mask)
        per_row = [max(m[i]) * 100.0 for i in range(n) if mask[i]]
        assert abs(got - np.mean(per_row)) < 1e-10


def test_identity_attention_identities():
    n = 16
    eye = np.eye(n)
    ones = np.ones(n, np.uint8)
    grid = normal_grid(4, 4)
    assert mrd(eye, ones, grid) == 0.0
    assert mma(eye, ones) == 100.0
    occ = np.zeros(n, np.uint8)
    occ[:3] = 1
    non = 1 - occ
    # a non-occluded identity row keeps all mass on itself: zero on occluded
    assert moa(eye, occ.reshape(4, 4), non.reshape(4, 4)) == 0.0


def test_uniform_attention_values():
    n = 64
    uni = np.full((n, n), 1.0 / n)
    ones = np.ones(n, np.uint8)
    assert abs(mma(uni, ones) - 1.5625) < 1e-12


def test_mass_partition_sums_to_100():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = 36
        m = _stochastic(rng, n)
        occ = rng.integers(0, 2, size=n).astype(np.uint8)
        query = np.ones(n, np.uint8)
        on_occ = moa(m, occ.reshape(6, 6), query.reshape(6, 6))
        on_rest = moa(m, (1 - occ).reshape(6, 6), query.reshape(6, 6))
        assert abs(on_occ + on_rest - 100.0) < 1e-9


def test_mma_bounds():
    rng = np.random.default_rng(5)
    n = 25
    m = _stochastic(rng, n)
    v = mma(m, np.ones(n, np.uint8))
    assert 100.0 / n <= v <= 100.0


def test_empty_query_raises():
    m = np.eye(4)
    with pytest.raises(UndefinedMetricError):
        moa(m, np.ones((2, 2), np.uint8), np.zeros((2, 2), np.uint8))
    with pytest.raises(UndefinedMetricError):
        mma(m, np.zeros(4, np.uint8))
    with pytest.raises(DimensionError):
        mma(np.eye(5), np.ones(4, np.uint8))


# ---------------------------------------------------------------------
# endpoint error
# ---------------------------------------------------------------------


def test_endpoint_error_three_four_five():
    pred = np.zeros((2, 1, 1))
    gt = np.zeros((2, 1, 1))
    pred[0, 0, 0], pred[1, 0, 0] = 3.0, 4.0
    assert endpoint_error(pred, gt)[0, 0] == 5.0
    with pytest.raises(DimensionError):
        endpoint_error(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_aepe_partitions_match_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(30):
        h, w = rng.integers(4, 9, size=2)
        pred = rng.normal(size=(2, h, w))
        gt = rng.normal(size=(2, h, w))
        occ_in = (rng.random((h, w)) < 0.3).astype(np.uint8)
        occ_out = ((rng.random((h, w)) < 0.2) & ~occ_in.astype(bool)).astype(np.uint8)
        occ = (occ_in | occ_out).astype(np.uint8)
        got = aepe_partitioned(pred, gt, occ, occ_in, occ_out)
        epe = np.sqrt(((pred - gt) ** 2).sum(axis=0))
        for key, sel in (
            ("aepe_all", np.ones((h, w), bool)),
            ("aepe_noc", ~occ.astype(bool)),
            ("aepe_occ", occ.astype(bool)),
            ("aepe_occ_in", occ_in.astype(bool)),
            ("aepe_occ_out", occ_out.astype(bool)),
        ):
            if sel.any():
                assert abs(got[key] - epe[sel].mean()) < 1e-10
            else:
                assert got[key] is None


def test_aepe_empty_partition_is_none():
    pred = np.zeros((2, 8, 8))
    gt = np.ones((2, 8, 8))
    out = aepe_partitioned(pred, gt, np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8))
    assert out["aepe_occ"] is None and out["aepe_occ_in"] is None
    assert abs(out["aepe_all"] - np.sqrt(2)) < 1e-12


# ---------------------------------------------------------------------
# aggregation and CSV round-trip
# ---------------------------------------------------------------------


def test_aggregate_lower_median():
    rows = [{"a": v} for v in (5.0, 1.0, 3.0, 2.0)]
    assert aggregate(rows)["a"] == 2.0  # lower of (2, 3)
    rows.append({"a": 4.0})
    assert aggregate(rows)["a"] == 3.0


def test_aggregate_skips_none_and_handles_all_none():
    rows = [
        MetricsRecord(index=0, mma_noc=10.0),
        MetricsRecord(index=1, mma_noc=None),
        MetricsRecord(index=2, mma_noc=30.0),
    ]
    out = aggregate(rows)
    assert out["mma_noc"] == 10.0
    assert out["moa_occ"] is None


def test_aggregate_matches_sorting_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        vals = rng.normal(size=rng.integers(1, 12)).round(3).tolist()
        got = aggregate([{"k": v} for v in vals])["k"]
        s = sorted(vals)
        assert got == s[(len(s) - 1) // 2]


def test_metrics_csv_round_trip(tmp_path):
    rows = [
        MetricsRecord(index=0, moa_noc=1.5, aepe_all=2.25).as_dict(),
        MetricsRecord(index=1, moa_noc=None, aepe_all=0.125).as_dict(),
    ]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    back = read_metrics_csv(path)
    assert back[0]["moa_noc"] == 1.5 and back[0]["aepe_all"] == 2.25
    assert back[1]["moa_noc"] is None and back[1]["aepe_all"] == 0.125
    with pytest.raises(UndefinedMetricError):
        write_metrics_csv(tmp_path / "e.csv", [])
