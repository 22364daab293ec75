"""Forward-backward occlusion scoring."""

import numpy as np
import pytest

from tsaflow.dataio import read_pgm
from tsaflow.errors import DimensionError
from tsaflow.occdet import NON_OCCLUDED_BELOW, dump_occlusion, estimate_occlusion, non_occluded_mask
from tsaflow.scenegen import SceneConfig, backward_flow_gt, generate_scene_with_layout


def _oracle(fwd, bwd):
    """Pointwise recompute: clamped bilinear sample of bwd at p+fwd."""
    h, w = fwd.shape[1:]
    om = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            cx, cy = x + fwd[0, y, x], y + fwd[1, y, x]
            valid[y, x] = (0.0 <= cx <= w - 1) and (0.0 <= cy <= h - 1)
            x0 = min(max(int(np.floor(cx)), 0), w - 2)
            y0 = min(max(int(np.floor(cy)), 0), h - 2)
            ax, ay = cx - x0, cy - y0
            s = np.zeros(2)
            for c in range(2):
                s[c] = (
                    bwd[c, y0, x0] * (1 - ax) * (1 - ay)
                    + bwd[c, y0, x0 + 1] * ax * (1 - ay)
                    + bwd[c, y0 + 1, x0] * (1 - ax) * ay
                    + bwd[c, y0 + 1, x0 + 1] * ax * ay
                )
            om[y, x] = np.hypot(fwd[0, y, x] + s[0], fwd[1, y, x] + s[1])
    if not valid.all():
        om[~valid] = om[valid].max() + 1.0 if valid.any() else 1.0
    return om


def test_perfect_inverse_flows_score_zero():
    fwd = np.zeros((2, 6, 8))
    fwd[0] = 1.0  # uniform +1 in x
    bwd = -fwd
    om = estimate_occlusion(fwd, bwd)
    inbounds = om[:, : 8 - 1]  # last column warps past the edge
    assert np.abs(inbounds).max() < 1e-12
    assert (non_occluded_mask(om)[:, :-1] == 1).all()
    assert (non_occluded_mask(om)[:, -1] == 0).all()


def test_matches_pointwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        h, w = rng.integers(3, 7, size=2)
        fwd = rng.normal(scale=1.5, size=(2, h, w))
        bwd = rng.normal(scale=1.5, size=(2, h, w))
        got = estimate_occlusion(fwd, bwd)
        want = _oracle(fwd, bwd)
        assert np.allclose(got, want, atol=1e-9), (h, w)


def test_all_out_of_bounds_sentinel():
    fwd = np.full((2, 3, 3), 100.0)  # every target far outside
    om = estimate_occlusion(fwd, np.zeros_like(fwd))
    assert (om == 1.0).all()
    assert (non_occluded_mask(om) == 0).all()


def test_out_of_bounds_outranks_observed_scores():
    fwd = np.zeros((2, 4, 4))
    fwd[0, 0, 0] = 50.0  # one escaping cell
    bwd = np.full((2, 4, 4), 0.3)  # in-bounds cells score ~0.42
    om = estimate_occlusion(fwd, bwd)
    assert om[0, 0] > om[om != om[0, 0]].max()


def test_threshold_boundary_is_occluded():
    om = np.array([[0.1249, 0.125, 0.1251]])
    assert non_occluded_mask(om).tolist() == [[1, 0, 0]]
    assert NON_OCCLUDED_BELOW == 0.125


def test_shape_guards():
    with pytest.raises(DimensionError):
        estimate_occlusion(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(DimensionError):
        estimate_occlusion(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


def test_ground_truth_flows_flag_covered_cells():
    # Feed GT forward/backward flows from an aligned scene; cells the
    # sprite covers in frame1 must outscore the 1/8 threshold.
    cfg = SceneConfig(
        height=64,
        width=64,
        sprite_count=(2, 3),
        sprite_size=(16, 24),
        sprite_shift=12,
        background_shift=4,
        align=8,
        seed=21,
    )
    hits = 0
    checked = 0
    for seed in range(21, 27):
        sample, layout = generate_scene_with_layout(cfg, seed=seed)
        fwd = sample.flow_gt[:, ::8, ::8] / 8.0
        bwd = backward_flow_gt(layout)[:, ::8, ::8] / 8.0
        om = estimate_occlusion(fwd, bwd)
        occ_cells = sample.occ_gt.reshape(8, 8, 8, 8).mean(axis=(1, 3)) == 1.0
        non_cells = sample.occ_gt.reshape(8, 8, 8, 8).mean(axis=(1, 3)) == 0.0
        checked += occ_cells.sum()
        hits += (om[occ_cells] >= NON_OCCLUDED_BELOW).sum()
        # fully non-occluded aligned cells score exactly zero
        assert np.abs(om[non_cells]).max() < 1e-9
    assert checked > 0
    assert hits == checked


def test_dump_writes_readable_pgm(tmp_path):
    om = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = tmp_path / "om.pgm"
    dump_occlusion(path, om)
    img = read_pgm(path)
    assert img[1, 0] == 65535 and img[0, 0] == 0
