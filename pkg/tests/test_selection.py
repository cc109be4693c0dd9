"""Interest scoring, gating, and map export."""

import json

import numpy as np
import pytest

from actbev.attention import BevQueries
from actbev.geometry import HomTransform
from actbev.numcore import LinearParams, Tensor, make_rng
from actbev.selection import (
    ActiveMask,
    InterestScoreMap,
    SelectionParams,
    combined_car_maps,
    export_interest_maps,
    gate,
    interest_scores,
    pose_embed,
    read_interest_map,
)

from oracles import interest_score_direct


def random_rigid(rng, t_scale=30.0):
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = rng.uniform(-np.pi, np.pi)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    r = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    return HomTransform.from_rt(r, rng.uniform(-t_scale, t_scale, size=3))


def zeroed_params(c, c_pe):
    zero = lambda ci, co: LinearParams(Tensor(np.zeros((co, ci)), requires_grad=True),
                                       Tensor(np.zeros(co), requires_grad=True))
    return SelectionParams(zero(16, c_pe), zero(c + c_pe, c), zero(c, 1))


def random_params(rng, c, c_pe):
    p = SelectionParams.create(rng, c, c_pe=c_pe)
    return p


def random_queries(rng, h, w, c):
    return BevQueries(grid=Tensor(rng.normal(size=(h, w, c))),
                      pos=Tensor(rng.normal(size=(h, w, c))))


def selection_arrays(p):
    return {
        "pe_w": p.pe_linear.weight.data, "pe_b": p.pe_linear.bias.data,
        "m1_w": p.mlp1.weight.data, "m1_b": p.mlp1.bias.data,
        "m2_w": p.mlp2.weight.data, "m2_b": p.mlp2.bias.data,
    }


# -------------------------------------------------------------- pose embed

def test_pose_embed_zero_weights():
    rng = make_rng(0)
    p = zeroed_params(4, 8)
    out = pose_embed(random_rigid(rng), p)
    np.testing.assert_array_equal(out.vec.data, np.zeros(8))


def test_pose_embed_distinct_transforms_distinct_embeddings():
    rng = make_rng(1)
    p = random_params(rng, 4, 16)
    for _ in range(100):
        a, b = random_rigid(rng), random_rigid(rng)
        va = pose_embed(a, p).vec.data
        vb = pose_embed(b, p).vec.data
        assert np.abs(va - vb).max() > 1e-9


def test_pose_embed_default_width_is_256():
    rng = make_rng(2)
    assert SelectionParams.create(rng, 8).pe_linear.weight.data.shape == (256, 16)


def test_pose_embed_translation_normalized():
    p = SelectionParams(
        LinearParams(Tensor(np.eye(16), requires_grad=True),
                     Tensor(np.zeros(16), requires_grad=True)),
        LinearParams(Tensor(np.zeros((4, 4 + 16))), Tensor(np.zeros(4))),
        LinearParams(Tensor(np.zeros((1, 4))), Tensor(np.zeros(1))))
    t = HomTransform.from_translation(10.0, -20.0, 5.0)
    vec = pose_embed(t, p, half_range=50.0).vec.data
    want = t.flat()
    want[3] /= 50.0
    want[7] /= 50.0
    want[11] /= 50.0
    np.testing.assert_array_equal(vec, want)


# ----------------------------------------------------------------- scoring

def test_zero_mlp_scores_half():
    rng = make_rng(3)
    q = random_queries(rng, 3, 4, 4)
    chains = {(0, 0): random_rigid(rng), (1, 0): random_rigid(rng)}
    out = interest_scores(q, chains, zeroed_params(4, 8))
    assert set(out) == set(chains)
    for key, sm in out.items():
        assert sm.scores.data.shape == (3, 4)
        np.testing.assert_array_equal(sm.scores.data, np.full((3, 4), 0.5))


def test_scores_strictly_inside_unit_interval():
    rng = make_rng(4)
    q = random_queries(rng, 4, 4, 6)
    chains = {(k, i): random_rigid(rng) for k in range(2) for i in range(2)}
    out = interest_scores(q, chains, random_params(rng, 6, 12))
    for sm in out.values():
        assert (sm.scores.data > 0.0).all() and (sm.scores.data < 1.0).all()


def test_scores_match_per_cell_oracle():
    rng = make_rng(5)
    c, c_pe, h, w = 5, 9, 3, 4
    q = random_queries(rng, h, w, c)
    p = random_params(rng, c, c_pe)
    arr = selection_arrays(p)
    chains = {(0, 0): random_rigid(rng), (1, 1): random_rigid(rng)}
    half_range = 12.8
    out = interest_scores(q, chains, p, half_range=half_range)
    for key, sm in out.items():
        for xi in range(h):
            for yi in range(w):
                want = interest_score_direct(
                    q.grid.data[xi, yi], q.pos.data[xi, yi],
                    chains[key].m, half_range, arr)
                assert abs(sm.scores.data[xi, yi] - want) < 1e-12


def test_score_monotone_in_logit():
    rng = make_rng(6)
    c = 4
    q = random_queries(rng, 3, 3, c)
    chains = {(0, 0): random_rigid(rng)}
    p = random_params(rng, c, 8)
    lo = interest_scores(q, chains, p)[(0, 0)].scores.data
    p.mlp2.bias.data = p.mlp2.bias.data + 1.0  # raise every output logit
    hi = interest_scores(q, chains, p)[(0, 0)].scores.data
    assert (hi > lo).all()


def test_interest_map_validates_range():
    with pytest.raises(ValueError):
        InterestScoreMap(0, 0, Tensor(np.array([[0.5, 1.2]])))


# ------------------------------------------------------------------- gating

def test_gate_strict_inequality():
    scores = {(0, 0): InterestScoreMap(0, 0, Tensor(np.array([[0.005, 0.01, 0.011]])))}
    mask = gate(scores, 0.01).masks[(0, 0)]
    np.testing.assert_array_equal(mask, [[False, False, True]])


def test_gate_epsilon_zero_keeps_all_sigmoid_outputs():
    rng = make_rng(7)
    q = random_queries(rng, 3, 3, 4)
    chains = {(0, 0): random_rigid(rng)}
    scores = interest_scores(q, chains, random_params(rng, 4, 8))
    mask = gate(scores, 0.0)
    assert mask.masks[(0, 0)].all()
    assert mask.n_true() == 9


def test_gate_validates_epsilon():
    scores = {(0, 0): InterestScoreMap(0, 0, Tensor(np.array([[0.5]])))}
    for bad in (-0.1, 1.0, 2.0):
        with pytest.raises(ValueError):
            gate(scores, bad)


def test_active_mask_flat_layout():
    m = np.array([[True, False], [False, True]])
    am = ActiveMask(epsilon=0.1, masks={(0, 0): m})
    np.testing.assert_array_equal(am.flat()[(0, 0)], [True, False, False, True])


# ------------------------------------------------------------------- export

def ones_scores(h, w):
    return {
        (0, 0): InterestScoreMap(0, 0, Tensor(np.ones((h, w)))),
        (0, 1): InterestScoreMap(0, 1, Tensor(np.ones((h, w)))),
        (1, 0): InterestScoreMap(1, 0, Tensor(np.ones((h, w)))),
    }


def test_combined_car_maps_sum_and_clip():
    scores = {
        (0, 0): InterestScoreMap(0, 0, Tensor(np.full((2, 2), 0.7))),
        (0, 1): InterestScoreMap(0, 1, Tensor(np.full((2, 2), 0.6))),
        (1, 0): InterestScoreMap(1, 0, Tensor(np.full((2, 2), 0.25))),
    }
    combined = combined_car_maps(scores)
    np.testing.assert_array_equal(combined[0][0], np.ones((2, 2)))  # clipped
    np.testing.assert_allclose(combined[1][0], np.full((2, 2), 0.25))
    assert combined[0][1] == [0, 1]


def test_export_all_ones_and_round_trip(tmp_path):
    paths = export_interest_maps(ones_scores(3, 5), 0, tmp_path)
    assert len(paths) == 2
    for path in paths:
        grid_vals = read_interest_map(path)
        assert grid_vals.shape == (3, 5)
        np.testing.assert_array_equal(grid_vals, np.ones((3, 5)))


def test_export_round_trip_exact_values(tmp_path):
    rng = make_rng(8)
    vals = rng.uniform(size=(4, 4))
    scores = {(2, 0): InterestScoreMap(2, 0, Tensor(vals))}
    (path,) = export_interest_maps(scores, 1, tmp_path)
    np.testing.assert_array_equal(read_interest_map(path), vals)


def test_export_manifest_grows_and_replaces(tmp_path):
    export_interest_maps(ones_scores(2, 2), 0, tmp_path)
    export_interest_maps(ones_scores(2, 2), 1, tmp_path)
    export_interest_maps(ones_scores(2, 2), 0, tmp_path)  # replace layer 0
    with open(tmp_path / "manifest.json") as fh:
        entries = json.load(fh)["maps"]
    assert [(e["layer"], e["car"]) for e in entries] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert entries[0]["cameras"] == [0, 1]
