import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbd_tta.metrics import (
    REPORT_SCHEMA,
    affinity_matrix,
    aggregate,
    assign,
    boundary_prf,
    brute_force_assign,
    evaluate_image,
    f_at_75,
    hungarian_match,
    object_boundary,
    overlap_prf,
    relabel,
)
from rgbd_tta.scenegen import SceneConfig, gen_scene


def random_labeling(rng, H=12, W=12, n=4):
    """Blocky random labeling with up to ``n`` objects, background 0."""
    lab = np.zeros((H, W), dtype=np.int64)
    for i in range(1, n + 1):
        y, x = rng.integers(0, H - 2), rng.integers(0, W - 2)
        h, w = rng.integers(2, H // 2), rng.integers(2, W // 2)
        lab[y:y + h, x:x + w] = i
    return lab


def permute_ids(lab, rng):
    ids = np.unique(lab[lab > 0])
    new = rng.permutation(np.arange(1, 100))[:len(ids)]
    out = np.zeros_like(lab)
    for a, b in zip(ids, new):
        out[lab == a] = b
    return out


# --- matching -------------------------------------------------------------

def test_identity_matching():
    rng = np.random.default_rng(0)
    gt = relabel(random_labeling(rng))
    pairs = hungarian_match(gt, gt)
    assert pairs == [(i, i) for i in range(1, gt.max() + 1)]
    _, _, aff, *_ = affinity_matrix(gt, gt)
    assert sum(aff[i - 1, j - 1] for i, j in pairs) == pytest.approx(gt.max())


def test_two_by_two_example():
    aff = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert assign(aff) == [(0, 0), (1, 1)]
    assert brute_force_assign(aff) == pytest.approx(1.7)


def test_matching_equals_brute_force_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n, m = rng.integers(0, 7, size=2)
        aff = rng.uniform(size=(n, m)) * (rng.uniform(size=(n, m)) < 0.7)
        total = sum(aff[r, c] for r, c in assign(aff))
        assert total == pytest.approx(brute_force_assign(aff), abs=1e-12)


def test_zero_affinity_pairs_unmatched():
    gt = np.zeros((6, 6), dtype=int)
    gt[:2, :2] = 1
    pred = np.zeros((6, 6), dtype=int)
    pred[4:, 4:] = 1
    assert hungarian_match(pred, gt) == []


# --- overlap --------------------------------------------------------------

def test_overlap_perfect():
    gt = relabel(random_labeling(np.random.default_rng(1)))
    assert overlap_prf(gt, gt) == {"p": 100.0, "r": 100.0, "f": 100.0}


def test_overlap_hand_example():
    gt = np.zeros((3, 3), dtype=int)
    gt[0, 0] = gt[0, 1] = gt[1, 0] = gt[1, 1] = 1
    pred = np.zeros((3, 3), dtype=int)
    pred[0, 0] = pred[0, 1] = pred[1, 0] = 1      # 3 of the 4 gt pixels
    pred[2, 2] = 1                                # plus one background pixel
    r = overlap_prf(pred, gt)
    assert r["p"] == pytest.approx(75) and r["r"] == pytest.approx(75) and r["f"] == pytest.approx(75)


def test_overlap_empty_cases():
    z = np.zeros((4, 4), dtype=int)
    one = z.copy()
    one[1, 1] = 1
    assert overlap_prf(z, z)["f"] == 100.0
    assert overlap_prf(one, z)["f"] == 0.0
    assert overlap_prf(z, one)["f"] == 0.0


def test_unmatched_prediction_lowers_precision():
    gt = np.zeros((6, 6), dtype=int)
    gt[:3, :3] = 1
    pred = gt.copy()
    pred[4:, 4:] = 2
    r = overlap_prf(pred, gt)
    assert r["r"] == 100.0 and r["p"] == pytest.approx(100 * 9 / 13)


def test_partition_identity_iff_f100():
    rng = np.random.default_rng(3)
    gt = relabel(random_labeling(rng))
    assert overlap_prf(permute_ids(gt, rng), gt)["f"] == 100.0
    ys, xs = np.nonzero(gt)
    for y, x in zip(ys[:5], xs[:5]):
        bad = gt.copy()
        bad[y, x] = 0
        assert overlap_prf(bad, gt)["f"] < 100.0


# --- boundary -------------------------------------------------------------

def test_object_boundary_square():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    b = object_boundary(m)
    assert b.sum() == 12 and not b[2:4, 2:4].any()


def test_object_boundary_image_edge_counts_as_outside():
    assert object_boundary(np.ones((3, 3), bool)).sum() == 8


def test_boundary_perfect_any_radius():
    gt = relabel(random_labeling(np.random.default_rng(4)))
    for r in (0, 1, 3):
        assert boundary_prf(gt, gt, dilation_radius=r)["f"] == 100.0


def test_boundary_shift_by_one():
    gt = np.zeros((10, 10), dtype=int)
    gt[2:7, 2:7] = 1
    pred = np.zeros((10, 10), dtype=int)
    pred[3:8, 2:7] = 1
    f0 = boundary_prf(pred, gt, dilation_radius=0)["f"]
    f1 = boundary_prf(pred, gt, dilation_radius=1)["f"]
    assert f1 > 0 and f0 < f1
    # both squares have 16 boundary pixels; radius 1 absorbs a one-pixel shift entirely
    assert f1 == pytest.approx(100.0)
    # radius 0: only the shared side-column pixels coincide (rows 3..6 on two sides, 8 px)
    pb, gb = object_boundary(pred == 1), object_boundary(gt == 1)
    assert (pb & gb).sum() == 8
    assert f0 == pytest.approx(50.0)


def test_boundary_large_radius_saturates():
    rng = np.random.default_rng(5)
    gt, pred = relabel(random_labeling(rng)), relabel(random_labeling(rng))
    m = hungarian_match(pred, gt)
    r = boundary_prf(pred, gt, m, dilation_radius=20)
    size = lambda lab, ids: sum(int(object_boundary(lab == i).sum()) for i in ids)
    p_ids, g_ids = np.unique(pred[pred > 0]), np.unique(gt[gt > 0])
    assert r["p"] == pytest.approx(100 * size(pred, [i for i, _ in m]) / size(pred, p_ids))
    assert r["r"] == pytest.approx(100 * size(gt, [j for _, j in m]) / size(gt, g_ids))


def test_boundary_rejects_negative_radius():
    with pytest.raises(ValueError):
        boundary_prf(np.zeros((3, 3), int), np.zeros((3, 3), int), dilation_radius=-1)


# --- F@.75 ----------------------------------------------------------------

def test_f75_perfect():
    gt = relabel(random_labeling(np.random.default_rng(6)))
    assert f_at_75(gt, gt) == 100.0


def test_f75_half():
    gt = np.zeros((10, 20), dtype=int)
    gt[0:5, 0:5] = 1          # 25 px
    gt[6:10, 10:20] = 2       # 40 px
    pred = np.zeros_like(gt)
    pred[0:5, 0:4] = 1        # 20 px inside object 1: F = 40 / 45 = 0.889
    matching = [(1, 1)]
    assert f_at_75(pred, gt, matching) == 50.0
    assert hungarian_match(pred, gt) == matching


def test_f75_one_matched_at_08_one_unmatched():
    gt = np.zeros((10, 20), dtype=int)
    gt[0:4, 0:5] = 1          # 20 px
    gt[6:10, 10:20] = 2       # never predicted
    pred = np.zeros_like(gt)
    pred[0:4, 0:4] = 1        # 16 gt px
    pred[4, 0:4] = 1          # + 4 background px: F = 32 / 40 = 0.8
    _, _, aff, *_ = affinity_matrix(pred, gt)
    assert aff[0, 0] == pytest.approx(0.8)
    assert f_at_75(pred, gt) == 50.0
    pred[5, 0:5] = 1          # 5 more background px: F = 32 / 45 < 0.75
    assert f_at_75(pred, gt) == 0.0


def test_f75_no_gt_warns():
    z = np.zeros((3, 3), int)
    with pytest.warns(UserWarning):
        assert f_at_75(z, z) == 100.0


def test_f75_side_by_side_duplication():
    rng = np.random.default_rng(7)
    for _ in range(20):
        gt, pred = relabel(random_labeling(rng)), relabel(random_labeling(rng))
        shift = lambda a: np.where(a > 0, a + a.max(), 0)
        gt2, pred2 = np.hstack([gt, shift(gt)]), np.hstack([pred, shift(pred)])
        assert f_at_75(pred2, gt2) == pytest.approx(f_at_75(pred, gt))
        assert overlap_prf(pred2, gt2)["f"] == pytest.approx(overlap_prf(pred, gt)["f"])


# --- properties -----------------------------------------------------------

@settings(max_examples=60)
@given(st.integers(0, 100_000))
def test_id_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gt, pred = random_labeling(rng), random_labeling(rng)
    a = evaluate_image(pred, gt)
    b = evaluate_image(permute_ids(pred, rng), permute_ids(gt, rng))
    for key in ("overlap", "boundary"):
        for k in "prf":
            assert a[key][k] == pytest.approx(b[key][k], abs=1e-12)
    assert a["f_at_75"] == pytest.approx(b["f_at_75"])


@settings(max_examples=60)
@given(st.integers(0, 100_000))
def test_f_is_harmonic_mean_and_in_range(seed):
    rng = np.random.default_rng(seed)
    r = evaluate_image(random_labeling(rng), random_labeling(rng))
    for key in ("overlap", "boundary"):
        p, rr, f = r[key]["p"], r[key]["r"], r[key]["f"]
        assert 0 <= p <= 100 and 0 <= rr <= 100 and 0 <= f <= 100
        assert f == pytest.approx(2 * p * rr / (p + rr) if p + rr > 0 else 0.0, abs=1e-9)
    assert 0 <= r["f_at_75"] <= 100


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_growing_toward_gt_never_hurts(seed):
    rng = np.random.default_rng(seed)
    gt = np.zeros((12, 12), dtype=int)
    gt[2:10, 3:9] = 1
    pred = np.zeros_like(gt)
    pred[rng.integers(2, 6):rng.integers(6, 10), 3:9] = 1
    pred[0, 0] = 1                                    # one false-positive pixel
    prev = 0.0
    missing = np.argwhere((gt == 1) & (pred == 0))
    for y, x in rng.permutation(missing):
        pred[y, x] = 1
        _, _, aff, *_ = affinity_matrix(pred, gt)
        assert aff[0, 0] >= prev - 1e-15
        prev = aff[0, 0]


def test_perfect_on_generated_scenes():
    cfg = SceneConfig()
    for seed in range(10):
        lab = gen_scene(seed, config=cfg).labels
        r = evaluate_image(lab, lab)
        assert r["overlap"]["f"] == r["boundary"]["f"] == r["f_at_75"] == 100.0


# --- report ---------------------------------------------------------------

def test_aggregate_schema_and_harmonic_mean():
    rng = np.random.default_rng(8)
    per = [evaluate_image(random_labeling(rng), random_labeling(rng)) for _ in range(5)]
    rep = json.loads(json.dumps(aggregate(per)))
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert len(rep["per_image"]) == 5
    p, r = rep["overlap"]["p"], rep["overlap"]["r"]
    assert rep["overlap"]["f"] == pytest.approx(2 * p * r / (p + r), abs=1e-9)
    assert rep["overlap"]["p"] == pytest.approx(np.mean([d["overlap"]["p"] for d in per]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate_image(np.zeros((3, 3), int), np.zeros((3, 4), int))
