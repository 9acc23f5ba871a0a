"""Unseen-object segmentation metrics: Overlap P/R/F, Boundary P/R/F and F@.75.

Predicted and ground-truth objects are matched one-to-one by maximising the
total per-object F-measure; background (id 0) never takes part. Everything is
reported on a 0-100 scale.
"""
from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.optimize import linear_sum_assignment

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["overlap", "boundary", "f_at_75", "per_image"],
    "definitions": {
        "pct": {"type": "number", "minimum": 0, "maximum": 100},
        "prf": {
            "type": "object",
            "required": ["p", "r", "f"],
            "properties": {k: {"$ref": "#/definitions/pct"} for k in ("p", "r", "f")},
        },
    },
    "properties": {
        "overlap": {"$ref": "#/definitions/prf"},
        "boundary": {"$ref": "#/definitions/prf"},
        "f_at_75": {"$ref": "#/definitions/pct"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["overlap", "boundary", "f_at_75"],
                "properties": {
                    "overlap": {"$ref": "#/definitions/prf"},
                    "boundary": {"$ref": "#/definitions/prf"},
                    "f_at_75": {"$ref": "#/definitions/pct"},
                },
            },
        },
    },
}


def relabel(labels: np.ndarray) -> np.ndarray:
    """Map object ids onto 1..n in order of first id value; 0 stays background."""
    labels = np.asarray(labels)
    ids = np.unique(labels[labels > 0])
    out = np.zeros(labels.shape, dtype=np.int64)
    for new, old in enumerate(ids, start=1):
        out[labels == old] = new
    return out


def _objects(labels: np.ndarray) -> np.ndarray:
    return np.unique(labels[labels > 0])


def _f(a: float, b: float) -> float:
    return 2 * a * b / (a + b) if a + b > 0 else 0.0


def affinity_matrix(pred: np.ndarray, gt: np.ndarray):
    """Per-object F-measure 2|c&g|/(|c|+|g|) for every (pred, gt) pair."""
    pids, gids = _objects(pred), _objects(gt)
    inter = np.zeros((len(pids), len(gids)))
    if len(pids) and len(gids):
        both = (pred > 0) & (gt > 0)
        pj = np.searchsorted(pids, pred[both])
        gj = np.searchsorted(gids, gt[both])
        np.add.at(inter, (pj, gj), 1)
    psize = np.array([(pred == i).sum() for i in pids], dtype=float)
    gsize = np.array([(gt == j).sum() for j in gids], dtype=float)
    aff = 2 * inter / (psize[:, None] + gsize[None, :]) if inter.size else inter
    return pids, gids, aff, inter, psize, gsize


def assign(aff: np.ndarray) -> list[tuple[int, int]]:
    """Max-total-affinity one-to-one matching on a rectangular matrix (row, col indices)."""
    if aff.size == 0:
        return []
    rows, cols = linear_sum_assignment(aff, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if aff[r, c] > 0]


def brute_force_assign(aff: np.ndarray) -> float:
    """Best total affinity by enumerating every partial injection; for testing."""
    n, m = aff.shape
    if n == 0 or m == 0:
        return 0.0
    if n <= m:
        return max(sum(aff[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return max(sum(aff[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def hungarian_match(pred: np.ndarray, gt: np.ndarray) -> list[tuple[int, int]]:
    """Matched ``(pred id, gt id)`` pairs; objects without any overlap stay unmatched."""
    pids, gids, aff, *_ = affinity_matrix(pred, gt)
    return [(int(pids[r]), int(gids[c])) for r, c in assign(aff)]


def _prf(num_p, den_p, num_r, den_r, n_pred, n_gt) -> dict:
    if n_pred == 0 and n_gt == 0:
        return {"p": 100.0, "r": 100.0, "f": 100.0}
    if n_pred == 0 or n_gt == 0:
        return {"p": 0.0, "r": 0.0, "f": 0.0}
    p = num_p / den_p if den_p else 0.0
    r = num_r / den_r if den_r else 0.0
    return {"p": 100 * p, "r": 100 * r, "f": 100 * _f(p, r)}


def overlap_prf(pred: np.ndarray, gt: np.ndarray, matching=None) -> dict:
    if matching is None:
        matching = hungarian_match(pred, gt)
    pids, gids = _objects(pred), _objects(gt)
    tp = sum(int(((pred == i) & (gt == j)).sum()) for i, j in matching)
    den_p = int((pred > 0).sum())
    den_r = int((gt > 0).sum())
    return _prf(tp, den_p, tp, den_r, len(pids), len(gids))


def object_boundary(mask: np.ndarray) -> np.ndarray:
    """Member pixels with a 4-neighbour outside the object; the image edge counts as outside."""
    padded = np.pad(mask, 1, constant_values=False)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~inner


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return mask
    return binary_dilation(mask, structure=np.ones((2 * r + 1, 2 * r + 1), dtype=bool))


def boundary_prf(pred: np.ndarray, gt: np.ndarray, matching=None, dilation_radius: int = 1) -> dict:
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    if matching is None:
        matching = hungarian_match(pred, gt)
    pids, gids = _objects(pred), _objects(gt)
    pb = {i: object_boundary(pred == i) for i in pids}
    gb = {j: object_boundary(gt == j) for j in gids}
    num_p = num_r = 0
    for i, j in matching:
        num_p += int((pb[i] & _dilate(gb[j], dilation_radius)).sum())
        num_r += int((_dilate(pb[i], dilation_radius) & gb[j]).sum())
    den_p = sum(int(b.sum()) for b in pb.values())
    den_r = sum(int(b.sum()) for b in gb.values())
    return _prf(num_p, den_p, num_r, den_r, len(pids), len(gids))


def f_at_75(pred: np.ndarray, gt: np.ndarray, matching=None) -> float:
    """Percentage of ground-truth objects whose matched prediction reaches F >= 0.75."""
    if matching is None:
        matching = hungarian_match(pred, gt)
    n_gt = len(_objects(gt))
    if n_gt == 0:
        warnings.warn("f_at_75: no ground-truth objects; reporting 100")
        return 100.0
    hits = 0
    for i, j in matching:
        inter = ((pred == i) & (gt == j)).sum()
        if 2 * inter / ((pred == i).sum() + (gt == j).sum()) >= 0.75:
            hits += 1
    return 100.0 * hits / n_gt


def evaluate_image(pred: np.ndarray, gt: np.ndarray, dilation_radius: int = 1) -> dict:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    m = hungarian_match(pred, gt)
    return {"overlap": overlap_prf(pred, gt, m),
            "boundary": boundary_prf(pred, gt, m, dilation_radius),
            "f_at_75": f_at_75(pred, gt, m)}


def aggregate(per_image: list[dict]) -> dict:
    """Dataset report: P and R averaged over images, F recomputed from them; F@.75 averaged."""
    def prf(key):
        if not per_image:
            return {"p": 0.0, "r": 0.0, "f": 0.0}
        p = float(np.mean([d[key]["p"] for d in per_image]))
        r = float(np.mean([d[key]["r"] for d in per_image]))
        return {"p": p, "r": r, "f": _f(p, r)}

    return {"overlap": prf("overlap"), "boundary": prf("boundary"),
            "f_at_75": float(np.mean([d["f_at_75"] for d in per_image])) if per_image else 0.0,
            "per_image": per_image}
