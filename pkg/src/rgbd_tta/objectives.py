"""Test-time objectives built on cluster centroids instead of a classifier head.

* entropy objective: Shannon entropy (bits) of the cosine-similarity softmax
  over each pixel's ``k`` nearest centroids;
* cross-modality distillation: KL (nats) from the fused-map cluster
  distribution (teacher) to the RGB-only and depth-only distributions
  (students), which share the teacher's cluster assignment;
* a supervised cross-entropy used only to pretrain the toy network.

Centroids and teacher rows are constants in the graph.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import graph as G
from .clustering import ClusterSet, compute_centroids, nearest_clusters
from .net import PixelEmbeddingMap

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    k: int = 2
    T: float = 1.0
    sample_px: int = 1024
    rng_seed: int = 0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.T <= 0:
            raise ValueError("temperature T must be > 0")
        if self.sample_px < 1:
            raise ValueError("sample_px must be >= 1")


@dataclass
class ProbabilityRow:
    indices: np.ndarray
    probs: np.ndarray


def nonparam_prob(v, centroids, support, T: float = 1.0) -> ProbabilityRow:
    """Softmax of cosine similarities between ``v`` and the centroids in ``support``."""
    support = np.asarray(support, dtype=np.intp)
    if support.size == 0:
        raise ValueError("support must be non-empty")
    c = np.asarray(centroids, dtype=np.float64)[support]
    p = G.softmax_temp(G.cosine_sim(G.const(np.atleast_2d(v)), G.const(c)), T).value[0]
    return ProbabilityRow(support, p)


def sample_pixels(cluster: ClusterSet, sample_px: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted flat indices of up to ``sample_px`` distinct assigned pixels."""
    valid = np.flatnonzero(cluster.assignments.reshape(-1) >= 0)
    if valid.size <= sample_px:
        return valid
    return np.sort(rng.choice(valid, size=sample_px, replace=False))


def _pixels(cluster, cfg, pixels, rng):
    if pixels is not None:
        return np.asarray(pixels)
    return sample_pixels(cluster, cfg.sample_px, rng or np.random.default_rng(cfg.rng_seed))


def neo_loss(embeddings: G.Node, cluster: ClusterSet, cfg: LossConfig, pixels=None, rng=None) -> G.Node:
    """Mean per-pixel entropy (bits) over each pixel's k nearest clusters.

    The softmax is normalised over the k-nearest support only, so the
    per-pixel entropy lies in [0, log2 k].
    """
    px = _pixels(cluster, cfg, pixels, rng)
    rows = G.pixel_rows(embeddings, px)
    support = nearest_clusters(rows.value, cluster.centroids, cfg.k)
    sims = G.cosine_sim(rows, G.const(cluster.centroids))
    p = G.softmax_temp(G.take_cols(sims, support), 1.0)
    plogp = G.total(G.mul(p, G.log(p, LOG_FLOOR)))
    return G.scale(plogp, -1.0 / (len(px) * math.log(2.0)))


def _kl_to_student(p_teacher: np.ndarray, student: G.Node, centroids: np.ndarray, px, T) -> G.Node:
    q = G.softmax_temp(G.cosine_sim(G.pixel_rows(student, px), G.const(centroids)), T)
    n = len(px)
    h_cross = G.weighted_sum(G.log(q, LOG_FLOOR), -p_teacher / n)
    neg_h = float((p_teacher * np.log(np.maximum(p_teacher, LOG_FLOOR))).sum() / n)
    return G.add(h_cross, G.const(np.array(neg_h)))


def student_centroids(maps: PixelEmbeddingMap, cluster: ClusterSet) -> tuple[np.ndarray, np.ndarray]:
    """RGB-only and depth-only centroids under the teacher's cluster assignment."""
    return (compute_centroids(maps.rgb_only.value, cluster.assignments, cluster.n),
            compute_centroids(maps.depth_only.value, cluster.assignments, cluster.n))


def teacher_rows(maps: PixelEmbeddingMap, cluster: ClusterSet, px, T: float) -> np.ndarray:
    rows = G.const(G.pixel_rows(G.const(maps.fused.value), px).value)
    return G.softmax_temp(G.cosine_sim(rows, G.const(cluster.centroids)), T).value


def ckd_loss(maps: PixelEmbeddingMap, cluster: ClusterSet, cfg: LossConfig, pixels=None, rng=None,
             centroids: tuple[np.ndarray, np.ndarray] | None = None) -> G.Node:
    """0.5 * (KL(teacher || rgb student) + KL(teacher || depth student)), mean over pixels, nats."""
    px = _pixels(cluster, cfg, pixels, rng)
    p_t = teacher_rows(maps, cluster, px, cfg.T)
    c_rgb, c_d = centroids if centroids is not None else student_centroids(maps, cluster)
    kl_rgb = _kl_to_student(p_t, maps.rgb_only, c_rgb, px, cfg.T)
    kl_d = _kl_to_student(p_t, maps.depth_only, c_d, px, cfg.T)
    return G.scale(G.add(kl_rgb, kl_d), 0.5)


def total_loss(neo: G.Node, ckd: G.Node, cfg: LossConfig) -> G.Node:
    return G.add(G.scale(neo, cfg.lambda1), G.scale(ckd, cfg.lambda2))


def pretrain_loss(embeddings: G.Node, gt_labels: np.ndarray, sample_px: int = 1024,
                  rng: np.random.Generator | None = None, pixels=None) -> G.Node | None:
    """Cross-entropy of each pixel's ground-truth region under the cosine softmax (T=1).

    Every label value, background included, is a region. Returns ``None`` with
    a warning when the image has fewer than two regions.
    """
    labels = np.asarray(gt_labels).reshape(-1)
    ids, dense = np.unique(labels, return_inverse=True)
    if len(ids) < 2:
        warnings.warn("pretrain_loss: fewer than two ground-truth regions, skipping image")
        return None
    cents = compute_centroids(embeddings.value, dense.reshape(-1), len(ids))
    if pixels is None:
        rng = rng or np.random.default_rng(0)
        pixels = np.arange(labels.size) if labels.size <= sample_px else \
            np.sort(rng.choice(labels.size, size=sample_px, replace=False))
    px = np.asarray(pixels)
    p = G.softmax_temp(G.cosine_sim(G.pixel_rows(embeddings, px), G.const(cents)), 1.0)
    onehot = np.zeros(p.shape)
    onehot[np.arange(len(px)), dense[px]] = -1.0 / len(px)
    return G.weighted_sum(G.log(p, LOG_FLOOR), onehot)
