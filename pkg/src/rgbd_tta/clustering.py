"""Mean shift with a von Mises-Fisher kernel over unit-sphere pixel embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNASSIGNED = -1


@dataclass(frozen=True)
class ClusterParams:
    kappa: float = 30.0
    seeds: int = 64
    max_iters: int = 100
    tol: float = 1e-5
    merge_cos: float = 0.95
    min_cluster_frac: float = 0.001
    refine_iters: int = 20

    def validate(self) -> None:
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.seeds < 1 or self.max_iters < 0:
            raise ValueError("seeds must be >= 1 and max_iters >= 0")
        if not -1 <= self.merge_cos <= 1:
            raise ValueError("merge_cos must lie in [-1, 1]")


@dataclass
class ClusterSet:
    assignments: np.ndarray     # [H,W] cluster ids, UNASSIGNED for degenerate pixels
    centroids: np.ndarray       # [n,C] unit rows
    modes: np.ndarray           # [n,C] converged mean-shift modes

    @property
    def n(self) -> int:
        return len(self.centroids)

    def nearest_sets(self, embeddings: np.ndarray, k: int) -> np.ndarray:
        """[H*W, min(k,n)] nearest centroid ids per pixel, most similar first."""
        C = embeddings.shape[0]
        return nearest_clusters(embeddings.reshape(C, -1).T, self.centroids, k)


def _unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=-1, keepdims=True)


def vmf_density(z: np.ndarray, X: np.ndarray, kappa: float) -> float:
    """Unnormalised vMF kernel density sum_x exp(kappa <z, x>)."""
    return float(np.exp(kappa * (X @ z)).sum())


def farthest_point_seeds(X: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point sampling under cosine distance, starting at row 0.

    Stops early once every remaining row coincides with a chosen seed.
    """
    chosen = [0]
    dist = 1.0 - X @ X[0]
    while len(chosen) < count:
        i = int(np.argmax(dist))
        if dist[i] <= 1e-12:
            break
        chosen.append(i)
        dist = np.minimum(dist, 1.0 - X @ X[i])
    return np.array(chosen)


def shift_modes(X: np.ndarray, Z: np.ndarray, kappa: float, max_iters: int, tol: float,
                history: list | None = None) -> np.ndarray:
    """Run vMF mean shift from every row of ``Z`` until the cosine change is below ``tol``.

    When ``history`` is given, the iterate array is appended after every step.
    """
    Z = Z.copy()
    active = np.ones(len(Z), dtype=bool)
    if history is not None:
        history.append(Z.copy())
    for _ in range(max_iters):
        if not active.any():
            break
        za = Z[active]
        logits = kappa * (za @ X.T)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        znew = _unit_rows(w @ X)
        change = 1.0 - (znew * za).sum(axis=1)
        Z[active] = znew
        idx = np.flatnonzero(active)
        active[idx[change < tol]] = False
        if history is not None:
            history.append(Z.copy())
    return Z


def _merge_modes(Z: np.ndarray, merge_cos: float) -> np.ndarray:
    sums: list[np.ndarray] = []
    reps: list[np.ndarray] = []
    for z in Z:
        for j, r in enumerate(reps):
            if z @ r >= merge_cos:
                sums[j] = sums[j] + z
                reps[j] = sums[j] / np.linalg.norm(sums[j])
                break
        else:
            sums.append(z.copy())
            reps.append(z.copy())
    return np.array(reps)


def nearest_clusters(v: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` most cosine-similar centroids, descending.

    ``v`` may be a single vector or a stack of rows. Ties go to the lower index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    V = np.atleast_2d(v)
    c = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    vn = np.linalg.norm(V, axis=1, keepdims=True)
    sims = (V / np.where(vn > 0, vn, 1.0)) @ c.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :min(k, len(centroids))]
    return order[0] if np.ndim(v) == 1 else order


def compute_centroids(embeddings: np.ndarray, assignments: np.ndarray, n: int | None = None) -> np.ndarray:
    """Normalised mean of the member vectors of each cluster.

    ``embeddings`` is a [C,H,W] map (or [N,C] rows) and ``assignments`` the
    matching cluster ids; negative ids are ignored.
    """
    X = embeddings.reshape(embeddings.shape[0], -1).T if embeddings.ndim == 3 else embeddings
    a = np.asarray(assignments).reshape(-1)
    if n is None:
        n = int(a.max()) + 1 if a.size and a.max() >= 0 else 0
    keep = a >= 0
    counts = np.bincount(a[keep], minlength=n)
    if np.any(counts[:n] == 0):
        raise ValueError(f"empty cluster(s): {np.flatnonzero(counts[:n] == 0).tolist()}")
    sums = np.zeros((n, X.shape[1]))
    np.add.at(sums, a[keep], X[keep])
    norms = np.linalg.norm(sums, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("cluster mean vanished; centroid direction undefined")
    return sums / norms


def _dissolve_small(Xv: np.ndarray, labels: np.ndarray, reps: np.ndarray, min_px: int):
    """Drop the smallest under-sized cluster until none remain; returns (labels, kept rep ids)."""
    keep = np.arange(len(reps))
    while len(keep) > 1:
        counts = np.bincount(labels, minlength=len(keep))
        small = np.flatnonzero(counts < min_px)
        if small.size == 0:
            break
        keep = np.delete(keep, small[np.argmin(counts[small])])
        labels = np.argmax(Xv @ reps[keep].T, axis=1)
    return labels, keep


def meanshift_vmf(embeddings: np.ndarray, kappa: float = 30.0, seeds: int = 64, max_iters: int = 100,
                  tol: float = 1e-5, merge_cos: float = 0.95, min_cluster_px: int | None = None,
                  refine_iters: int = 20) -> ClusterSet:
    """Cluster a [C,H,W] map of unit pixel embeddings.

    Seeds come from farthest-point sampling, climb the vMF kernel density,
    and modes closer than ``merge_cos`` are merged. Pixels go to the most
    similar mode, clusters under ``min_cluster_px`` pixels are dissolved into
    their neighbours, and a few centroid/reassignment sweeps make every pixel's
    cluster its nearest centroid.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    C, H, W = embeddings.shape
    X = embeddings.reshape(C, -1).T.astype(np.float64)
    norms = np.linalg.norm(X, axis=1)
    valid = norms > 1e-12
    labels_full = np.full(H * W, UNASSIGNED)
    if not valid.any():
        empty = np.zeros((0, C))
        return ClusterSet(labels_full.reshape(H, W), empty, empty)
    Xv = X[valid] / norms[valid, None]
    if min_cluster_px is None:
        min_cluster_px = max(1, math.ceil(0.001 * H * W))

    seed_idx = farthest_point_seeds(Xv, seeds)
    Z = shift_modes(Xv, Xv[seed_idx], kappa, max_iters, tol)
    modes = _merge_modes(Z, merge_cos)
    labels = np.argmax(Xv @ modes.T, axis=1)
    labels, keep = _dissolve_small(Xv, labels, modes, min_cluster_px)
    modes = modes[keep]
    for _ in range(refine_iters):
        cents = compute_centroids(Xv, labels, len(modes))
        new, keep = _dissolve_small(Xv, np.argmax(Xv @ cents.T, axis=1), cents, min_cluster_px)
        modes = modes[keep]
        if len(keep) == len(cents) and np.array_equal(new, labels):
            break
        labels = new
    cents = compute_centroids(Xv, labels, len(modes))
    labels_full[valid] = labels
    return ClusterSet(labels_full.reshape(H, W), cents, modes)


def clusters_to_mask(cluster: ClusterSet) -> np.ndarray:
    """Instance label image: 0 = background, objects numbered 1..n'.

    The background is the cluster owning the most image-border pixels.
    """
    a = cluster.assignments
    mask = np.zeros(a.shape, dtype=np.int64)
    if cluster.n == 0:
        return mask
    border = np.concatenate([a[0], a[-1], a[1:-1, 0], a[1:-1, -1]])
    border = border[border >= 0]
    counts = np.bincount(border, minlength=cluster.n)
    bg = int(np.argmax(counts))
    label = 1
    for i in range(cluster.n):
        if i == bg:
            continue
        members = a == i
        if members.any():
            mask[members] = label
            label += 1
    return mask


def cluster_embeddings(embeddings: np.ndarray, params: ClusterParams = ClusterParams()) -> ClusterSet:
    H, W = embeddings.shape[1:]
    return meanshift_vmf(embeddings, params.kappa, params.seeds, params.max_iters, params.tol,
                         params.merge_cos, max(1, math.ceil(params.min_cluster_frac * H * W)),
                         params.refine_iters)
