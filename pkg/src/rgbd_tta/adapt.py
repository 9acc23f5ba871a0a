"""Fully test-time adaptation of the BN affine parameters and running statistics.

Each iteration: train-mode forward on one unlabeled RGB-D frame, mean shift
clustering of the fused embedding, entropy + distillation loss, backward, and
a plain SGD step on gamma/beta of the adapted streams. Convolutions never
change. Streams outside ``modality_mask`` run entirely in eval mode, so none of
their BN state moves either.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import graph as G
from .clustering import ClusterParams, cluster_embeddings
from .net import STREAMS, EmbedNet, bn_affine_names, save_weights
from .objectives import LossConfig, ckd_loss, neo_loss, sample_pixels, total_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    base_lr: float = 0.005
    warmup_iters: int = 100
    total_iters: int = 500
    bn_momentum: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    shuffle: bool = False
    modality_mask: tuple[str, ...] = ("rgb", "depth")
    cluster: ClusterParams = field(default_factory=ClusterParams)

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError("need 0 <= warmup_iters <= total_iters")
        if not 0 < self.bn_momentum <= 1:
            raise ValueError("bn_momentum must lie in (0, 1]")
        if not self.modality_mask:
            raise ValueError("modality_mask must name at least one of rgb, depth")
        bad = set(self.modality_mask) - set(STREAMS)
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        self.loss.validate()
        self.cluster.validate()


def lr_at(it: int, cfg: AdaptConfig) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_iters``, then half-cosine decay."""
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    if it < cfg.warmup_iters:
        return cfg.base_lr * (it + 1) / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (it - cfg.warmup_iters) / span))


@dataclass
class StepRecord:
    iter: int
    lr: float
    l_neo: float
    l_ckd: float
    l_total: float
    n: int
    step_ms: float
    frame: int = 0
    skipped: bool = False
    grads: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("grads")
        return d


def adapt_step(net: EmbedNet, rgb, depth, cfg: AdaptConfig, it: int = 0,
               rng: np.random.Generator | None = None, frame: int = 0) -> tuple[EmbedNet, StepRecord]:
    """One adaptation iteration, applied to ``net`` in place."""
    t0 = time.perf_counter()
    lr = lr_at(it, cfg)
    rng = rng if rng is not None else np.random.default_rng(cfg.loss.rng_seed)
    names = bn_affine_names(net.spec, cfg.modality_mask)
    modes = {s: ("train" if s in cfg.modality_mask else "eval") for s in STREAMS}
    net.momentum = cfg.bn_momentum

    maps = net.forward(rgb, depth, trainable=names, stream_modes=modes, update_stats=False)
    cluster = cluster_embeddings(maps.fused.value, cfg.cluster)
    if cluster.n == 0:
        log.warning("iteration %d: clustering found no modes, step skipped", it)
        return net, StepRecord(it, lr, math.nan, math.nan, math.nan, 0,
                               (time.perf_counter() - t0) * 1e3, frame, skipped=True)

    px = sample_pixels(cluster, cfg.loss.sample_px, rng)
    neo = neo_loss(maps.fused, cluster, cfg.loss, pixels=px)
    ckd = ckd_loss(maps, cluster, cfg.loss, pixels=px)
    loss = total_loss(neo, ckd, cfg.loss)
    grads = G.backward(loss)

    net.apply_batch_stats(maps.batch_stats)
    for name in names:
        if name in grads:
            net.weights[name] = net.weights[name] - lr * grads[name]
    rec = StepRecord(it, lr, float(neo.value), float(ckd.value), float(loss.value), cluster.n,
                     (time.perf_counter() - t0) * 1e3, frame, grads=grads)
    return net, rec


def write_trace(path, records: Sequence) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r, sort_keys=True) + "\n")


def adapt_run(net: EmbedNet, frames: Sequence[tuple[np.ndarray, np.ndarray]], cfg: AdaptConfig,
              trace_path=None, weights_out=None) -> tuple[EmbedNet, list[StepRecord]]:
    """Adapt a copy of ``net`` for ``cfg.total_iters`` steps over ``frames`` (network-ready inputs).

    Frames are visited in order, wrapping around; with ``shuffle`` each pass
    uses a fresh seeded permutation.
    """
    cfg.validate()
    if not frames:
        raise ValueError("adaptation needs at least one frame")
    net = net.copy()
    net.momentum = cfg.bn_momentum
    sample_ss, order_ss = np.random.SeedSequence(cfg.loss.rng_seed).spawn(2)
    sample_rng = np.random.default_rng(sample_ss)
    order_rng = np.random.default_rng(order_ss)
    order = np.arange(len(frames))
    trace: list[StepRecord] = []
    for it in range(cfg.total_iters):
        pos = it % len(frames)
        if cfg.shuffle and pos == 0:
            order = order_rng.permutation(len(frames))
        idx = int(order[pos])
        rgb, depth = frames[idx]
        net, rec = adapt_step(net, rgb, depth, cfg, it, sample_rng, frame=idx)
        rec.grads = {}
        trace.append(rec)
    if trace_path is not None:
        write_trace(trace_path, trace)
    if weights_out is not None:
        save_weights(net.weights, weights_out)
    return net, trace


def measure_objectives(net: EmbedNet, rgb, depth, cfg: AdaptConfig) -> dict:
    """Full-image NEO / CKD of the train-mode forward, without touching the model."""
    modes = {s: ("train" if s in cfg.modality_mask else "eval") for s in STREAMS}
    maps = net.forward(rgb, depth, stream_modes=modes, update_stats=False)
    cluster = cluster_embeddings(maps.fused.value, cfg.cluster)
    px = np.flatnonzero(cluster.assignments.reshape(-1) >= 0)
    return {"neo": float(neo_loss(maps.fused, cluster, cfg.loss, pixels=px).value),
            "ckd": float(ckd_loss(maps, cluster, cfg.loss, pixels=px).value),
            "n": cluster.n}
