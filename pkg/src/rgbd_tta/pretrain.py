"""Supervised pretraining of the toy network on labelled clean scenes.

Stands in for large-scale synthetic pretraining: every parameter (conv and BN)
is trained with Adam on the ground-truth-centroid cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import graph as G
from .net import EmbedNet, param_names
from .objectives import pretrain_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    sample_px: int = 1024
    bn_momentum: float = 0.1
    seed: int = 0


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def pretrain(net: EmbedNet, frames: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
             cfg: PretrainConfig = PretrainConfig()) -> tuple[EmbedNet, list[dict]]:
    """Train a copy of ``net`` on ``(rgb, depth, labels)`` frames; returns it with a loss trace."""
    if not frames:
        raise ValueError("pretraining needs at least one frame")
    net = net.copy()
    net.momentum = cfg.bn_momentum
    names = [n for n in param_names(net.spec) if not n.endswith(("run_mean", "run_var"))]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(frames))
    trace = []
    for step in range(cfg.steps):
        pos = step % len(frames)
        if pos == 0 and step:
            order = rng.permutation(len(frames))
        rgb, depth, labels = frames[int(order[pos])]
        maps = net.forward(rgb, depth, "train", trainable=names)
        loss = pretrain_loss(maps.fused, labels, cfg.sample_px, rng)
        if loss is None:
            continue
        opt.step(net.weights, G.backward(loss))
        trace.append({"step": step, "loss": float(loss.value)})
    # leave the weights exactly representable in the float32 weights file
    net.weights = {k: v.astype(np.float32).astype(np.float64) for k, v in net.weights.items()}
    return net, trace
