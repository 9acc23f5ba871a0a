"""Desk-scale sim-to-real experiment: pretrain on clean scenes, adapt on shifted ones."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptConfig, adapt_run
from .clustering import ClusterParams, cluster_embeddings, clusters_to_mask
from .dataset import DEPTH_SCALE_MM, network_inputs
from .metrics import aggregate, evaluate_image
from .net import EmbedNet, NetworkSpec, conv_digest
from .pretrain import PretrainConfig, pretrain
from .scenegen import SceneConfig, SceneSample, gen_scene

log = logging.getLogger(__name__)


def segment(net: EmbedNet, rgb, depth, params: ClusterParams = ClusterParams()) -> np.ndarray:
    """Eval-mode forward, clustering and background removal -> instance mask."""
    return clusters_to_mask(cluster_embeddings(net.embed(rgb, depth), params))


def evaluate(net: EmbedNet, frames, params: ClusterParams = ClusterParams(), dilation_radius: int = 1) -> dict:
    """``frames``: iterable of (rgb, depth, labels) network-ready triples."""
    per_image = [evaluate_image(segment(net, rgb, depth, params), labels, dilation_radius)
                 for rgb, depth, labels in frames]
    return aggregate(per_image)


def scenes(seeds, profile: str, cfg: SceneConfig) -> list[SceneSample]:
    return [gen_scene(int(s), profile=profile, config=cfg) for s in seeds]


def as_frames(samples, depth_scale: float = DEPTH_SCALE_MM, labels: bool = True):
    out = []
    for s in samples:
        rgb, depth = network_inputs(s.rgb, s.depth, depth_scale)
        out.append((rgb, depth, s.labels) if labels else (rgb, depth))
    return out


@dataclass(frozen=True)
class BenchmarkConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    embed_dim: int = 8
    train_scenes: int = 64
    test_scenes: int = 32
    train_seed: int = 0
    test_seed: int = 10_000
    shift_profile: str = "shifted"
    init_seed: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    depth_scale: float = DEPTH_SCALE_MM

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.scene.height, self.scene.width, self.embed_dim)


def pretrained_model(cfg: BenchmarkConfig) -> tuple[EmbedNet, list[dict]]:
    train = as_frames(scenes(range(cfg.train_seed, cfg.train_seed + cfg.train_scenes), "none", cfg.scene),
                      cfg.depth_scale)
    net = EmbedNet(cfg.network_spec(), seed=cfg.init_seed)
    return pretrain(net, train, cfg.pretrain)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), net: EmbedNet | None = None,
                  modalities=(("rgb", "depth"),)) -> dict:
    """Evaluate the pretrained model on shifted scenes before and after adaptation.

    One adaptation run is made per entry of ``modalities``.
    """
    t0 = time.perf_counter()
    if net is None:
        net, _ = pretrained_model(cfg)
    test_seeds = range(cfg.test_seed, cfg.test_seed + cfg.test_scenes)
    shifted = as_frames(scenes(test_seeds, cfg.shift_profile, cfg.scene), cfg.depth_scale)
    clean = as_frames(scenes(test_seeds, "none", cfg.scene), cfg.depth_scale)
    result = {
        "clean": evaluate(net, clean, cfg.adapt.cluster),
        "before": evaluate(net, shifted, cfg.adapt.cluster),
        "digest_before": conv_digest(net.weights),
        "adapted": {},
    }
    unlabeled = [(rgb, depth) for rgb, depth, _ in shifted]
    for mods in modalities:
        acfg = replace(cfg.adapt, modality_mask=tuple(mods))
        adapted, trace = adapt_run(net, unlabeled, acfg)
        result["adapted"][",".join(mods)] = {
            "report": evaluate(adapted, shifted, cfg.adapt.cluster),
            "digest": conv_digest(adapted.weights),
            "trace": [r.to_json() for r in trace],
            "net": adapted,
        }
    result["seconds"] = time.perf_counter() - t0
    return result
