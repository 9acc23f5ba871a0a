"""Synthetic tabletop RGB-D scenes with exact instance labels and optional sensor-style corruption.

Geometry and corruption draw from independent child streams of the sample
seed, so a scene rendered under any shift profile has the same labels as its
clean rendering.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .imageio import write_pgm16, write_ppm


@dataclass(frozen=True)
class ShiftProfile:
    depth_boundary_jitter_px: int = 0
    depth_noise_std_mm: float = 0.0
    illumination_gain: float = 0.0     # 0 disables the gain
    hue_shift: float = 0.0             # fraction of the hue circle
    texture_noise_std: float = 0.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("shift profile values must be >= 0")


PROFILES: dict[str, ShiftProfile] = {
    "none": ShiftProfile(),
    "shifted": ShiftProfile(2, 5.0, 1.3, 0.1, 0.05),
    "depth": ShiftProfile(2, 5.0, 0.0, 0.0, 0.0),
    "rgb": ShiftProfile(0, 0.0, 1.3, 0.1, 0.05),
}


def get_profile(name: str) -> ShiftProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; known profiles: {', '.join(sorted(PROFILES))}") from None


@dataclass(frozen=True)
class SceneConfig:
    height: int = 48
    width: int = 48
    n_objects: tuple[int, int] = (2, 4)
    table_depth_mm: tuple[float, float] = (900.0, 1000.0)
    table_tilt_mm: float = 12.0
    object_height_mm: tuple[float, float] = (30.0, 120.0)
    object_size_frac: tuple[float, float] = (0.12, 0.25)
    min_area_px: int = 30
    table_color: tuple[float, float, float] | None = (0.55, 0.50, 0.42)   # None: random per scene

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ValueError("scene height and width must be >= 32")
        lo, hi = self.n_objects
        if not 1 <= lo <= hi <= 10:
            raise ValueError("n_objects range must lie within [1, 10]")
        if self.object_height_mm[0] <= 0:
            raise ValueError("object heights must be positive")
        if self.min_area_px < 1 or self.min_area_px * hi > 0.5 * self.height * self.width:
            raise ValueError("min_area_px incompatible with image size and object count")


@dataclass
class SceneSample:
    rgb: np.ndarray        # [3,H,W] in [0,1]
    depth: np.ndarray      # [1,H,W] millimetres
    labels: np.ndarray     # [H,W] 0 = table, 1..n objects
    meta: dict = field(default_factory=dict)
    table: np.ndarray | None = None   # clean table plane, [H,W] mm


def _shape_mask(kind: str, H: int, W: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "rect":
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    # isoceles triangle pointing along -v
    t = (v + ry) / (2 * ry)
    return (t >= 0) & (t <= 1) & (np.abs(u) <= rx * t)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour carrying a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    b[1:] |= labels[1:] != labels[:-1]
    b[:-1] |= labels[:-1] != labels[1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return b


def _place_objects(rng: np.random.Generator, cfg: SceneConfig, count: int):
    H, W = cfg.height, cfg.width
    labels = np.zeros((H, W), dtype=np.int64)
    objects = []
    size_scale = 1.0
    while len(objects) < count:
        placed = False
        for _ in range(100):
            kind = ("rect", "ellipse", "triangle")[rng.integers(3)]
            lo, hi = cfg.object_size_frac
            ry = rng.uniform(lo, hi) * min(H, W) * size_scale
            rx = rng.uniform(lo, hi) * min(H, W) * size_scale
            r = max(ry, rx) * (1.42 if kind == "rect" else 1.0)
            cy = rng.uniform(1 + r, H - 2 - r) if H - 3 - 2 * r > 0 else H / 2
            cx = rng.uniform(1 + r, W - 2 - r) if W - 3 - 2 * r > 0 else W / 2
            angle = rng.uniform(0, np.pi)
            m = _shape_mask(kind, H, W, cy, cx, ry, rx, angle)
            # keep a one-pixel table margin along the image border
            m[0], m[-1], m[:, 0], m[:, -1] = False, False, False, False
            if m.sum() < cfg.min_area_px:
                continue
            trial = labels.copy()
            trial[m] = len(objects) + 1
            areas = np.bincount(trial.reshape(-1), minlength=len(objects) + 2)[1:]
            if areas.min() < cfg.min_area_px:
                continue
            labels = trial
            objects.append({"kind": kind, "height_mm": round(float(rng.uniform(*cfg.object_height_mm)) * 256) / 256,
                            "color": hsv_to_rgb([rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.45, 1.0)])})
            placed = True
            break
        if not placed:
            size_scale *= 0.8
            if size_scale < 0.2:
                raise ValueError(f"cannot place {count} objects in a {H}x{W} scene")
    return labels, objects


def _corrupt(rng: np.random.Generator, rgb: np.ndarray, depth: np.ndarray, labels: np.ndarray,
             p: ShiftProfile) -> tuple[np.ndarray, np.ndarray]:
    H, W = labels.shape
    depth = depth.copy()
    if p.depth_boundary_jitter_px > 0:
        r = p.depth_boundary_jitter_px
        ys, xs = np.nonzero(boundary_mask(labels))
        oy = rng.integers(-r, r + 1, size=ys.size)
        ox = rng.integers(-r, r + 1, size=xs.size)
        src = depth.copy()
        depth[ys, xs] = src[np.clip(ys + oy, 0, H - 1), np.clip(xs + ox, 0, W - 1)]
    if p.depth_noise_std_mm > 0:
        depth = depth + rng.normal(0.0, p.depth_noise_std_mm, size=depth.shape)
    depth = np.maximum(depth, 0.0)

    rgb = rgb.copy()
    if p.illumination_gain > 0:
        rgb = rgb * p.illumination_gain
    rgb = np.clip(rgb, 0.0, 1.0)
    if p.hue_shift > 0:
        hsv = rgb_to_hsv(rgb)
        hsv[..., 0] = (hsv[..., 0] + p.hue_shift) % 1.0
        rgb = hsv_to_rgb(hsv)
    if p.texture_noise_std > 0:
        rgb = rgb + rng.normal(0.0, p.texture_noise_std, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0), depth


def gen_scene(seed: int, H: int = 48, W: int = 48, n_objects_range: tuple[int, int] = (2, 4),
              profile: ShiftProfile | str = "none", config: SceneConfig | None = None) -> SceneSample:
    """Render one scene; identical ``(seed, config, profile)`` give identical output."""
    if isinstance(profile, str):
        name, profile = profile, get_profile(profile)
    else:
        name = next((k for k, v in PROFILES.items() if v == profile), "custom")
    cfg = config or SceneConfig(height=H, width=W, n_objects=tuple(n_objects_range))
    cfg.validate()
    H, W = cfg.height, cfg.width
    geo_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(geo_ss)

    count = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    base = rng.uniform(*cfg.table_depth_mm)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ramp = (np.cos(theta) * (yy / (H - 1) - 0.5) + np.sin(theta) * (xx / (W - 1) - 0.5))
    # depths live on a 1/256 mm grid so object steps subtract exactly
    table = np.round((base + cfg.table_tilt_mm * ramp) * 256) / 256

    table_hsv = [rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.35, 0.75)]
    table_color = hsv_to_rgb(table_hsv) if cfg.table_color is None else np.asarray(cfg.table_color)
    phi = rng.uniform(0, 2 * np.pi)
    light = 0.925 + 0.075 * (np.cos(phi) * (2 * yy / (H - 1) - 1) + np.sin(phi) * (2 * xx / (W - 1) - 1)) / np.sqrt(2)

    labels, objects = _place_objects(rng, cfg, count)
    depth = table.copy()
    img = np.broadcast_to(table_color, (H, W, 3)).copy()
    for i, ob in enumerate(objects, start=1):
        m = labels == i
        depth[m] = table[m] - ob["height_mm"]
        img[m] = ob["color"]
    img *= light[..., None]

    rgb, depth = _corrupt(np.random.default_rng(noise_ss), img, depth, labels, profile)
    meta = {"seed": int(seed), "n_objects": len(objects), "profile": name,
            "heights_mm": [ob["height_mm"] for ob in objects]}
    return SceneSample(rgb.transpose(2, 0, 1).copy(), depth[None], labels, meta, table)


def gen_dataset(config: SceneConfig, count: int, out_dir, profile: str = "none", seed: int = 0) -> dict:
    """Write ``count`` scenes as ``NNNN_rgb.ppm``, ``NNNN_depth.pgm``, ``NNNN_labels.pgm`` plus ``manifest.json``."""
    shift = get_profile(profile)
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(count):
        s = seed + i
        sc = gen_scene(s, profile=shift, config=config)
        stem = f"{i:04d}"
        files = {"rgb": f"{stem}_rgb.ppm", "depth": f"{stem}_depth.pgm", "labels": f"{stem}_labels.pgm"}
        write_ppm(out / files["rgb"], np.round(sc.rgb.transpose(1, 2, 0) * 255).astype(np.uint8))
        write_pgm16(out / files["depth"], np.clip(np.round(sc.depth[0]), 0, 65535).astype(np.uint16))
        write_pgm16(out / files["labels"], sc.labels.astype(np.uint16))
        samples.append({"index": i, "seed": s, "n_objects": sc.meta["n_objects"], **files})
    manifest = {
        "format": 1,
        "profile": profile,
        "shift": asdict(shift),
        "scene": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        "seed": seed,
        "count": count,
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
