"""Reading generated datasets back from disk."""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_netpbm

DEPTH_SCALE_MM = 1000.0

_labels_forbidden = False


@contextlib.contextmanager
def forbid_labels():
    """Within this block any attempt to read a label file is an assertion failure."""
    global _labels_forbidden
    prev, _labels_forbidden = _labels_forbidden, True
    try:
        yield
    finally:
        _labels_forbidden = prev


@dataclass
class Frame:
    name: str
    rgb: np.ndarray                  # [3,H,W] in [0,1]
    depth: np.ndarray                # [1,H,W] millimetres
    labels: np.ndarray | None = None


def network_inputs(rgb: np.ndarray, depth_mm: np.ndarray, depth_scale: float = DEPTH_SCALE_MM):
    return np.asarray(rgb, dtype=np.float64), np.asarray(depth_mm, dtype=np.float64) / depth_scale


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text())


def read_labels(path) -> np.ndarray:
    assert not _labels_forbidden, f"label file access during unsupervised adaptation: {path}"
    return read_netpbm(path).astype(np.int64)


def load_dataset(data_dir, labels: bool = True) -> list[Frame]:
    root = Path(data_dir)
    manifest = read_manifest(root)
    frames = []
    for s in manifest["samples"]:
        rgb = read_netpbm(root / s["rgb"]).astype(np.float64).transpose(2, 0, 1) / 255.0
        depth = read_netpbm(root / s["depth"]).astype(np.float64)[None]
        lab = read_labels(root / s["labels"]) if labels else None
        frames.append(Frame(s["rgb"].rsplit("_", 1)[0], rgb, depth, lab))
    return frames
