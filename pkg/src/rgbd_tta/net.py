"""Two-stream RGB-D pixel-embedding network at toy scale.

Each stream is a small conv/BN/ReLU stack; the stream outputs are bilinearly
upsampled back to input resolution and fused by elementwise addition. All three
maps (fused, RGB-only, depth-only) are unit-normalised per pixel.

Weights file layout (little-endian)::

    b"FTEA" | version u32 | count u32 |
    per tensor: name_len u16, utf-8 name, rank u8, dims u32 * rank, float32 data
"""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import graph as G

STREAMS = ("rgb", "depth")
STREAM_CHANNELS = {"rgb": 3, "depth": 1}
BN_ROLES = ("gamma", "beta", "run_mean", "run_var")
CONV_ROLES = ("kernel", "bias")

MAGIC = b"FTEA"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


class MissingWeightError(KeyError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    bn: bool = True
    relu: bool = True


def _default_stream(embed_dim: int) -> tuple[LayerSpec, ...]:
    return (LayerSpec(16, 3, 1, True, True),
            LayerSpec(32, 3, 2, True, True),
            LayerSpec(embed_dim, 3, 1, True, False))


@dataclass(frozen=True)
class NetworkSpec:
    height: int = 48
    width: int = 48
    embed_dim: int = 8
    rgb_layers: tuple[LayerSpec, ...] = ()
    depth_layers: tuple[LayerSpec, ...] = ()
    fusion: str = "add"

    def __post_init__(self):
        if not self.rgb_layers:
            object.__setattr__(self, "rgb_layers", _default_stream(self.embed_dim))
        if not self.depth_layers:
            object.__setattr__(self, "depth_layers", _default_stream(self.embed_dim))
        self.validate()

    def layers(self, stream: str) -> tuple[LayerSpec, ...]:
        return self.rgb_layers if stream == "rgb" else self.depth_layers

    def downsample(self, stream: str) -> int:
        return int(np.prod([l.stride for l in self.layers(stream)]))

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.fusion != "add":
            raise ValueError(f"unsupported fusion mode {self.fusion!r}")
        for s in STREAMS:
            layers = self.layers(s)
            if layers[-1].out_channels != self.embed_dim:
                raise ValueError(f"{s} stream must end with {self.embed_dim} channels")
            for l in layers:
                if l.kernel % 2 == 0 or l.stride < 1 or l.out_channels < 1:
                    raise ValueError(f"bad layer {l}")
            f = self.downsample(s)
            if self.height % f or self.width % f:
                raise ValueError(f"{s} stream downsample {f} must divide {self.height}x{self.width}")

    @classmethod
    def toy(cls, height: int = 8, width: int = 8, embed_dim: int = 4, widths: tuple[int, int] = (6, 8)):
        """Narrow variant used for finite-difference checks."""
        stream = (LayerSpec(widths[0], 3, 1, True, True),
                  LayerSpec(widths[1], 3, 2, True, True),
                  LayerSpec(embed_dim, 3, 1, True, False))
        return cls(height, width, embed_dim, stream, stream)


@dataclass
class BNLayerState:
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.5

    def __post_init__(self):
        C = self.gamma.shape
        if not (self.beta.shape == self.run_mean.shape == self.run_var.shape == C):
            raise ValueError("BN state vectors must share the channel count")
        if np.any(self.run_var < 0):
            raise ValueError("run_var must be non-negative")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")


def update_bn_stats(state: BNLayerState, batch_mean, batch_var) -> BNLayerState:
    """Blend batch statistics into the running ones.

    ``momentum`` is the weight of the new batch statistic:
    ``run <- (1 - m) * run + m * batch``.
    """
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    batch_var = np.asarray(batch_var, dtype=np.float64)
    if batch_mean.shape != state.run_mean.shape or batch_var.shape != state.run_var.shape:
        raise ValueError("batch statistics do not match the layer's channel count")
    if np.any(batch_var < 0):
        raise ValueError("batch variance must be non-negative")
    m = state.momentum
    return replace(state,
                   run_mean=(1 - m) * state.run_mean + m * batch_mean,
                   run_var=(1 - m) * state.run_var + m * batch_var)


@dataclass
class PixelEmbeddingMap:
    fused: G.Node
    rgb_only: G.Node
    depth_only: G.Node
    degenerate: np.ndarray                      # [H,W] bool, pixels whose fused norm vanished
    batch_stats: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.fused.shape


def param_names(spec: NetworkSpec) -> list[str]:
    names = []
    for s in STREAMS:
        for i, l in enumerate(spec.layers(s)):
            names += [f"{s}.{i}.{r}" for r in CONV_ROLES]
            if l.bn:
                names += [f"{s}.{i}.{r}" for r in BN_ROLES]
    return names


def bn_affine_names(spec: NetworkSpec, streams: Iterable[str] = STREAMS) -> list[str]:
    return [f"{s}.{i}.{r}" for s in streams for i, l in enumerate(spec.layers(s)) if l.bn
            for r in ("gamma", "beta")]


def conv_names(spec: NetworkSpec) -> list[str]:
    return [n for n in param_names(spec) if n.rsplit(".", 1)[1] in CONV_ROLES]


def init_weights(spec: NetworkSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases, identity BN. Values are float32-representable."""
    rng = np.random.default_rng(seed)
    store = {}
    for s in STREAMS:
        cin = STREAM_CHANNELS[s]
        for i, l in enumerate(spec.layers(s)):
            fan_in = cin * l.kernel * l.kernel
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(l.out_channels, cin, l.kernel, l.kernel))
            store[f"{s}.{i}.kernel"] = k.astype(np.float32).astype(np.float64)
            store[f"{s}.{i}.bias"] = np.zeros(l.out_channels)
            if l.bn:
                store[f"{s}.{i}.gamma"] = np.ones(l.out_channels)
                store[f"{s}.{i}.beta"] = np.zeros(l.out_channels)
                store[f"{s}.{i}.run_mean"] = np.zeros(l.out_channels)
                store[f"{s}.{i}.run_var"] = np.ones(l.out_channels)
            cin = l.out_channels
    return store


class EmbedNet:
    """Holds a NetworkSpec and its weights; runs the two-stream forward pass."""

    def __init__(self, spec: NetworkSpec, weights: dict[str, np.ndarray] | None = None,
                 eps: float = 1e-5, momentum: float = 0.5, seed: int = 0):
        self.spec = spec
        self.eps = eps
        self.momentum = momentum
        if weights is None:
            weights = init_weights(spec, seed)
        self.weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
        self._check_weights()

    def _check_weights(self) -> None:
        expected = init_weights(self.spec, 0)
        for name, ref in expected.items():
            if name not in self.weights:
                raise MissingWeightError(f"missing weight tensor {name!r}")
            if self.weights[name].shape != ref.shape:
                raise WeightsFormatError(f"{name}: shape {self.weights[name].shape}, expected {ref.shape}")

    def copy(self) -> "EmbedNet":
        return copy.deepcopy(self)

    def bn_state(self, stream: str, layer: int) -> BNLayerState:
        p = f"{stream}.{layer}."
        w = self.weights
        return BNLayerState(w[p + "gamma"], w[p + "beta"], w[p + "run_mean"], w[p + "run_var"],
                            self.eps, self.momentum)

    def apply_batch_stats(self, batch_stats: dict) -> None:
        for prefix, (mu, var) in batch_stats.items():
            stream, layer = prefix.split(".")
            new = update_bn_stats(self.bn_state(stream, int(layer)), mu, var)
            self.weights[prefix + ".run_mean"] = new.run_mean
            self.weights[prefix + ".run_var"] = new.run_var

    def _stream(self, stream: str, x: G.Node, mode: str, trainable: set, stats: dict) -> G.Node:
        w = self.weights

        def param(name):
            if name in trainable:
                return G.leaf(w[name], name)
            return G.Node(w[name], op="leaf", name=name)

        for i, l in enumerate(self.spec.layers(stream)):
            p = f"{stream}.{i}."
            x = G.conv2d(x, param(p + "kernel"), param(p + "bias"), stride=l.stride, pad=l.kernel // 2)
            if l.bn:
                x, mu, var = G.batchnorm(x, param(p + "gamma"), param(p + "beta"),
                                         w[p + "run_mean"], w[p + "run_var"], self.eps, mode)
                if mu is not None:
                    stats[p[:-1]] = (mu, var)
            if l.relu:
                x = G.relu(x)
        return G.bilinear_upsample(x, self.spec.downsample(stream))

    def forward(self, rgb, depth, mode: str = "eval", trainable: Iterable[str] = (),
                stream_modes: dict[str, str] | None = None, update_stats: bool = True) -> PixelEmbeddingMap:
        """Run both streams.

        ``mode`` applies to every BN layer unless ``stream_modes`` overrides it
        per stream. Train-mode batch statistics are folded into the running
        statistics when ``update_stats`` is set; they are also returned in
        ``batch_stats`` so callers can defer that.
        """
        H, W = self.spec.height, self.spec.width
        rgb = np.asarray(rgb, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        if rgb.shape != (3, H, W):
            raise G.ShapeError("forward", "rgb", (3, H, W), rgb.shape)
        if depth.shape != (1, H, W):
            raise G.ShapeError("forward", "depth", (1, H, W), depth.shape)
        modes = {s: mode for s in STREAMS}
        modes.update(stream_modes or {})
        trainable = set(trainable)
        stats: dict = {}
        raw = {s: self._stream(s, G.const(x), modes[s], trainable, stats)
               for s, x in (("rgb", rgb), ("depth", depth))}
        fused_raw = G.add(raw["rgb"], raw["depth"])
        norm = np.sqrt((fused_raw.value ** 2).sum(axis=0))
        maps = PixelEmbeddingMap(
            fused=G.l2_normalize(fused_raw, axis=0),
            rgb_only=G.l2_normalize(raw["rgb"], axis=0),
            depth_only=G.l2_normalize(raw["depth"], axis=0),
            degenerate=norm <= 1e-12,
            batch_stats=stats,
        )
        if update_stats and stats:
            self.apply_batch_stats(stats)
        return maps

    def embed(self, rgb, depth) -> np.ndarray:
        """Eval-mode fused embedding as a plain array."""
        return self.forward(rgb, depth, "eval").fused.value


def conv_digest(weights: dict[str, np.ndarray]) -> str:
    """SHA-256 over every conv kernel and bias, used to verify the freeze contract."""
    h = hashlib.sha256()
    for name in sorted(weights):
        if name.rsplit(".", 1)[1] in CONV_ROLES:
            h.update(name.encode())
            h.update(np.ascontiguousarray(weights[name], dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# weights file

def write_tensors(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(items)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def save_weights(store: dict[str, np.ndarray], path) -> None:
    write_tensors(path, sorted(store.items()))


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightsFormatError("bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError("truncated file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    store: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float64)
        if name in store:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        store[name] = arr
    if pos != len(data):
        raise WeightsFormatError("trailing bytes after last tensor")
    return store
