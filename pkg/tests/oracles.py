"""Independent checks shared by the unit suite and the acceptance gate."""
import numpy as np

from rgbd_tta import graph as G
from rgbd_tta.clustering import cluster_embeddings
from rgbd_tta.net import EmbedNet, NetworkSpec, PixelEmbeddingMap, bn_affine_names
from rgbd_tta.objectives import LossConfig, ckd_loss, neo_loss, student_centroids, total_loss

from conftest import central_diff


def conv_loops(x, k, b, stride, pad):
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o] if b is not None else 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            y, xx = i * stride + u - pad, j * stride + v - pad
                            if 0 <= y < H and 0 <= xx < W:
                                acc += x[c, y, xx] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def toy_problem(seed=0):
    """8x8 two-stream net with C=4 plus a random RGB-D frame."""
    spec = NetworkSpec.toy(8, 8, 4)
    net = EmbedNet(spec, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # perturb BN affine params away from identity so every path is exercised
    for name in bn_affine_names(spec):
        base = 1.0 if name.endswith("gamma") else 0.0
        net.weights[name] = base + 0.3 * rng.normal(size=net.weights[name].shape)
    rgb = rng.uniform(size=(3, 8, 8))
    depth = rng.uniform(0.8, 1.0, size=(1, 8, 8))
    return net, rgb, depth


def bn_gradient_errors(seed=0, h=1e-5):
    """Max relative error of analytic vs central-difference gradients of NEO, CKD and total
    loss w.r.t. every BN gamma/beta.

    Cluster, sampled pixels, student centroids and the teacher's fused map are
    held at their unperturbed values, matching what the losses detach.
    """
    net, rgb, depth = toy_problem(seed)
    names = bn_affine_names(net.spec)
    cfg = LossConfig(k=2, T=1.0)
    maps = net.forward(rgb, depth, "train", trainable=names, update_stats=False)
    cluster = cluster_embeddings(maps.fused.value)
    assert cluster.n >= 2, "toy problem should produce several clusters"
    px = np.flatnonzero(cluster.assignments.reshape(-1) >= 0)
    cents = student_centroids(maps, cluster)

    teacher = G.const(maps.fused.value)

    def build(m):
        neo = neo_loss(m.fused, cluster, cfg, pixels=px)
        students = PixelEmbeddingMap(teacher, m.rgb_only, m.depth_only, m.degenerate)
        ckd = ckd_loss(students, cluster, cfg, pixels=px, centroids=cents)
        return {"neo": neo, "ckd": ckd, "total": total_loss(neo, ckd, cfg)}

    errors = {}
    for which in ("neo", "ckd", "total"):
        grads = G.backward(build(net.forward(rgb, depth, "train", trainable=names, update_stats=False))[which])
        worst = 0.0
        for name in names:
            def f(x, name=name):
                old = net.weights[name]
                net.weights[name] = x
                try:
                    m = net.forward(rgb, depth, "train", update_stats=False)
                    return float(build(m)[which].value)
                finally:
                    net.weights[name] = old
            num = central_diff(f, net.weights[name].copy(), h)
            ana = grads[name]
            worst = max(worst, float(np.max(np.abs(ana - num) / np.maximum(1.0, np.abs(ana)))))
        errors[which] = worst
    return errors, len(names)
