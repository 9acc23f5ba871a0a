import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from rgbd_tta.dataset import forbid_labels, load_dataset, read_manifest
from rgbd_tta.imageio import read_netpbm
from rgbd_tta.scenegen import (
    PROFILES,
    SceneConfig,
    ShiftProfile,
    boundary_mask,
    gen_dataset,
    gen_scene,
    get_profile,
)

CFG = SceneConfig()


def _digest(path):
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_profiles():
    assert PROFILES["none"] == ShiftProfile()
    assert PROFILES["shifted"] == ShiftProfile(2, 5.0, 1.3, 0.1, 0.05)
    with pytest.raises(ValueError):
        ShiftProfile(depth_noise_std_mm=-1)


def test_unknown_profile_lists_known():
    with pytest.raises(KeyError, match="shifted"):
        get_profile("foggy")


@pytest.mark.parametrize("kw", [dict(height=16), dict(width=31), dict(n_objects=(0, 3)), dict(n_objects=(2, 11)),
                                dict(n_objects=(4, 2)), dict(min_area_px=500)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw).validate()


@pytest.mark.parametrize("profile", ["none", "shifted"])
def test_deterministic(profile):
    a, b = gen_scene(11, profile=profile, config=CFG), gen_scene(11, profile=profile, config=CFG)
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_shapes_and_ranges():
    s = gen_scene(0, profile="shifted", config=CFG)
    assert s.rgb.shape == (3, 48, 48) and s.depth.shape == (1, 48, 48) and s.labels.shape == (48, 48)
    assert s.rgb.min() >= 0 and s.rgb.max() <= 1
    assert s.meta["profile"] == "shifted" and s.meta["seed"] == 0


def test_signature_arguments():
    s = gen_scene(5, 40, 56, (1, 1))
    assert s.labels.shape == (40, 56) and s.labels.max() == 1


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_scene_invariants(seed):
    s = gen_scene(seed, config=CFG)
    ids = np.unique(s.labels)
    n = s.meta["n_objects"]
    assert n >= 1 and ids.tolist() == list(range(n + 1))
    areas = np.bincount(s.labels.ravel())[1:]
    assert areas.min() >= CFG.min_area_px
    obj = s.labels > 0
    assert np.all(s.depth[0][obj] < s.table[obj])
    np.testing.assert_array_equal(s.depth[0][~obj], s.table[~obj])


def test_depth_step_equals_object_height():
    s = gen_scene(3, config=CFG)
    for i, h in enumerate(s.meta["heights_mm"], start=1):
        m = s.labels == i
        edge = m & boundary_mask(s.labels)
        assert edge.any()
        assert np.all(s.table[edge] - s.depth[0][edge] == h)


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.sampled_from(sorted(PROFILES)))
def test_labels_invariant_under_profiles(seed, profile):
    clean = gen_scene(seed, config=CFG)
    assert np.array_equal(gen_scene(seed, profile=profile, config=CFG).labels, clean.labels)


def test_depth_noise_std():
    cfg = SceneConfig(height=128, width=128)
    p = ShiftProfile(depth_noise_std_mm=5.0)
    clean, noisy = gen_scene(7, profile="none", config=cfg), gen_scene(7, profile=p, config=cfg)
    diff = (noisy.depth - clean.depth).ravel()
    assert diff.size >= 10_000
    assert abs(diff.std() - 5.0) < 0.5


def test_rgb_only_profile_keeps_depth():
    a, b = gen_scene(2, config=CFG), gen_scene(2, profile="rgb", config=CFG)
    assert a.depth.tobytes() == b.depth.tobytes()
    assert not np.array_equal(a.rgb, b.rgb)


def test_jitter_only_touches_boundaries():
    a = gen_scene(4, config=CFG)
    b = gen_scene(4, profile=ShiftProfile(depth_boundary_jitter_px=2), config=CFG)
    changed = a.depth[0] != b.depth[0]
    assert changed.any()
    assert not (changed & ~boundary_mask(a.labels)).any()


@pytest.mark.parametrize("seed", range(8))
def test_shift_is_measurable(seed):
    """Per-scene depth histograms of the clean and shifted renders differ."""
    clean = gen_scene(seed, config=CFG).depth.ravel()
    shifted = gen_scene(seed, profile="shifted", config=CFG).depth.ravel()
    assert ks_2samp(clean, shifted).statistic > 0.05


def test_unplaceable_config_errors():
    # objects this small can never reach the minimum area, even after shrinking retries
    cfg = SceneConfig(height=32, width=32, n_objects=(3, 3), object_size_frac=(0.01, 0.02), min_area_px=30)
    with pytest.raises(ValueError):
        gen_scene(0, config=cfg)


# --- datasets -------------------------------------------------------------

def test_dataset_files_and_manifest(tmp_path):
    m = gen_dataset(CFG, 3, tmp_path, profile="shifted", seed=100)
    files = [s[k] for s in m["samples"] for k in ("rgb", "depth", "labels")]
    assert len(files) == 9 and all((tmp_path / f).exists() for f in files)
    assert read_manifest(tmp_path) == json.loads(json.dumps(m))
    assert [s["seed"] for s in m["samples"]] == [100, 101, 102]
    assert m["profile"] == "shifted"


def test_dataset_empty(tmp_path):
    m = gen_dataset(CFG, 0, tmp_path)
    assert m["samples"] == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]


def test_dataset_reproducible(tmp_path):
    gen_dataset(CFG, 2, tmp_path / "a", profile="shifted", seed=5)
    gen_dataset(CFG, 2, tmp_path / "b", profile="shifted", seed=5)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_dataset_round_trip(tmp_path):
    gen_dataset(CFG, 2, tmp_path, seed=9)
    frames = load_dataset(tmp_path)
    s = gen_scene(9, config=CFG)
    np.testing.assert_array_equal(frames[0].labels, s.labels)
    np.testing.assert_array_equal(frames[0].depth, np.round(s.depth))
    np.testing.assert_allclose(frames[0].rgb, s.rgb, atol=0.5 / 255 + 1e-12)
    assert read_netpbm(tmp_path / "0000_depth.pgm").dtype == np.uint16


def test_forbidden_labels(tmp_path):
    gen_dataset(CFG, 1, tmp_path)
    with forbid_labels():
        assert load_dataset(tmp_path, labels=False)[0].labels is None
        with pytest.raises(AssertionError, match="label"):
            load_dataset(tmp_path)
    assert load_dataset(tmp_path)[0].labels is not None
