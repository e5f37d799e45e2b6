from pathlib import Path

import numpy as np
import pytest

from focusclf.data import Patch
from focusclf.errors import FormatError, InputError, StateError
from focusclf.io import LesionRecord, read_volume
from focusclf.model import Checkpoint, ModelConfig, build_model, conv_stack, forward
from focusclf.rng import Rng
from focusclf.saliency import (
    CamConfig,
    CamMap,
    build_cam_head,
    c4_maps,
    compute_cam,
    export_overlay,
    export_raw,
    finetune_cam,
    global_max_pool,
    head_forward,
    head_logits,
    overlay_pixels,
    upsample_bilinear,
)

FIXTURES = Path(__file__).parent / "fixtures"


def batch(n, size=32, seed=0):
    return Rng(seed).uniform(n * size * size * 3).reshape(n, size, size, 3).astype(np.float32)


def labelled_patches(n=24, seed=1):
    """Patches whose malignant half carries a bright square in channel 2."""
    x = batch(n, seed=seed) * 0.3
    patches = []
    for i in range(n):
        label = "malignant" if i % 2 else "benign"
        if label == "malignant":
            x[i, 12:20, 12:20, 2] += 0.7
        rec = LesionRecord(f"P{i}", f"P{i}-L0", "PZ", label, (0, 16, 16), {})
        patches.append(Patch(("T2W", "ADC", "DWI_b50"), x[i], rec))
    return patches


class TestHead:
    def test_pooled_length(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        assert head.V.shape == (64, 2)
        assert global_max_pool(c4_maps(head, batch(2))).shape == (2, 64)

    def test_global_max_of_constant(self):
        maps = np.full((1, 5, 5, 3), 2.5)
        assert np.array_equal(global_max_pool(maps), [[2.5, 2.5, 2.5]])

    def test_requires_c4(self, tiny_ckpt):
        weights = {k: v for k, v in tiny_ckpt.params.weights.items() if not k.startswith("c4")}
        broken = Checkpoint(tiny_ckpt.config, type(tiny_ckpt.params)(tiny_ckpt.config, weights, tiny_ckpt.params.stats))
        with pytest.raises(FormatError):
            build_cam_head(broken)

    def test_requires_statistics(self):
        cfg = ModelConfig()
        with pytest.raises(StateError):
            build_cam_head(Checkpoint(cfg, build_model(cfg, Rng(0))))

    def test_seeded_initialisation(self, tiny_ckpt):
        assert np.array_equal(build_cam_head(tiny_ckpt).V, build_cam_head(tiny_ckpt).V)


class TestFinetune:
    def test_frozen_conv_stack_untouched(self, tiny_ckpt):
        before = {k: v.copy() for k, v in tiny_ckpt.params.weights.items()}
        maps_before = c4_maps(build_cam_head(tiny_ckpt), batch(2))
        head = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(), CamConfig(epochs=5))
        for k, v in before.items():
            assert np.array_equal(head.params.weights[k], v)
        assert np.array_equal(c4_maps(head, batch(2)), maps_before)

    def test_zero_epochs_keeps_v(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        tuned = finetune_cam(head, labelled_patches(), CamConfig(epochs=0))
        assert np.array_equal(tuned.V, head.V)

    def test_deterministic(self, tiny_ckpt):
        a = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(), CamConfig(epochs=10))
        b = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(), CamConfig(epochs=10))
        assert np.array_equal(a.V, b.V) and np.array_equal(a.bias, b.bias)

    def test_separable_features_fit(self, tiny_ckpt):
        head = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(40), CamConfig(epochs=300, lr=0.05))
        assert head.log["train_accuracy"] >= 0.95

    def test_convergence_stop(self, tiny_ckpt):
        head = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(), CamConfig(epochs=5000, lr=0.05))
        losses = head.log["losses"]
        assert len(losses) < 5000
        assert abs(losses[-1] - losses[-6]) < 1e-4

    def test_full_finetune_leaves_source_alone(self, tiny_ckpt):
        before = tiny_ckpt.params.weights["c1.w"].copy()
        head = finetune_cam(build_cam_head(tiny_ckpt), labelled_patches(8), CamConfig(epochs=1, frozen=False))
        assert np.array_equal(tiny_ckpt.params.weights["c1.w"], before)
        assert not np.array_equal(head.params.weights["c1.w"], before)


class TestCam:
    def test_raw_map_is_weighted_sum(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        x = batch(1, seed=4)
        cam = compute_cam(head, x[0], cls=1)
        maps = c4_maps(head, x)[0].astype(np.float64)
        oracle = np.zeros(maps.shape[:2])
        for k in range(maps.shape[-1]):
            oracle += head.V[k, 1] * maps[..., k]
        assert cam.raw.shape == (16, 16)
        assert np.max(np.abs(cam.raw - oracle)) <= 1e-6

    def test_zero_weights_zero_map(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        head.V[:] = 0
        cam = compute_cam(head, batch(1)[0])
        assert not cam.raw.any() and not cam.normalized.any()

    def test_single_weight_selects_map(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        head.V[:] = 0
        head.V[7, 0] = 1
        x = batch(1, seed=5)
        assert np.array_equal(compute_cam(head, x[0], cls=0).raw, c4_maps(head, x)[0, ..., 7].astype(np.float64))

    def test_linearity(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        x = batch(1, seed=6)[0]
        base = compute_cam(head, x).raw
        head.V *= -2.5
        assert np.allclose(compute_cam(head, x).raw, -2.5 * base, atol=1e-6)

    def test_fully_convolutional_matches_forward(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        x = batch(3, seed=7)
        _, acts, _ = forward(tiny_ckpt.params, x, train=False)
        assert np.array_equal(c4_maps(head, x), acts["C4"])

    def test_larger_patch(self, tiny_ckpt):
        cam = compute_cam(build_cam_head(tiny_ckpt), batch(1, size=64)[0])
        assert cam.raw.shape == (32, 32) and cam.upsampled.shape == (64, 64)
        assert cam.normalized.min() == 0.0 and cam.normalized.max() == 1.0
        lo, hi = cam.value_range
        assert np.allclose(cam.normalized * (hi - lo) + lo, cam.upsampled)

    def test_too_small_patch(self, tiny_ckpt):
        with pytest.raises(InputError):
            compute_cam(build_cam_head(tiny_ckpt), batch(1, size=16)[0])

    def test_head_logits_match_truncated_forward(self, tiny_ckpt):
        head = build_cam_head(tiny_ckpt)
        head.bias[:] = [0.3, -0.1]
        x = batch(4, seed=8)
        pooled = global_max_pool(conv_stack(tiny_ckpt.params, x, train=False)[0])
        assert np.allclose(head_logits(head, pooled), head_forward(head, x), atol=1e-6)

    def test_upsample_constant_and_identity(self):
        assert np.allclose(upsample_bilinear(np.full((4, 4), 3.0), 12), 3.0)
        img = Rng(9).normal((8, 8))
        assert np.allclose(upsample_bilinear(img, 8), img)


class TestOverlay:
    def test_zero_cam_is_gray(self, tmp_path):
        base = Rng(1).uniform(36).reshape(6, 6)
        cam = CamMap(1, np.zeros((3, 3)), np.zeros((6, 6)), np.zeros((6, 6)), (0.0, 0.0))
        export_overlay(cam, base[..., None], tmp_path / "o.ppm")
        data = (tmp_path / "o.ppm").read_bytes()
        header = b"P6\n6 6\n255\n"
        assert data.startswith(header) and len(data) == len(header) + 6 * 6 * 3
        rgb = np.frombuffer(data[len(header):], np.uint8).reshape(6, 6, 3)
        assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])

    def test_golden_fixture(self, tmp_path):
        s = 6
        yy, xx = np.mgrid[0:s, 0:s]
        cam = ((yy * s + xx) % 7) / 6.0
        base = (xx + 2 * yy) / (3 * (s - 1))
        export_overlay(CamMap(1, cam, cam, cam, (0.0, 1.0)), base[..., None], tmp_path / "g.ppm")
        assert (tmp_path / "g.ppm").read_bytes() == (FIXTURES / "overlay_golden.ppm").read_bytes()

    def test_size_mismatch(self):
        with pytest.raises(InputError):
            overlay_pixels(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_raw_dump(self, tmp_path, tiny_ckpt):
        cam = compute_cam(build_cam_head(tiny_ckpt), batch(1)[0])
        export_raw(cam, tmp_path / "cam.mpv")
        vol = read_volume(tmp_path / "cam.mpv")
        assert vol.shape == (1, 32, 32) and np.allclose(vol[0], cam.upsampled, atol=1e-6)
