import numpy as np
import pytest

from dualstream import tensor as T
from dualstream.errors import (
    ContractError,
    CorruptionError,
    DimensionError,
    FormatError,
)
from dualstream.prior import (
    FeaturePyramid,
    PriorEncoderConfig,
    adaptive_avg_pool,
    build_frozen_encoder,
    export_features,
    extract_features,
    import_features,
    init_scale_projections,
    pyramid_to_tokens,
)
from dualstream.tensor import Tensor, backward


def small_cfg(seed=42):
    return PriorEncoderConfig(stage_channels=(4, 8, 8, 16), seed=seed)


class TestFrozenEncoder:
    def test_same_seed_bitwise_identical(self):
        e1 = build_frozen_encoder(small_cfg())
        e2 = build_frozen_encoder(small_cfg())
        for w1, w2 in zip(e1.weights, e2.weights):
            assert np.array_equal(w1, w2)

    def test_weights_read_only(self):
        enc = build_frozen_encoder(small_cfg())
        with pytest.raises(ValueError):
            enc.weights[0][0, 0] = 1.0

    def test_stage_spatial_halving(self):
        enc = build_frozen_encoder(small_cfg())
        imgs = np.random.default_rng(0).normal(size=(2, 3, 224, 224)).astype(np.float32)
        pyr = extract_features(enc, imgs)
        assert [s.shape[-1] for s in pyr.scales] == [112, 56, 28, 14]
        pyr.check_halving(224)

    def test_default_config_shapes(self):
        enc = build_frozen_encoder(PriorEncoderConfig(seed=1))
        imgs = np.zeros((1, 3, 224, 224), dtype=np.float32)
        pyr = extract_features(enc, imgs)
        assert [s.shape[1:] for s in pyr.scales] == [
            (32, 112, 112),
            (64, 56, 56),
            (128, 28, 28),
            (256, 14, 14),
        ]

    def test_zero_image_zero_pyramid(self):
        enc = build_frozen_encoder(small_cfg())
        pyr = extract_features(enc, np.zeros((1, 3, 32, 32), dtype=np.float32))
        for s in pyr.scales:
            np.testing.assert_array_equal(s, 0.0)

    def test_pure_function_of_input(self):
        enc = build_frozen_encoder(small_cfg())
        img = np.random.default_rng(1).normal(size=(1, 3, 32, 32)).astype(np.float32)
        batch = np.concatenate([img, img], axis=0)
        pyr = extract_features(enc, batch)
        for s in pyr.scales:
            np.testing.assert_array_equal(s[0], s[1])

    def test_bad_spatial_size(self):
        enc = build_frozen_encoder(small_cfg())
        with pytest.raises(DimensionError):
            extract_features(enc, np.zeros((1, 3, 30, 30), dtype=np.float32))

    def test_config_validation(self):
        with pytest.raises(ContractError):
            PriorEncoderConfig(stage_channels=(8, 8, 8)).validate()


class TestTokens:
    def test_pool_identity_when_grid_matches(self):
        scale = np.random.default_rng(0).normal(size=(2, 5, 7, 7)).astype(np.float32)
        pooled = adaptive_avg_pool(scale)
        want = scale.reshape(2, 5, 49).transpose(0, 2, 1)
        np.testing.assert_allclose(pooled, want, rtol=1e-6)

    def test_pool_block_mean(self):
        scale = np.arange(14 * 14, dtype=np.float64).reshape(1, 14, 14)
        pooled = adaptive_avg_pool(scale)
        assert pooled.shape == (49, 1)
        np.testing.assert_allclose(pooled[0, 0], np.mean([0, 1, 14, 15]))

    def test_pool_too_small(self):
        with pytest.raises(DimensionError):
            adaptive_avg_pool(np.zeros((3, 6, 6)))

    def test_token_count_196(self):
        enc = build_frozen_encoder(small_cfg())
        imgs = np.random.default_rng(2).normal(size=(2, 3, 224, 224)).astype(np.float32)
        pyr = extract_features(enc, imgs)
        proj = init_scale_projections(np.random.default_rng(0), pyr.channel_widths, 16)
        tokens = pyramid_to_tokens(pyr, proj)
        assert tokens.shape == (2, 196, 16)

    def test_constant_scale_identical_tokens(self):
        scales = [np.full((c, s, s), 0.5, dtype=np.float32) for c, s in
                  [(4, 112), (8, 56), (8, 28), (16, 14)]]
        pyr = FeaturePyramid(scales=scales)
        proj = init_scale_projections(np.random.default_rng(1), pyr.channel_widths, 8)
        tokens = pyramid_to_tokens(pyr, proj).data
        for scale_idx in range(4):
            group = tokens[scale_idx * 49:(scale_idx + 1) * 49]
            np.testing.assert_allclose(group, np.tile(group[0], (49, 1)), rtol=1e-5)

    def test_gradient_reaches_projections_not_encoder(self):
        enc = build_frozen_encoder(small_cfg())
        imgs = np.random.default_rng(3).normal(size=(1, 3, 112, 112)).astype(np.float32)
        pyr = extract_features(enc, imgs)
        proj = init_scale_projections(np.random.default_rng(4), pyr.channel_widths, 8)
        loss = pyramid_to_tokens(pyr, proj).sum()
        backward(loss)
        for w, b in proj:
            assert w.grad is not None and b.grad is not None
        # encoder weights are plain read-only numpy arrays: nothing trainable
        assert all(not isinstance(w, Tensor) for w in enc.weights)

    def test_projection_width_mismatch(self):
        pyr = FeaturePyramid(scales=[np.zeros((4, 8, 8), dtype=np.float32)] * 4)
        proj = init_scale_projections(np.random.default_rng(0), (5, 5, 5, 5), 8)
        with pytest.raises(DimensionError):
            pyramid_to_tokens(pyr, proj)


class TestFpyr:
    def _pyramid(self, seed=0):
        rng = np.random.default_rng(seed)
        return FeaturePyramid(
            scales=[
                rng.normal(size=(4, 16, 16)).astype(np.float32),
                rng.normal(size=(8, 8, 8)).astype(np.float32),
                rng.normal(size=(8, 7, 7)).astype(np.float32),
                rng.normal(size=(16, 7, 7)).astype(np.float32),
            ]
        )

    def test_roundtrip_bitwise(self, tmp_path):
        pyr = self._pyramid()
        path = str(tmp_path / "p.fpyr")
        export_features(pyr, path)
        back = import_features(path)
        for a, b in zip(pyr.scales, back.scales):
            assert a.tobytes() == b.tobytes()

    def test_truncated_file(self, tmp_path):
        pyr = self._pyramid()
        path = tmp_path / "p.fpyr"
        export_features(pyr, str(path))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CorruptionError):
            import_features(str(path))

    def test_trailing_garbage(self, tmp_path):
        pyr = self._pyramid()
        path = tmp_path / "p.fpyr"
        export_features(pyr, str(path))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CorruptionError):
            import_features(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "p.fpyr"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(FormatError):
            import_features(str(path))

    def test_wrong_version(self, tmp_path):
        pyr = self._pyramid()
        path = tmp_path / "p.fpyr"
        export_features(pyr, str(path))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            import_features(str(path))

    def test_imported_pyramid_feeds_tokens(self, tmp_path):
        pyr = self._pyramid(seed=5)
        path = str(tmp_path / "p.fpyr")
        export_features(pyr, path)
        back = import_features(path)
        proj = init_scale_projections(np.random.default_rng(6), back.channel_widths, 8)
        tokens = pyramid_to_tokens(back, proj)
        assert tokens.shape == (196, 8)
