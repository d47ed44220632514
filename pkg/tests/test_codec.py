import numpy as np
import pytest

from latentflow.codec import (
    DownsampleEncoder,
    FixedLinearEncoder,
    ModalitySpec,
    Normalizer,
    PixelEncoder,
    ShapeParamEncoder,
    fit_normalizer,
    normalize_modality,
    orthonormal_matrix,
    patchify,
    unpatchify,
)
from latentflow.errors import ConfigError, NormalizationError

RNG = np.random.default_rng(7)


def random_images(n=5, h=16, w=16, c=3):
    return RNG.uniform(-1, 1, size=(n, h, w, c))


class TestPixelPatchify:
    def test_shapes(self):
        grids = patchify(random_images(), 4)
        assert grids.shape == (5, 4, 4, 48)

    def test_constant_image(self):
        imgs = np.full((2, 16, 16, 3), 0.25)
        grids = patchify(imgs, 4)
        assert np.all(grids == 0.25)

    def test_roundtrip_bit_exact(self):
        imgs = random_images()
        back = unpatchify(patchify(imgs, 4), 4, 3)
        assert np.array_equal(back, imgs)

    def test_spatial_layout(self):
        # token (i, j) must contain exactly the patch at rows 4i.., cols 4j..
        imgs = np.zeros((1, 16, 16, 3))
        imgs[0, 4:8, 8:12, :] = 1.0
        grids = patchify(imgs, 4)
        assert np.all(grids[0, 1, 2] == 1.0)
        grids[0, 1, 2] = 0.0
        assert np.all(grids == 0.0)

    def test_indivisible_raises(self):
        with pytest.raises(ConfigError):
            patchify(random_images(h=15, w=16), 4)

    def test_encoder_decode(self):
        enc = PixelEncoder(patch=4)
        imgs = random_images()
        assert np.array_equal(enc.decode(enc.encode(imgs)), imgs)


class TestDownsample:
    def test_token_dim_at_patch4(self):
        enc = DownsampleEncoder(patch=4)
        assert enc.token_dim == 12
        grids = enc.encode(random_images())
        assert grids.shape == (5, 4, 4, 12)

    def test_constant_preserved(self):
        enc = DownsampleEncoder(patch=4)
        grids = enc.encode(np.full((2, 16, 16, 3), -0.5))
        assert np.allclose(grids, -0.5)

    def test_quarter_of_pixel_values(self):
        pix = PixelEncoder(patch=4)
        down = DownsampleEncoder(patch=4)
        imgs = random_images()
        assert pix.encode(imgs).shape[-1] == 4 * down.encode(imgs).shape[-1]

    def test_pooling_is_mean(self):
        imgs = np.zeros((1, 16, 16, 3))
        imgs[0, 0, 0, 0] = 1.0
        grids = DownsampleEncoder(patch=4).encode(imgs)
        # pooled top-left cell = 0.25, lands in channel 0 of token (0, 0)
        assert grids[0, 0, 0, 0] == pytest.approx(0.25)


class TestFixedLinear:
    def test_deterministic(self):
        imgs = random_images()
        a = FixedLinearEncoder(patch=4, token_dim=16, seed=11).encode(imgs)
        b = FixedLinearEncoder(patch=4, token_dim=16, seed=11).encode(imgs)
        assert np.array_equal(a, b)

    def test_seed_changes_output(self):
        imgs = random_images()
        a = FixedLinearEncoder(patch=4, seed=11).encode(imgs)
        b = FixedLinearEncoder(patch=4, seed=12).encode(imgs)
        assert not np.allclose(a, b)

    def test_orthonormal_columns(self):
        mat = orthonormal_matrix(48, 16, seed=3)
        assert np.allclose(mat.T @ mat, np.eye(16), atol=1e-12)

    def test_grid_aligned(self):
        grids = FixedLinearEncoder(patch=4, token_dim=16).encode(random_images())
        assert grids.shape == (5, 4, 4, 16)


class TestShapeParam:
    def test_requires_params(self):
        enc = ShapeParamEncoder(patch=4, grid=4)
        with pytest.raises(ConfigError):
            enc.encode(random_images(), shape_params=None)

    def test_broadcast(self):
        enc = ShapeParamEncoder(patch=4, grid=4)
        sp = np.array([[3, 0.5, 0.5, 0.3, 2, -0.7]], dtype=np.float64)
        grids = enc.encode(None, shape_params=sp)
        assert grids.shape == (1, 4, 4, 8)
        assert np.all(grids == grids[:, :1, :1, :])
        assert grids[0, 0, 0, 2] == 0.5  # cx passes through

    def test_kind_on_unit_circle(self):
        enc = ShapeParamEncoder(patch=4, grid=4)
        sp = np.array([[k, 0.5, 0.5, 0.3, 0, -0.5] for k in range(8)], dtype=float)
        grids = enc.encode(None, shape_params=sp)
        norms = grids[:, 0, 0, 0] ** 2 + grids[:, 0, 0, 1] ** 2
        assert np.allclose(norms, 1.0)
        # all 8 kinds get distinct codes
        assert len({tuple(np.round(g, 9)) for g in grids[:, 0, 0, :2]}) == 8


class TestNormalization:
    def test_scale_from_std_ratio(self):
        grids = RNG.standard_normal((200, 4, 4, 12)) * 2.0
        _, norm = normalize_modality(grids, target_std=0.5)
        assert float(norm.scale) == pytest.approx(0.25, rel=1e-2)

    def test_output_stats(self):
        grids = RNG.standard_normal((300, 4, 4, 16)) * 1.7 + 0.4
        out, _ = normalize_modality(grids, target_std=0.485)
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.std() == pytest.approx(0.485, rel=1e-12)

    def test_idempotent_on_normalized(self):
        grids = RNG.standard_normal((300, 4, 4, 8))
        grids = (grids - grids.mean()) / grids.std()
        _, norm = normalize_modality(grids, target_std=1.0)
        assert float(norm.scale) == pytest.approx(1.0, abs=1e-9)
        assert float(norm.offset) == pytest.approx(0.0, abs=1e-9)

    def test_roundtrip(self):
        grids = RNG.uniform(-3, 5, size=(50, 4, 4, 12))
        norm = fit_normalizer(grids, target_std=0.485)
        back = norm.invert(norm.apply(grids))
        assert np.max(np.abs(back - grids)) < 1e-6 * np.max(np.abs(grids))

    def test_per_channel(self):
        grids = RNG.standard_normal((500, 4, 4, 8))
        grids[..., 3] *= 9.0
        out, norm = normalize_modality(grids, target_std=0.5, per_channel=True)
        stds = out.reshape(-1, 8).std(axis=0)
        assert np.allclose(stds, 0.5, rtol=1e-9)
        assert norm.scale.shape == (8,)

    def test_zero_variance_raises(self):
        with pytest.raises(NormalizationError):
            fit_normalizer(np.ones((10, 4, 4, 3)), target_std=1.0)

    def test_empty_raises(self):
        with pytest.raises(NormalizationError):
            fit_normalizer(np.zeros((0, 4, 4, 3)), target_std=1.0)

    def test_identity_normalizer(self):
        grids = RNG.standard_normal((4, 2, 2, 3))
        ident = Normalizer.identity()
        assert np.array_equal(ident.apply(grids), grids)


class TestModalitySpec:
    def test_valid(self):
        spec = ModalitySpec("latent", "fixedlinear", 16, 0.485, 1 / 3)
        assert spec.loss_weight == pytest.approx(1 / 3)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(encoder_kind="dino"),
            dict(loss_weight=0.0),
            dict(std_after_norm=-1.0),
        ],
    )
    def test_invalid(self, kwargs):
        base = dict(name="m", encoder_kind="pixel", token_dim=48,
                    std_after_norm=0.485, loss_weight=1.0)
        base.update(kwargs)
        with pytest.raises(ConfigError):
            ModalitySpec(**base)


def test_alignment_between_modalities():
    imgs = random_images()
    p = PixelEncoder(4).encode(imgs)
    d = DownsampleEncoder(4).encode(imgs)
    f = FixedLinearEncoder(4).encode(imgs)
    assert p.shape[1:3] == d.shape[1:3] == f.shape[1:3]
