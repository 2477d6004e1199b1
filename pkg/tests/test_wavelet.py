import numpy as np
import pytest

from conftest import gradcheck
from wvae import wavelet as wv
from wvae.errors import FormatError, ShapeError
from wvae.tensor import Tensor


def _rand_image(rng, shape):
    return Tensor(rng.normal(shape).astype(np.float32))


class TestSingleLevelConvention:
    def test_constant_block(self):
        bands = wv.dwt2(Tensor(np.ones((1, 1, 2, 2), np.float32)))
        assert bands.ll.item() == 2.0
        for band in (bands.lh, bands.hl, bands.hh):
            assert band.item() == 0.0

    def test_horizontal_frequency_lands_in_hl(self):
        x = Tensor(np.asarray([[[[1.0, -1.0], [1.0, -1.0]]]], np.float32))
        bands = wv.dwt2(x)
        assert bands.hl.item() == 2.0
        assert bands.ll.item() == 0.0
        assert bands.lh.item() == 0.0
        assert bands.hh.item() == 0.0

    def test_vertical_frequency_lands_in_lh(self):
        x = Tensor(np.asarray([[[[1.0, 1.0], [-1.0, -1.0]]]], np.float32))
        bands = wv.dwt2(x)
        assert bands.lh.item() == 2.0

    def test_direct_filter_bank_oracle(self, rng):
        x = rng.normal((1, 1, 4, 4)).astype(np.float32)
        bands = wv.dwt2(Tensor(x))
        for bi, bj in ((0, 0), (0, 1), (1, 0), (1, 1)):
            block = x[0, 0, 2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2]
            a, b, c, d = block[0, 0], block[0, 1], block[1, 0], block[1, 1]
            assert bands.ll.data[0, 0, bi, bj] == pytest.approx((a + b + c + d) / 2, abs=1e-6)
            assert bands.lh.data[0, 0, bi, bj] == pytest.approx((a + b - c - d) / 2, abs=1e-6)
            assert bands.hl.data[0, 0, bi, bj] == pytest.approx((a - b + c - d) / 2, abs=1e-6)
            assert bands.hh.data[0, 0, bi, bj] == pytest.approx((a - b - c + d) / 2, abs=1e-6)

    def test_parseval_energy(self, rng):
        x = _rand_image(rng, (2, 3, 8, 8))
        bands = wv.dwt2(x)
        total = sum(float((b.data.astype(np.float64) ** 2).sum()) for b in bands.bands())
        energy = float((x.data.astype(np.float64) ** 2).sum())
        assert abs(total - energy) <= 1e-6 * energy

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            wv.dwt2(Tensor(np.ones((1, 1, 3, 4), np.float32)))

    def test_linearity(self, rng):
        x = rng.normal((1, 2, 8, 8)).astype(np.float32)
        y = rng.normal((1, 2, 8, 8)).astype(np.float32)
        mixed = wv.dwt2(Tensor(2.0 * x + 3.0 * y))
        bx = wv.dwt2(Tensor(x))
        by = wv.dwt2(Tensor(y))
        for combined, bxx, byy in zip(mixed.bands(), bx.bands(), by.bands()):
            np.testing.assert_allclose(
                combined.data, 2.0 * bxx.data + 3.0 * byy.data, atol=1e-5
            )


class TestInverse:
    def test_roundtrip(self, rng):
        x = _rand_image(rng, (2, 3, 16, 16))
        back = wv.idwt2(wv.dwt2(x))
        assert np.abs(back.data - x.data).max() < 1e-5

    def test_ll_only_constant(self):
        bands = wv.SubbandSet(
            Tensor(np.full((1, 1, 1, 1), 2.0, np.float32)),
            Tensor(np.zeros((1, 1, 1, 1), np.float32)),
            Tensor(np.zeros((1, 1, 1, 1), np.float32)),
            Tensor(np.zeros((1, 1, 1, 1), np.float32)),
        )
        np.testing.assert_allclose(wv.idwt2(bands).data[0, 0], np.ones((2, 2)))

    def test_zero_subbands(self):
        zero = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        bands = wv.SubbandSet(zero, zero, zero, zero)
        assert np.all(wv.idwt2(bands).data == 0.0)

    def test_subband_shape_mismatch(self):
        with pytest.raises(ShapeError):
            wv.SubbandSet(
                Tensor(np.zeros((1, 1, 2, 2))),
                Tensor(np.zeros((1, 1, 2, 2))),
                Tensor(np.zeros((1, 1, 2, 2))),
                Tensor(np.zeros((1, 1, 4, 4))),
            )


class TestPyramid:
    def test_level_shapes_channel_example(self, rng):
        x = _rand_image(rng, (1, 3, 64, 64))
        pyramid = wv.decompose(x, 2)
        assert pyramid.levels[0].ll.shape == (1, 3, 32, 32)
        assert wv.stack_channels(pyramid.levels[0]).shape == (1, 12, 32, 32)
        assert wv.stack_channels(pyramid.levels[1]).shape == (1, 12, 16, 16)

    def test_depth_zero_identity(self, rng):
        x = _rand_image(rng, (1, 1, 8, 8))
        pyramid = wv.decompose(x, 0)
        assert pyramid.depth == 0
        np.testing.assert_array_equal(wv.reconstruct(pyramid).data, x.data)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_roundtrip_depths(self, rng, depth):
        x = _rand_image(rng, (2, 1, 32, 32))
        back = wv.reconstruct(wv.decompose(x, depth))
        assert np.abs(back.data - x.data).max() < 1e-5

    def test_divisibility_enforced(self, rng):
        with pytest.raises(ShapeError):
            wv.decompose(_rand_image(rng, (1, 1, 12, 12)), 3)

    def test_details_zeroed_gives_block_means(self, rng):
        depth = 2
        x = _rand_image(rng, (1, 1, 8, 8))
        pyramid = wv.decompose(x, depth)
        for bands in pyramid.levels:
            for name in ("lh", "hl", "hh"):
                getattr(bands, name).data[...] = 0.0
        blurred = wv.reconstruct(
            wv.WaveletPyramid(pyramid.levels, pyramid.levels[-1].ll)
        ).data[0, 0]
        block = 1 << depth
        for bi in range(8 // block):
            for bj in range(8 // block):
                mean = x.data[0, 0, bi * block : (bi + 1) * block,
                              bj * block : (bj + 1) * block].mean()
                patch = blurred[bi * block : (bi + 1) * block,
                                bj * block : (bj + 1) * block]
                np.testing.assert_allclose(patch, mean, atol=1e-5)

    def test_single_level_equals_idwt2(self, rng):
        x = _rand_image(rng, (1, 2, 8, 8))
        pyramid = wv.decompose(x, 1)
        np.testing.assert_array_equal(
            wv.reconstruct(pyramid).data, wv.idwt2(pyramid.levels[0]).data
        )


class TestChannelStacking:
    def test_stack_order_and_inverse(self, rng):
        bands = wv.dwt2(_rand_image(rng, (2, 3, 8, 8)))
        stacked = wv.stack_channels(bands)
        assert stacked.shape == (2, 12, 4, 4)
        np.testing.assert_array_equal(stacked.data[:, 0:3], bands.ll.data)
        np.testing.assert_array_equal(stacked.data[:, 3:6], bands.lh.data)
        np.testing.assert_array_equal(stacked.data[:, 6:9], bands.hl.data)
        np.testing.assert_array_equal(stacked.data[:, 9:12], bands.hh.data)
        back = wv.unstack_channels(stacked)
        for orig, recovered in zip(bands.bands(), back.bands()):
            np.testing.assert_array_equal(orig.data, recovered.data)

    def test_single_channel(self, rng):
        bands = wv.dwt2(_rand_image(rng, (1, 1, 4, 4)))
        assert wv.stack_channels(bands).shape == (1, 4, 2, 2)

    def test_bad_channel_count(self):
        with pytest.raises(ShapeError):
            wv.unstack_channels(Tensor(np.zeros((1, 6, 2, 2))))


class TestDifferentiability:
    def test_dwt_gradients(self, rng):
        x = rng.normal((1, 1, 4, 4))
        proj = rng.normal((1, 1, 2, 2)).astype(np.float32)
        gradcheck(
            lambda xx: sum(
                (band * Tensor(proj)).sum() * w
                for band, w in zip(wv.dwt2(xx).bands(), (1.0, 2.0, 3.0, 4.0))
            ),
            {"xx": x},
        )

    def test_idwt_gradients(self, rng):
        arrays = {name: rng.normal((1, 1, 3, 3)) for name in ("a", "b", "c", "d")}
        proj = rng.normal((1, 1, 6, 6)).astype(np.float32)
        gradcheck(
            lambda a, b, c, d: (
                wv.idwt2(wv.SubbandSet(a, b, c, d)) * Tensor(proj)
            ).sum(),
            arrays,
        )

    def test_image_loss_reaches_coefficients(self, rng):
        stacked = Tensor(rng.normal((1, 4, 4, 4)).astype(np.float32), requires_grad=True)
        image = wv.idwt2(wv.unstack_channels(stacked))
        (image * image).sum().backward()
        assert stacked.grad is not None and np.abs(stacked.grad).max() > 0


class TestPyramidFile:
    def test_roundtrip(self, tmp_path, rng):
        pyramid = wv.decompose(_rand_image(rng, (1, 3, 16, 16)), 2)
        path = tmp_path / "p.wvp"
        wv.save_pyramid(path, pyramid)
        loaded = wv.load_pyramid(path)
        assert loaded.depth == 2
        for lv_a, lv_b in zip(pyramid.levels, loaded.levels):
            for band_a, band_b in zip(lv_a.bands(), lv_b.bands()):
                np.testing.assert_array_equal(band_a.data, band_b.data)

    def test_manifest_is_first_line(self, tmp_path, rng):
        pyramid = wv.decompose(_rand_image(rng, (1, 1, 8, 8)), 1)
        path = tmp_path / "p.wvp"
        wv.save_pyramid(path, pyramid)
        first = path.read_bytes().split(b"\n", 1)[0].decode()
        assert first.startswith("WVP1 depth=1 order=ll,lh,hl,hh")

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / "bad.wvp"
        path.write_bytes(b"nonsense\n")
        with pytest.raises(FormatError):
            wv.load_pyramid(path)


class TestTiling:
    def test_tile_count_and_shape(self, rng):
        x = _rand_image(rng, (1, 1, 32, 32))
        tiled = wv.tile_pyramid(wv.decompose(x, 3))
        # 1 approximation tile + 3 detail tiles per level: 10 tiles total,
        # packed into the original extent.
        assert tiled.shape == (1, 32, 32)
        assert tiled.min() >= 0.0 and tiled.max() <= 1.0

    def test_detail_tiles_centered_at_half(self):
        x = Tensor(np.full((1, 1, 8, 8), 0.5, np.float32))
        tiled = wv.tile_pyramid(wv.decompose(x, 1))
        # constant input: all detail coefficients are 0 -> rendered mid-gray
        np.testing.assert_allclose(tiled[0, :4, 4:], 0.5)
        np.testing.assert_allclose(tiled[0, 4:, :4], 0.5)
        np.testing.assert_allclose(tiled[0, 4:, 4:], 0.5)
