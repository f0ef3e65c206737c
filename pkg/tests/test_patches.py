"""Patch geometry, standardization, stitching and tiling plans."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqsr import patches as pp
from uqsr.errors import ContractError, GeometryError
from uqsr.phantom import PhantomSpec, generate_phantom
from uqsr.volume import Volume4D


def _const_volume(value, dims=(8, 8, 8, 2)):
    return Volume4D(np.full(dims, value, np.float32),
                    mask=np.ones(dims[:3], bool))


class TestSimulateLowres:
    def test_constant_stays_constant(self):
        lo = pp.simulate_lowres(_const_volume(1.0), 2)
        assert lo.dims == (4, 4, 4, 2)
        np.testing.assert_array_equal(lo.data, 1.0)
        assert lo.spacing == (2.0, 2.0, 2.0)

    def test_block_average(self):
        data = np.arange(1.0, 9.0).reshape(2, 2, 2, 1).astype(np.float32)
        lo = pp.simulate_lowres(Volume4D(data), 2)
        assert lo.data.reshape(()) == pytest.approx(4.5)

    def test_r1_identity(self, rng):
        vol = Volume4D(rng.standard_normal((4, 4, 4, 1)).astype(np.float32))
        np.testing.assert_array_equal(pp.simulate_lowres(vol, 1).data, vol.data)

    def test_indivisible_dims_raise(self):
        with pytest.raises(GeometryError):
            pp.simulate_lowres(_const_volume(1.0, (9, 8, 8, 1)), 2)

    def test_nearest_upsample_of_constant_roundtrips(self):
        hi = _const_volume(3.5)
        lo = pp.simulate_lowres(hi, 2)
        back = pp.nearest_upsample(lo, 2)
        np.testing.assert_array_equal(back.data, hi.data)


class TestExtractPairs:
    @pytest.fixture(scope="class")
    def volumes(self):
        hi = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=2,
                                          structure_scale=8))
        return hi, pp.simulate_lowres(hi, 2)

    def test_table_geometry_m14(self, volumes):
        hi, lo = volumes
        pairs = pp.extract_patch_pairs(hi, lo, n=11, r=2, margin=4, count=4, seed=0)
        assert pairs[0].input.shape == (11, 11, 11, 6)
        assert pairs[0].target.shape == (14, 14, 14, 6)

    def test_receptive_field_5_gives_m2(self, volumes):
        hi, lo = volumes
        pairs = pp.extract_patch_pairs(hi, lo, n=5, r=2, margin=4, count=4, seed=0)
        assert pairs[0].target.shape == (2, 2, 2, 6)

    def test_same_seed_same_pairs(self, volumes):
        hi, lo = volumes
        a = pp.extract_patch_pairs(hi, lo, 7, 2, 4, 20, seed=9)
        b = pp.extract_patch_pairs(hi, lo, 7, 2, 4, 20, seed=9)
        assert [p.origin for p in a] == [p.origin for p in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.input, y.input)

    def test_geometry_identity_m(self, volumes):
        hi, lo = volumes
        for n in (5, 7, 9):
            pairs = pp.extract_patch_pairs(hi, lo, n, 2, 4, 2, seed=1)
            for p in pairs:
                assert p.target.shape[0] == (n - 4) * 2

    def test_target_alignment_with_input(self, volumes):
        # the target must be the central footprint of the upsampled input
        hi, lo = volumes
        (pair,) = pp.extract_patch_pairs(hi, lo, 7, 2, 4, 1, seed=3)
        ox, oy, oz = pair.origin
        hx = (ox + 2) * 2
        np.testing.assert_array_equal(
            pair.target, hi.data[hx:hx + 6, (oy + 2) * 2:(oy + 2) * 2 + 6,
                                 (oz + 2) * 2:(oz + 2) * 2 + 6, :]
        )

    def test_no_foreground_raises(self):
        hi = Volume4D(np.zeros((16, 16, 16, 1), np.float32),
                      mask=np.zeros((16, 16, 16), bool))
        lo = pp.simulate_lowres(hi, 2)
        with pytest.raises(ContractError):
            pp.extract_patch_pairs(hi, lo, 5, 2, 4, 3, seed=0)

    def test_region_labels(self, volumes):
        hi, lo = volumes
        pairs = pp.extract_patch_pairs(hi, lo, 5, 2, 4, 60, seed=4)
        labels = {p.region for p in pairs}
        assert labels <= {pp.INTERIOR, pp.EXTERIOR}
        lo_mask = lo.mask
        for p in pairs[:10]:
            window = lo_mask[p.origin[0]:p.origin[0] + 5,
                             p.origin[1]:p.origin[1] + 5,
                             p.origin[2]:p.origin[2] + 5]
            assert (p.region == pp.INTERIOR) == window.all()


class TestNormStats:
    def test_two_point_zscore(self):
        data = np.zeros((2, 1, 1, 1), np.float32)
        data[0, 0, 0, 0], data[1, 0, 0, 0] = 1.0, 3.0
        vol = Volume4D(data, mask=np.ones((2, 1, 1), bool))
        stats = pp.fit_norm_stats(vol)
        assert stats.mean[0] == pytest.approx(2.0)
        assert stats.std[0] == pytest.approx(1.0)
        pair = pp.PatchPair(input=data.copy(), target=data.copy(),
                            origin=(0, 0, 0), region=pp.INTERIOR)
        normed = pp.apply_norm([pair], stats, clip=False)[0]
        np.testing.assert_allclose(normed.input[:, 0, 0, 0], [-1.0, 1.0])

    def test_gaussian_sample_centered(self, rng):
        data = (5 + 2 * rng.standard_normal((10, 10, 10, 1))).astype(np.float32)
        vol = Volume4D(data, mask=np.ones((10, 10, 10), bool))
        stats = pp.fit_norm_stats(vol)
        normed = pp.normalize_volume(vol, stats, clip=False)
        assert abs(normed.data.mean()) < 0.1

    def test_affine_inverse_recovers(self, rng):
        data = rng.standard_normal((6, 6, 6, 3)).astype(np.float32) * 4 + 7
        vol = Volume4D(data, mask=np.ones((6, 6, 6), bool))
        stats = pp.fit_norm_stats(vol)
        normed = pp.normalize_volume(vol, stats, clip=False)
        back = pp.denormalize_mean(normed.data, stats)
        np.testing.assert_allclose(back, data, atol=1e-5)

    def test_constant_channel_passthrough(self):
        data = np.zeros((4, 4, 4, 2), np.float32)
        data[..., 0] = 5.0                       # constant channel
        data[..., 1] = np.arange(64.).reshape(4, 4, 4)
        vol = Volume4D(data, mask=np.ones((4, 4, 4), bool))
        with pytest.warns(UserWarning):
            stats = pp.fit_norm_stats(vol)
        assert stats.constant[0] and not stats.constant[1]
        assert stats.std[0] == 1.0

    def test_clipping_bounds_are_percentiles(self, rng):
        data = rng.standard_normal((12, 12, 12, 1)).astype(np.float32)
        vol = Volume4D(data, mask=np.ones((12, 12, 12), bool))
        stats = pp.fit_norm_stats(vol)
        fg = np.sort(data.reshape(-1))
        n = fg.size
        assert stats.clip_lo[0] == fg[int(np.ceil(0.001 * n)) - 1]
        assert stats.clip_hi[0] == fg[int(np.ceil(0.999 * n)) - 1]


class TestStitch:
    def test_exact_once_coverage(self):
        # 4^3 low-res grid, r=2, margin 0: 2^3 tiles at every origin
        tiles = []
        rng = np.random.default_rng(0)
        for ox in range(4):
            for oy in range(4):
                for oz in range(4):
                    tiles.append(((ox, oy, oz),
                                  rng.standard_normal((2, 2, 2, 1)).astype(np.float32)))
        out, covered = pp.stitch_prediction(tiles, (8, 8, 8, 1), r=2, margin=0)
        assert covered.all()

    def test_single_patch_zero_elsewhere(self):
        cube = np.ones((2, 2, 2, 1), np.float32)
        out, covered = pp.stitch_prediction([((0, 0, 0), cube)], (8, 8, 8, 1),
                                            r=2, margin=0)
        assert out[:2, :2, :2, 0].sum() == 8
        assert out.sum() == 8
        assert covered.sum() == 8

    def test_overlap_raises_with_voxel(self):
        cube = np.ones((4, 4, 4, 1), np.float32)
        with pytest.raises(ContractError, match=r"\(4, 4, 4\)"):
            pp.stitch_prediction([((0, 0, 0), cube), ((1, 1, 1), cube)],
                                 (12, 12, 12, 1), r=2, margin=2)

    def test_stitch_of_extracted_targets_rebuilds_volume(self):
        # identity predictor at r=1, margin=0 reconstructs bit-exactly
        hi = generate_phantom(PhantomSpec(dims=(16, 16, 16), seed=5,
                                          structure_scale=6))
        tiles = []
        for ox in range(0, 16, 4):
            for oy in range(0, 16, 4):
                for oz in range(0, 16, 4):
                    tiles.append(((ox, oy, oz),
                                  hi.data[ox:ox + 4, oy:oy + 4, oz:oz + 4, :]))
        out, covered = pp.stitch_prediction(tiles, hi.dims, r=1, margin=0)
        assert covered.all()
        np.testing.assert_array_equal(out, hi.data)


class TestTilingPlan:
    @given(st.integers(8, 40), st.integers(6, 16))
    @settings(max_examples=60, deadline=None)
    def test_plans_tessellate_exactly(self, X, patch):
        margin = 4
        if patch <= margin:
            patch = margin + 2
        axis = pp.plan_tiling((X, X, X, 1), patch, margin)[0]
        covered = np.zeros(X, int)
        for o, size in axis:
            assert size > margin
            assert o + size <= X
            covered[o + margin // 2:o + size - margin // 2] += 1
        assert (covered[margin // 2:X - margin // 2] == 1).all()
        assert covered.sum() == X - margin

    def test_too_small_axis_raises(self):
        with pytest.raises(GeometryError):
            pp.plan_tiling((4, 16, 16, 1), patch=8, margin=4)


class TestDatasetPersistence:
    def test_roundtrip(self, tmp_path):
        hi = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=3,
                                          structure_scale=8))
        lo = pp.simulate_lowres(hi, 2)
        pairs = pp.extract_patch_pairs(hi, lo, 7, 2, 4, 12, seed=1)
        stem = str(tmp_path / "ds")
        pp.save_patch_dataset(stem, hi, lo, pairs)
        index = (tmp_path / "ds.index.txt").read_text().splitlines()
        assert len(index) == 12
        assert index[0].split()[3] in (pp.INTERIOR, pp.EXTERIOR)
        back = pp.load_patch_dataset(stem, n=7, r=2, margin=4)
        for a, b in zip(pairs, back):
            assert a.origin == b.origin and a.region == b.region
            np.testing.assert_array_equal(a.input, b.input)
            np.testing.assert_array_equal(a.target, b.target)

    def test_malformed_index_rejected(self, tmp_path):
        hi = generate_phantom(PhantomSpec(dims=(16, 16, 16), seed=3))
        lo = pp.simulate_lowres(hi, 2)
        stem = str(tmp_path / "ds")
        pp.save_patch_dataset(stem, hi, lo, [])
        (tmp_path / "ds.index.txt").write_text("1 2 nonsense\n")
        with pytest.raises(ContractError):
            pp.load_patch_dataset(stem, n=5, r=2, margin=4)


class TestTrilinear:
    def test_recovers_linear_ramp_in_interior(self):
        # a linear field survives block-mean downsampling + linear interp
        g = np.meshgrid(*[np.arange(16.)] * 3, indexing="ij")
        field = (2 * g[0] + 3 * g[1] - g[2]).astype(np.float32)[..., None]
        hi = Volume4D(field)
        lo = pp.simulate_lowres(hi, 2)
        up = pp.trilinear_upsample(lo, 2)
        interior = (slice(1, 15),) * 3
        np.testing.assert_allclose(up.data[interior], hi.data[interior],
                                   atol=1e-4)
