import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icessm import sfc


def manhattan_steps(order):
    t, h, w = order.dims
    lin = order.forward
    tt = lin // (h * w)
    hh = (lin % (h * w)) // w
    ww = lin % w
    return np.abs(np.diff(tt)) + np.abs(np.diff(hh)) + np.abs(np.diff(ww))


def assert_bijective(order):
    assert sorted(order.forward.tolist()) == list(range(order.n))


dims_st = st.tuples(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16))


class TestGilbert:
    def test_line_degenerates_to_raster(self):
        assert sfc.gilbert3d((1, 1, 4)).forward.tolist() == [0, 1, 2, 3]

    def test_2x2x2_unit_steps(self):
        order = sfc.gilbert3d((2, 2, 2))
        assert_bijective(order)
        assert (manhattan_steps(order) == 1).all()

    def test_3x5x2_bijective_adjacent(self):
        order = sfc.gilbert3d((3, 5, 2))
        assert order.n == 30
        assert_bijective(order)
        assert (manhattan_steps(order) == 1).all()

    @settings(max_examples=120, deadline=None)
    @given(dims=dims_st, spatial_first=st.booleans())
    def test_random_dims_bijective_adjacent(self, dims, spatial_first):
        prio = (1, 2, 0) if spatial_first else (0, 1, 2)
        order = sfc.gilbert3d(dims, prio)
        assert_bijective(order)
        if order.n > 1:
            assert (manhattan_steps(order) == 1).all()

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            sfc.gilbert3d((0, 4, 4))

    def test_variants_differ(self):
        a = sfc.gilbert3d((4, 8, 8), (0, 1, 2))
        b = sfc.gilbert3d((4, 8, 8), (1, 2, 0))
        assert a.kind == "hilbert_temporal_first"
        assert b.kind == "hilbert_spatial_first"
        assert not np.array_equal(a.forward, b.forward)


class TestRaster:
    def test_identity(self):
        assert sfc.raster((1, 2, 2)).forward.tolist() == [0, 1, 2, 3]
        assert sfc.raster((2, 1, 2)).forward.tolist() == [0, 1, 2, 3]

    def test_temporal_stride(self):
        # matching pixels in the two frames of a (2,2,2) cuboid sit H*W apart
        order = sfc.raster((2, 2, 2))
        rank = order.inverse()
        gaps = [abs(rank[i + 4] - rank[i]) for i in range(4)]
        assert np.mean(gaps) == 4.0


class TestZorder:
    def test_1x2x2_interleave_oracle(self):
        # 2-bit interleave: w takes bit 0, h takes bit 1
        expect = [(0, 0), (0, 1), (1, 0), (1, 1)]
        lin = [h * 2 + w for (h, w) in expect]
        assert sfc.zorder((1, 2, 2)).forward.tolist() == lin

    def test_2x2x2_morton_oracle(self):
        # independent 3-bit interleave: code = t<<2 | h<<1 | w
        cells = sorted(
            ((t << 2) | (h << 1) | w, t * 4 + h * 2 + w)
            for t in range(2) for h in range(2) for w in range(2)
        )
        assert sfc.zorder((2, 2, 2)).forward.tolist() == [lin for _, lin in cells]

    def test_1x3x3_skip_compaction(self):
        order = sfc.zorder((1, 3, 3))
        assert order.n == 9
        assert_bijective(order)

    @settings(max_examples=60, deadline=None)
    @given(dims=dims_st)
    def test_random_dims_bijective(self, dims):
        assert_bijective(sfc.zorder(dims))


class TestPeano:
    def test_1x1x3_line(self):
        assert sfc.peano((1, 1, 3)).forward.tolist() == [0, 1, 2]

    def test_1x3x3_boustrophedon_oracle(self):
        # hand-derived serpentine over a 3x3 plane:
        # (0,0)(0,1)(0,2)(1,2)(1,1)(1,0)(2,0)(2,1)(2,2)
        assert sfc.peano((1, 3, 3)).forward.tolist() == [0, 1, 2, 5, 4, 3, 6, 7, 8]

    def test_2x2x2_bijective(self):
        assert_bijective(sfc.peano((2, 2, 2)))

    def test_full_cube_adjacency(self):
        # on an uncompacted power-of-3 cube the curve is a unit-step path
        for dims in [(3, 3, 3), (9, 9, 9)]:
            order = sfc.peano(dims)
            assert_bijective(order)
            assert (manhattan_steps(order) == 1).all()

    @settings(max_examples=60, deadline=None)
    @given(dims=dims_st)
    def test_random_dims_bijective(self, dims):
        assert_bijective(sfc.peano(dims))


class TestRoutes:
    def test_single(self):
        order = sfc.gilbert3d((2, 2, 2))
        assert sfc.routes(order, 1) == [order]

    def test_reversal(self):
        order = sfc.gilbert3d((2, 3, 4))
        fwd, bwd = sfc.routes(order, 2)
        assert np.array_equal(bwd.forward, fwd.forward[::-1])
        assert bwd.direction == "backward"
        assert np.array_equal(bwd.reversed().forward, fwd.forward)

    def test_four_distinct_bijections(self):
        rs = sfc.routes(sfc.gilbert3d((2, 2, 2)), 4)
        assert len(rs) == 4
        for r in rs:
            assert_bijective(r)
        seqs = [tuple(r.forward.tolist()) for r in rs]
        assert len(set(seqs)) == 4

    def test_rotated_route_keeps_adjacency(self):
        for r in sfc.routes(sfc.gilbert3d((3, 4, 6)), 4):
            assert (manhattan_steps(r) == 1).all()

    def test_unsupported_count(self):
        with pytest.raises(ValueError):
            sfc.routes(sfc.raster((2, 2, 2)), 3)


class TestApply:
    def test_raster_apply_is_flatten(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        seq = sfc.apply(sfc.raster((2, 4, 5)), v)
        assert np.array_equal(seq, np.moveaxis(v, 1, -1).reshape(40, 3))

    @settings(max_examples=40, deadline=None)
    @given(dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
           kind=st.sampled_from(sfc.KINDS))
    def test_round_trip(self, dims, kind):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(dims[0], 2, dims[1], dims[2])).astype(np.float32)
        order = sfc.make_order(kind, dims)
        assert np.array_equal(sfc.inverse_apply(order, sfc.apply(order, v)), v)

    def test_sequence_matches_forward_list(self):
        order = sfc.gilbert3d((2, 2, 2))
        t, h, w = order.dims
        v = np.arange(8, dtype=np.float32).reshape(2, 1, 2, 2)
        seq = sfc.apply(order, v)
        assert np.array_equal(seq[:, 0].astype(np.int64), order.forward)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sfc.apply(sfc.raster((2, 2, 2)), np.zeros((2, 1, 3, 2), dtype=np.float32))


class TestLocality:
    def test_raster_222_temporal_gap(self):
        stats = sfc.locality_score(sfc.raster((2, 2, 2)))
        assert stats.axis_mean_gaps[0] == pytest.approx(4.0)

    def test_hilbert_beats_raster_on_8cube(self):
        g = sfc.locality_score(sfc.gilbert3d((8, 8, 8)))
        r = sfc.locality_score(sfc.raster((8, 8, 8)))
        assert g.mean_gap < r.mean_gap

    def test_zorder_between_gilbert_and_raster(self):
        g = sfc.locality_score(sfc.gilbert3d((8, 8, 8))).mean_gap
        z = sfc.locality_score(sfc.zorder((8, 8, 8))).mean_gap
        r = sfc.locality_score(sfc.raster((8, 8, 8))).mean_gap
        assert g < z < r

    def test_full_ordering_8cube(self):
        means = {
            kind: sfc.locality_score(sfc.make_order(kind, (8, 8, 8))).mean_gap
            for kind in ("hilbert_temporal_first", "peano", "zorder", "raster")
        }
        assert (means["hilbert_temporal_first"] <= means["peano"]
                <= means["zorder"] <= means["raster"])
        assert means["hilbert_temporal_first"] < means["raster"]


class TestDeterminismAndIo:
    def test_identical_inputs_identical_orders(self):
        for kind in sfc.KINDS:
            a = sfc.make_order(kind, (5, 6, 7))
            b = sfc.make_order(kind, (5, 6, 7))
            assert np.array_equal(a.forward, b.forward)

    def test_golden_file_round_trip(self, tmp_path):
        orders = sfc.routes(sfc.gilbert3d((3, 4, 5)), 2)
        path = tmp_path / "orders.txt"
        sfc.write_orders(path, orders)
        back = sfc.read_orders(path)
        assert len(back) == 2
        for o, b in zip(orders, back):
            assert b.kind == o.kind and b.dims == o.dims and b.direction == o.direction
            assert np.array_equal(b.forward, o.forward)
