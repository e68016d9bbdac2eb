import itertools

import numpy as np
import pytest

from gerseg import dihedral as dh


def coord_oracle_compose(a, b):
    """Read a∘b off a 4x4 index grid using only the coordinate action."""
    dims = (4, 4)
    want = {}
    for p in itertools.product(range(4), range(4)):
        q = dh.act_on_coord(b, p, dims)
        want[p] = dh.act_on_coord(a, q, dh.transformed_dims(b, dims))
    matches = [
        g
        for g in dh.ELEMENTS
        if all(dh.act_on_coord(g, p, dims) == want[p] for p in want)
    ]
    assert len(matches) == 1
    return matches[0]


class TestGroupAxioms:
    def test_eight_distinct_elements_and_identity(self):
        assert len(set(dh.ELEMENTS)) == 8
        assert dh.IDENTITY == dh.GroupElement(0, 0)
        assert [g.index for g in dh.ELEMENTS] == list(range(8))

    def test_closure_and_latin_square(self):
        t = dh.cayley_table().table
        for i in range(8):
            assert sorted(t[i]) == list(range(8))
            assert sorted(t[:, i]) == list(range(8))

    def test_identity_row(self):
        for g in dh.ELEMENTS:
            assert dh.compose(dh.IDENTITY, g) == g
            assert dh.compose(g, dh.IDENTITY) == g

    def test_associativity_exhaustive(self):
        for a, b, c in itertools.product(dh.ELEMENTS, repeat=3):
            assert dh.compose(dh.compose(a, b), c) == dh.compose(a, dh.compose(b, c))

    def test_inverses(self):
        for g in dh.ELEMENTS:
            assert dh.compose(g, dh.inverse(g)) == dh.IDENTITY
            assert dh.compose(dh.inverse(g), g) == dh.IDENTITY

    def test_invalid_element_rejected(self):
        with pytest.raises(ValueError):
            dh.GroupElement(4, 0)
        with pytest.raises(ValueError):
            dh.GroupElement(0, 2)


class TestCompose:
    def test_rotation_addition(self):
        r1 = dh.GroupElement(1, 0)
        assert dh.compose(r1, r1) == dh.GroupElement(2, 0)
        assert dh.compose(dh.GroupElement(3, 0), dh.GroupElement(2, 0)) == dh.GroupElement(1, 0)

    def test_rot_then_mirror_matches_coordinate_oracle(self):
        a, b = dh.GroupElement(1, 0), dh.GroupElement(0, 1)
        assert dh.compose(a, b) == coord_oracle_compose(a, b)

    def test_all_pairs_match_coordinate_oracle(self):
        for a, b in itertools.product(dh.ELEMENTS, repeat=2):
            assert dh.compose(a, b) == coord_oracle_compose(a, b)


class TestInverse:
    def test_identity(self):
        assert dh.inverse(dh.IDENTITY) == dh.IDENTITY

    def test_quarter_turn(self):
        assert dh.inverse(dh.GroupElement(1, 0)) == dh.GroupElement(3, 0)

    def test_reflections_are_involutions(self):
        for r in range(4):
            g = dh.GroupElement(r, 1)
            assert dh.compose(g, g) == dh.IDENTITY
            assert dh.inverse(g) == g


class TestActOnCoord:
    def test_identity_fixed_point(self):
        assert dh.act_on_coord(dh.IDENTITY, (0, 0), (4, 4)) == (0, 0)

    def test_quarter_turn_corner(self):
        assert dh.act_on_coord(dh.GroupElement(1, 0), (0, 0), (4, 4)) == (3, 0)

    def test_quarter_turn_is_grid_permutation(self):
        g = dh.GroupElement(1, 0)
        images = {dh.act_on_coord(g, p, (4, 4)) for p in itertools.product(range(4), range(4))}
        assert images == set(itertools.product(range(4), range(4)))

    def test_mirror_column(self):
        assert dh.act_on_coord(dh.GroupElement(0, 1), (0, 1), (4, 4)) == (0, 2)

    def test_rectangular_dims_tracked(self):
        g = dh.GroupElement(1, 0)
        assert dh.transformed_dims(g, (2, 5)) == (5, 2)
        q = dh.act_on_coord(g, (1, 4), (2, 5))
        assert 0 <= q[0] < 5 and 0 <= q[1] < 2

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            dh.act_on_coord(dh.IDENTITY, (4, 0), (4, 4))

    def test_matches_plane_action_everywhere(self):
        # value at p must move to act_on_coord(g, p)
        f = np.arange(20.0).reshape(4, 5)
        for g in dh.ELEMENTS:
            out = dh.act_on_plane(g, f)
            for p in itertools.product(range(4), range(5)):
                q = dh.act_on_coord(g, p, (4, 5))
                assert out[q] == f[p]


class TestActOnPlane:
    def test_identity_bit_identical(self):
        f = np.random.default_rng(0).normal(size=(2, 5, 5))
        out = dh.act_on_plane(dh.IDENTITY, f)
        assert out is not f
        assert np.array_equal(out, f)

    def test_half_turn_2x2(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(dh.act_on_plane(dh.GroupElement(2, 0), f), [[4.0, 3.0], [2.0, 1.0]])

    def test_value_permutation(self):
        f = np.random.default_rng(1).normal(size=(3, 6, 6))
        for g in dh.ELEMENTS:
            out = dh.act_on_plane(g, f)
            assert np.array_equal(np.sort(out.ravel()), np.sort(f.ravel()))

    def test_composition_all_pairs(self):
        f = np.random.default_rng(2).normal(size=(2, 4, 4))
        for a, b in itertools.product(dh.ELEMENTS, repeat=2):
            lhs = dh.act_on_plane(a, dh.act_on_plane(b, f))
            rhs = dh.act_on_plane(dh.compose(a, b), f)
            assert np.array_equal(lhs, rhs)


class TestActOnGroupFeature:
    def test_identity_bit_identical(self):
        f = np.random.default_rng(3).normal(size=(2, 8, 4, 4))
        assert np.array_equal(dh.act_on_group_feature(dh.IDENTITY, f), f)

    def test_constant_group_axis_stays_constant(self):
        plane = np.random.default_rng(4).normal(size=(4, 4))
        f = np.broadcast_to(plane, (1, 8, 4, 4)).copy()
        for g in dh.ELEMENTS:
            out = dh.act_on_group_feature(g, f)
            rotated = dh.act_on_plane(g, plane)
            for h in range(8):
                assert np.array_equal(out[0, h], rotated)

    def test_composition_all_pairs(self):
        f = np.random.default_rng(5).normal(size=(2, 8, 4, 4))
        for a, b in itertools.product(dh.ELEMENTS, repeat=2):
            lhs = dh.act_on_group_feature(a, dh.act_on_group_feature(b, f))
            rhs = dh.act_on_group_feature(dh.compose(a, b), f)
            assert np.array_equal(lhs, rhs)

    def test_non_square_odd_rotation_rejected(self):
        f = np.zeros((1, 8, 4, 6))
        with pytest.raises(ValueError):
            dh.act_on_group_feature(dh.GroupElement(1, 0), f)
        # even rotations keep the shape and are fine
        dh.act_on_group_feature(dh.GroupElement(2, 1), f)

    def test_wrong_group_axis_rejected(self):
        with pytest.raises(ValueError):
            dh.act_on_group_feature(dh.IDENTITY, np.zeros((1, 4, 4, 4)))


class TestKernelTransforms:
    def test_center_delta_invariant(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        for g in dh.ELEMENTS:
            assert np.array_equal(dh.transform_kernel_z2(g, w), w)

    def test_single_tap_moves_with_coordinate_action(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 2] = 1.0
        out = dh.transform_kernel_z2(dh.GroupElement(1, 0), w)
        expect = np.zeros((1, 1, 3, 3))
        expect[0, 0, 0, 1] = 1.0
        assert np.array_equal(out, expect)

    def test_norms_preserved_exactly(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            w = rng.normal(size=(1, 1, 3, 3))
            for g in dh.ELEMENTS:
                t = dh.transform_kernel_z2(g, w)
                assert np.array_equal(np.sort(np.abs(t).ravel()), np.sort(np.abs(w).ravel()))

    def test_generic_kernel_has_eight_distinct_transforms(self):
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        outs = {dh.transform_kernel_z2(g, w).tobytes() for g in dh.ELEMENTS}
        assert len(outs) == 8
        sym = np.zeros((1, 1, 3, 3))
        sym[0, 0, 1, 1] = 2.0
        outs = {dh.transform_kernel_z2(g, sym).tobytes() for g in dh.ELEMENTS}
        assert len(outs) == 1

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            dh.transform_kernel_z2(dh.IDENTITY, np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            dh.transform_kernel_g(dh.IDENTITY, np.zeros((1, 1, 8, 2, 2)))

    def test_kernel_g_identity_and_delta(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(2, 3, 8, 3, 3))
        assert np.array_equal(dh.transform_kernel_g(dh.IDENTITY, w), w)
        delta = np.zeros((1, 1, 8, 3, 3))
        delta[0, 0, dh.IDENTITY.index, 1, 1] = 1.0
        for g in dh.ELEMENTS:
            # out(h) = in(g^-1 h): the identity tap lands on orientation g
            out = dh.transform_kernel_g(g, delta)
            nz = np.nonzero(out)
            assert len(nz[0]) == 1
            assert nz[2][0] == g.index
            assert (nz[3][0], nz[4][0]) == (1, 1)

    def test_kernel_g_composition_all_pairs(self):
        w = np.random.default_rng(8).normal(size=(1, 2, 8, 3, 3))
        for a, b in itertools.product(dh.ELEMENTS, repeat=2):
            lhs = dh.transform_kernel_g(a, dh.transform_kernel_g(b, w))
            rhs = dh.transform_kernel_g(dh.compose(a, b), w)
            assert np.array_equal(lhs, rhs)
