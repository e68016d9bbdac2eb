"""Exact algebra of the dihedral group D4 and its actions on pixel grids.

The group has 8 elements: 4 rotations by multiples of 90 degrees and their
4 mirrored versions.  An element acts on an image as "rotate `rot` times
90 degrees counter-clockwise, then flip columns if `mirror`".  Everything
else in this module (composition table, inverses, actions on group feature
maps and filter banks) is derived from that single coordinate action, so
the convention lives in exactly one place.

Group-axis indexing convention: index = mirror * 4 + rot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUP_SIZE = 8


@dataclass(frozen=True)
class GroupElement:
    """One symmetry: `rot` CCW quarter-turns followed by a column mirror if `mirror`."""

    rot: int
    mirror: int

    def __post_init__(self):
        if self.rot not in (0, 1, 2, 3) or self.mirror not in (0, 1):
            raise ValueError(f"invalid group element (rot={self.rot}, mirror={self.mirror})")

    @property
    def index(self) -> int:
        return self.mirror * 4 + self.rot


ELEMENTS: tuple[GroupElement, ...] = tuple(
    GroupElement(rot, mirror) for mirror in (0, 1) for rot in (0, 1, 2, 3)
)
IDENTITY = ELEMENTS[0]


def from_index(i: int) -> GroupElement:
    return ELEMENTS[i]


@dataclass(frozen=True)
class CayleyTable:
    """Composition table and inverses, both derived from the coordinate action."""

    table: np.ndarray    # [8, 8] int, table[a][b] = index of a∘b
    inverse: np.ndarray  # [8] int


def act_on_coord(g: GroupElement, p: tuple[int, int], dims: tuple[int, int]) -> tuple[int, int]:
    """Map pixel coordinate `p` = (row, col) on an H x W grid under g.

    For odd rotation counts the result lives on the transposed (W x H) grid.
    """
    r, c = p
    h, w = dims
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"coordinate {p} outside {dims} grid")
    for _ in range(g.rot):
        r, c = w - 1 - c, r
        h, w = w, h
    if g.mirror:
        c = w - 1 - c
    return (r, c)


def transformed_dims(g: GroupElement, dims: tuple[int, int]) -> tuple[int, int]:
    h, w = dims
    return (w, h) if g.rot % 2 else (h, w)


def act_on_plane(g: GroupElement, f: np.ndarray) -> np.ndarray:
    """Apply g to the last two (spatial) axes of `f`; pure value permutation.

    The pixel at p moves to act_on_coord(g, p), i.e. output(q) = input(g^-1 q).
    """
    out = np.rot90(f, g.rot, axes=(-2, -1))
    if g.mirror:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def _derive_cayley() -> CayleyTable:
    # Composition is read off the plane action on an asymmetric probe grid;
    # nothing below hand-writes the table.
    probe = np.arange(25.0).reshape(5, 5)
    acted = [act_on_plane(g, probe) for g in ELEMENTS]
    table = np.empty((8, 8), dtype=np.int64)
    for a in ELEMENTS:
        for b in ELEMENTS:
            composite = act_on_plane(a, acted[b.index])
            matches = [g.index for g in ELEMENTS if np.array_equal(acted[g.index], composite)]
            assert len(matches) == 1
            table[a.index, b.index] = matches[0]
    inverse = np.empty(8, dtype=np.int64)
    for a in ELEMENTS:
        (inv,) = np.nonzero(table[a.index] == IDENTITY.index)[0]
        inverse[a.index] = inv
    return CayleyTable(table=table, inverse=inverse)


_CAYLEY = _derive_cayley()


def cayley_table() -> CayleyTable:
    return _CAYLEY


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """a∘b: the element acting as `a after b`."""
    return ELEMENTS[_CAYLEY.table[a.index, b.index]]


def inverse(g: GroupElement) -> GroupElement:
    return ELEMENTS[_CAYLEY.inverse[g.index]]


def group_permutation(g: GroupElement) -> np.ndarray:
    """perm[h] = index of g^-1 ∘ h, the orientation-axis gather for acting with g."""
    g_inv = inverse(g)
    return np.array([compose(g_inv, h).index for h in ELEMENTS], dtype=np.int64)


def act_on_group_feature(g: GroupElement, f: np.ndarray) -> np.ndarray:
    """Apply g to a group feature map [..., 8, H, W] in the regular representation.

    output(..., h, q) = input(..., g^-1 h, g^-1 q): the orientation axis is
    permuted and every orientation plane is transformed spatially.
    """
    if f.shape[-3] != GROUP_SIZE:
        raise ValueError(f"expected orientation axis of length {GROUP_SIZE}, got {f.shape[-3]}")
    if g.rot % 2 and f.shape[-2] != f.shape[-1]:
        raise ValueError("odd rotations need square spatial dims on group features")
    perm = group_permutation(g)
    return act_on_plane(g, np.take(f, perm, axis=-3))


def _check_kernel_spatial(w: np.ndarray):
    k1, k2 = w.shape[-2], w.shape[-1]
    if k1 != k2 or k1 % 2 == 0:
        raise ValueError(f"kernel spatial dims must be odd and square, got {k1}x{k2}")


def transform_kernel_z2(g: GroupElement, w: np.ndarray) -> np.ndarray:
    """Transform a planar filter bank [..., k, k]: output(y) = input(g^-1 y)."""
    _check_kernel_spatial(w)
    return act_on_plane(g, w)


def transform_kernel_g(g: GroupElement, w: np.ndarray) -> np.ndarray:
    """Transform a group filter bank [..., 8, k, k], permuting its orientation axis too."""
    _check_kernel_spatial(w)
    return act_on_group_feature(g, w)
