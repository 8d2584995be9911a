import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tntpatch.errors import EmptyPatch, PlacementOverflow, ShapeError
from tntpatch.patch_ops import (
    CANONICAL_LOCATIONS,
    Patch,
    Placement,
    ThresholdConfig,
    compute_mask,
    footprint,
    load_patch,
    make_patch,
    place,
    place_tensor,
    quantize,
    remove_background,
    save_patch,
    stamp,
    stamp_tensor,
)

unit = st.floats(0.0, 1.0, allow_nan=False, width=64)


@st.composite
def stamp_case(draw):
    h = draw(st.integers(1, 12))
    w = draw(st.integers(1, 12))
    x = draw(arrays(np.float64, (h, w, 3), elements=unit))
    d = draw(arrays(np.float64, (h, w, 3), elements=unit))
    m = draw(arrays(np.uint8, (h, w), elements=st.integers(0, 1)))
    return x, d, m


# -- compute_mask -----------------------------------------------------------------


def test_white_patch_gives_full_mask():
    assert compute_mask(np.ones((5, 5, 3))).all()


def test_black_patch_is_empty():
    with pytest.raises(EmptyPatch):
        compute_mask(np.zeros((5, 5, 3)))


def test_half_bright_patch_mask():
    delta = np.zeros((4, 4, 3))
    delta[:, :2] = 0.8
    delta[:, 2:] = 0.05
    expected = np.array([[1, 1, 0, 0]] * 4, np.uint8)
    np.testing.assert_array_equal(compute_mask(delta, ThresholdConfig("fixed", 0.1)), expected)


def test_mask_uses_channel_mean():
    delta = np.zeros((1, 2, 3))
    delta[0, 0] = (0.3, 0.0, 0.0)  # mean 0.1, not above 0.1
    delta[0, 1] = (0.31, 0.0, 0.0)
    np.testing.assert_array_equal(compute_mask(delta), [[0, 1]])


def test_otsu_separates_two_levels():
    delta = np.full((6, 6, 3), 0.2)
    delta[2:4, 2:4] = 0.9
    m = compute_mask(delta, ThresholdConfig("otsu"))
    assert m.sum() == 4 and m[2:4, 2:4].all()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (6, 5, 3), elements=unit))
def test_mask_is_binary(delta):
    try:
        m = compute_mask(delta)
    except EmptyPatch:
        assert (delta.mean(-1) <= 0.1).all()
        return
    assert set(np.unique(m)) <= {0, 1}
    assert m.shape == (6, 5)


# -- remove_background ------------------------------------------------------------


def test_full_mask_keeps_delta(rng):
    d = rng.uniform(size=(3, 3, 3))
    p = remove_background(Patch(d, np.ones((3, 3))))
    np.testing.assert_array_equal(p.delta, d)


def test_checkerboard_background_removal():
    mask = (np.indices((4, 4)).sum(0) % 2 == 0).astype(np.uint8)
    p = remove_background(Patch(np.full((4, 4, 3), 0.5), mask))
    expected = np.where(mask[..., None] == 1, 0.5, 0.0)
    np.testing.assert_array_equal(p.delta, np.broadcast_to(expected, (4, 4, 3)))


@settings(max_examples=200, deadline=None)
@given(stamp_case())
def test_background_removal_fixpoint(case):
    _, d, m = case
    once = remove_background(Patch(d, m))
    twice = remove_background(once)
    np.testing.assert_array_equal(once.delta, twice.delta)
    assert not (once.delta * (1 - m[..., None])).any()


# -- placement --------------------------------------------------------------------


def _square_patch(n=2, value=1.0):
    return Patch(np.full((n, n, 3), value), np.ones((n, n)))


def test_lower_right_corner():
    d, m = place(_square_patch(), Placement("lower_right"), 4, 4)
    rows, cols = np.nonzero(m)
    assert set(rows) == {2, 3} and set(cols) == {2, 3}
    assert d[:2].sum() == 0 and d[:, :2].sum() == 0


def test_center_uses_floor_offset():
    assert footprint(2, 2, Placement("center"), 4, 4) == (1, 1, 2, 2)
    # odd slack rounds toward the origin
    assert footprint(2, 2, Placement("center"), 5, 5) == (1, 1, 2, 2)


def test_full_scale_covers_canvas():
    assert footprint(3, 3, Placement("upper_left", 1.0), 6, 6) == (0, 0, 6, 6)


@pytest.mark.parametrize("loc,expected", [
    ("upper_left", (0, 0)), ("upper_right", (0, 6)), ("lower_left", (6, 0)),
    ("lower_right", (6, 6)), ("center", (3, 3)), ("top", (0, 3)), ("bottom", (6, 3)),
    ("left", (3, 0)), ("right", (3, 6)),
])
def test_canonical_offsets(loc, expected):
    assert footprint(4, 4, Placement(loc), 10, 10)[:2] == expected


def test_scale_fraction_is_area_ratio():
    top, left, h, w = footprint(8, 8, Placement("upper_left", 0.25), 32, 32)
    assert (h, w) == (16, 16)
    _, _, h, w = footprint(4, 8, Placement("upper_left", 0.125), 32, 32)
    assert (h, w) == (8, 16)  # aspect ratio kept


def test_overflow():
    with pytest.raises(PlacementOverflow):
        place(_square_patch(5), Placement("center"), 4, 4)
    with pytest.raises(PlacementOverflow):
        footprint(2, 2, Placement("custom", row=3, col=0), 4, 4)


def test_custom_location():
    d, m = place(_square_patch(), Placement("custom", row=1, col=2), 5, 5)
    assert m[1:3, 2:4].all() and m.sum() == 4


def test_resized_mask_stays_binary(rng):
    mask = (rng.uniform(size=(7, 7)) > 0.5).astype(np.uint8)
    p = Patch(rng.uniform(size=(7, 7, 3)), mask)
    for frac in (0.05, 0.2, 0.6):
        d, m = place(p, Placement("center", frac), 32, 32)
        assert set(np.unique(m)) <= {0, 1}
        assert d.min() >= 0 and d.max() <= 1


@pytest.mark.parametrize("frac", [None, 0.1, 0.3])
@pytest.mark.parametrize("loc", CANONICAL_LOCATIONS)
def test_tensor_placement_matches_numpy(rng, loc, frac):
    p = Patch(rng.uniform(size=(6, 6, 3)), (rng.uniform(size=(6, 6)) > 0.3).astype(np.uint8))
    d, m = place(p, Placement(loc, frac), 16, 16)
    dt = torch.from_numpy(p.delta.transpose(2, 0, 1))[None]
    mt = torch.from_numpy(p.mask.astype(np.float64))[None, None]
    d2, m2 = place_tensor(dt, mt, Placement(loc, frac), 16, 16)
    np.testing.assert_array_equal(m2[0, 0].numpy(), m)
    np.testing.assert_allclose(d2[0].numpy().transpose(1, 2, 0).clip(0, 1), d, atol=1e-12)


# -- stamping ---------------------------------------------------------------------


def test_quadrant_stamp():
    x = np.full((4, 4, 3), 0.5)
    d = np.ones((4, 4, 3))
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    out = stamp(x, d, m)
    assert (out[:2, :2] == 1.0).all()
    assert (out[2:] == 0.5).all() and (out[:, 2:] == 0.5).all()


def test_stamp_shape_mismatch():
    with pytest.raises(ShapeError):
        stamp(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)))


# The four algebra properties below are the bit-level stamping suite.

ALGEBRA_CASES = 1000


@settings(max_examples=ALGEBRA_CASES, deadline=None, derandomize=True)
@given(stamp_case())
def test_stamp_identity_mask(case):
    x, d, _ = case
    assert np.array_equal(stamp(x, d, np.zeros(x.shape[:2], np.uint8)), x)


@settings(max_examples=ALGEBRA_CASES, deadline=None, derandomize=True)
@given(stamp_case())
def test_stamp_full_mask(case):
    x, d, _ = case
    assert np.array_equal(stamp(x, d, np.ones(x.shape[:2], np.uint8)), d)


@settings(max_examples=ALGEBRA_CASES, deadline=None, derandomize=True)
@given(stamp_case())
def test_stamp_idempotent(case):
    x, d, m = case
    once = stamp(x, d, m)
    assert np.array_equal(stamp(once, d, m), once)


@settings(max_examples=ALGEBRA_CASES, deadline=None, derandomize=True)
@given(stamp_case())
def test_stamp_locality(case):
    x, d, m = case
    out = stamp(x, d, m)
    off = m == 0
    assert np.array_equal(out[off], x[off])
    assert np.array_equal(out[~off], d[~off])


def test_stamp_jacobian_is_mask(rng):
    x = torch.from_numpy(rng.uniform(0.2, 0.8, (1, 3, 5, 5)))
    d = torch.from_numpy(rng.uniform(0.2, 0.8, (1, 3, 5, 5))).requires_grad_(True)
    m = torch.from_numpy((rng.uniform(size=(1, 1, 5, 5)) > 0.5).astype(np.float64))
    jac = torch.autograd.functional.jacobian(lambda t: stamp_tensor(x, t, m), d)
    jac = jac.reshape(75, 75).numpy()
    np.testing.assert_array_equal(jac, np.diag(np.broadcast_to(m.numpy(), (1, 3, 5, 5)).ravel()))
    # central differences agree with the analytic Jacobian
    h = 1e-6
    base = d.detach().clone()
    for k in rng.choice(75, 10, replace=False):
        e = torch.zeros(75, dtype=torch.float64)
        e[k] = h
        plus = stamp_tensor(x, base + e.view_as(base), m)
        minus = stamp_tensor(x, base - e.view_as(base), m)
        fd = ((plus - minus) / (2 * h)).ravel().numpy()
        np.testing.assert_allclose(fd, jac[:, k], rtol=1e-6, atol=1e-9)


# -- interchange ------------------------------------------------------------------


def test_png_round_trip(tmp_path, rng):
    delta = quantize(rng.uniform(size=(9, 7, 3)))
    mask = (rng.uniform(size=(9, 7)) > 0.4).astype(np.uint8)
    p = remove_background(Patch(delta, mask))
    back = load_patch(save_patch(tmp_path / "p.png", p))
    np.testing.assert_array_equal(back.mask, p.mask)
    np.testing.assert_array_equal(back.delta, p.delta)
    assert back.source == "external_file"


def test_make_patch_strips_background():
    delta = np.full((4, 4, 3), 0.05)
    delta[1:3, 1:3] = 0.7
    p = make_patch(delta)
    assert p.mask.sum() == 4
    assert p.delta[0, 0].sum() == 0 and (p.delta[1, 1] == 0.7).all()


def test_patch_validation():
    with pytest.raises(ShapeError):
        Patch(np.zeros((2, 2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Patch(np.zeros((2, 2, 3)), np.full((2, 2), 2))
    with pytest.raises(ValueError):
        Patch(np.full((2, 2, 3), 1.5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Placement("middle")
    with pytest.raises(ValueError):
        Placement("center", 0.0)
