import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfnet import autodiff as ad
from dfnet.autodiff import Tensor
from dfnet.dynops import FilterField, FilterSpec
from dfnet.flowviz import (
    FlowMap,
    RasterImage,
    filters_to_flow,
    flow_to_color,
    montage,
    read_pnm,
    to_raster,
    write_pgm,
    write_ppm,
)


def field(taps, s_h=3, s_w=3):
    return FilterField(FilterSpec(s_h, s_w), Tensor(np.asarray(taps, dtype=np.float64)))


def one_hot(k, r=25, shape=(1, 1, 3, 4)):
    taps = np.zeros((shape[0], r) + shape[2:])
    taps[:, k] = 1
    return taps


def test_one_hot_taps_give_their_offset():
    # 5x5 support: tap (row 2, col 4) is offset (0, +2)
    f = filters_to_flow(field(one_hot(2 * 5 + 4), 5, 5))
    assert np.all(f.u == 2) and np.all(f.v == 0)
    f = filters_to_flow(field(one_hot(12), 5, 5))
    assert np.all(f.u == 0) and np.all(f.v == 0)


def test_uniform_taps_give_zero_flow():
    f = filters_to_flow(field(np.full((2, 13, 4, 4), 1 / 13), 1, 13))
    assert np.allclose(f.u, 0) and np.allclose(f.v, 0)


@pytest.mark.parametrize("dy,dx", [(-1, 0), (1, 1), (0, -1)])
def test_uniform_shift_field_exact(dy, dx):
    k = (dy + 1) * 3 + (dx + 1)
    f = filters_to_flow(field(one_hot(k, 9, (2, 1, 5, 6))))
    assert np.all(f.u == dx) and np.all(f.v == dy)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_flow_bounded_and_linear(seed, temp):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, 9, 4, 4)) * temp
    taps = ad.softmax_over_taps(Tensor(z), 9).data
    f = filters_to_flow(field(taps))
    assert np.all(np.abs(f.u) <= 1 + 1e-12) and np.all(np.abs(f.v) <= 1 + 1e-12)
    other = rng.random(taps.shape)
    g = filters_to_flow(field(other))
    s = filters_to_flow(field(2 * taps - other))
    np.testing.assert_allclose(s.u, 2 * f.u - g.u, atol=1e-12)


def test_flow_rejects_convolutional_and_multi_filter():
    conv = FilterField(FilterSpec(3, 3, mode="convolutional"), Tensor(np.zeros((1, 9, 1, 1))))
    with pytest.raises(ValueError):
        filters_to_flow(conv)
    multi = FilterField(FilterSpec(3, 3, n=2), Tensor(np.zeros((1, 18, 2, 2))))
    with pytest.raises(ValueError):
        filters_to_flow(multi)


# --- color -------------------------------------------------------------------------


def test_zero_flow_is_white():
    img = flow_to_color(np.zeros((4, 5)), np.zeros((4, 5)))
    assert img.channels == 3 and np.all(img.samples == 255)


def test_rightward_flow_at_max_is_pure_hue_zero():
    u = np.array([[2.0, 0.0]])
    img = flow_to_color(u, np.zeros_like(u))
    assert img.samples[0, 0].tolist() == [255, 0, 0]
    assert img.samples[0, 1].tolist() == [255, 255, 255]


@settings(max_examples=40, deadline=None)
@given(st.floats(-np.pi, np.pi))
def test_opposite_flow_is_complementary(theta):
    u = np.array([[np.cos(theta), -np.cos(theta)]])
    v = np.array([[np.sin(theta), -np.sin(theta)]])
    rgb = flow_to_color(u, v, max_mag=1.0).samples.astype(int)
    # at full saturation opposite hues sum to white channel by channel
    assert np.all(np.abs(rgb[0, 0] + rgb[0, 1] - 255) <= 1)


def test_flow_map_input_and_max_mag_clipping():
    fm = FlowMap(np.full((1, 1, 2, 2), 4.0), np.zeros((1, 1, 2, 2)))
    assert np.array_equal(flow_to_color(fm, max_mag=2.0).samples, flow_to_color(fm).samples)


# --- PNM ----------------------------------------------------------------------------


def test_pgm_layout(tmp_path):
    p = tmp_path / "a.pgm"
    write_pgm(RasterImage(np.array([[0, 64], [128, 255]], np.uint8)), p)
    raw = p.read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 64, 128, 255])
    assert len(raw) == 11 + 4


def test_ppm_round_trip_and_stable_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = RasterImage(rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8))
    p = tmp_path / "a.ppm"
    write_ppm(img, p)
    back = read_pnm(p)
    assert np.array_equal(back.samples, img.samples)
    assert p.read_bytes()[:11] == b"P6\n7 5\n255\n"


def test_pnm_known_digest(tmp_path):
    # fixed content, fixed bytes: guards against platform-dependent output
    img = to_raster(np.linspace(0, 1, 12).reshape(3, 4))
    write_pgm(img, tmp_path / "g.pgm")
    data = (tmp_path / "g.pgm").read_bytes()
    assert data[11:] == bytes([0, 23, 46, 70, 93, 116, 139, 162, 185, 209, 232, 255])
    assert hashlib.sha256(data).hexdigest() == "3a07166a50b7ae7576288bb2e478cdd79a6c18b7c421fb0c1d812a68c5077b7c"


def test_pnm_channel_errors(tmp_path):
    with pytest.raises(ValueError):
        RasterImage(np.zeros((2, 2, 4), np.uint8))
    with pytest.raises(ValueError):
        write_pgm(RasterImage(np.zeros((2, 2, 3), np.uint8)), tmp_path / "x.pgm")
    with pytest.raises(ValueError):
        write_ppm(RasterImage(np.zeros((2, 2), np.uint8)), tmp_path / "x.ppm")
    with pytest.raises(OSError, match="missing"):
        write_pgm(RasterImage(np.zeros((2, 2), np.uint8)), tmp_path / "missing" / "x.pgm")
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "bad.pgm")


def test_to_raster_clamps_and_rounds():
    img = to_raster(np.array([[[-1.0, 0.5, 2.0]]]))
    assert img.samples[:, :, 0].tolist() == [[0, 128, 255]]


# --- montage -------------------------------------------------------------------------------


def tile(v, h=3, w=4):
    return RasterImage(np.full((h, w), v, np.uint8))


def test_montage_single_frame_identity():
    assert np.array_equal(montage([tile(9)], 3).samples, tile(9).samples)


def test_montage_one_row():
    m = montage([tile(i + 1) for i in range(10)], 10)
    assert (m.height, m.width) == (3, 10 * 4 + 9 * 2)
    assert m.samples[0, 4, 0] == 0 and m.samples[0, 6, 0] == 2


def test_montage_grid_with_black_cell():
    m = montage([tile(10), tile(20), tile(30)], 2)
    assert (m.height, m.width) == (8, 10)
    assert np.all(m.samples[5:, 6:] == 0)
    assert np.all(m.samples[5:, :4] == 30)
    assert np.all(m.samples[3:5] == 0)


def test_montage_errors_and_color_promotion():
    with pytest.raises(ValueError):
        montage([], 2)
    with pytest.raises(ValueError):
        montage([tile(1), tile(1, 4, 4)], 2)
    rgb = RasterImage(np.full((3, 4, 3), 7, np.uint8))
    m = montage([tile(1), rgb], 2)
    assert m.channels == 3 and np.all(m.samples[:, :4] == 1)
