import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcednet import preprocess as P
from dcednet.imageio import ImageFormatError, decode_pnm, encode_pnm, read_image, write_image
from dcednet.tensor import make_rng


def test_gray_white():
    assert P.to_grayscale(np.full((2, 2, 3), 255, np.uint8)).max() == 255


def test_gray_red():
    img = np.zeros((1, 1, 3), np.uint8)
    img[..., 0] = 255
    assert P.to_grayscale(img).item() == 76


def test_gray_passthrough(rng):
    g = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    np.testing.assert_array_equal(P.to_grayscale(g), g)
    np.testing.assert_array_equal(P.to_grayscale(np.stack([g] * 3, -1)), g)


def test_wiener_constant():
    img = np.full((16, 16), 90.0)
    np.testing.assert_allclose(P.wiener_filter(img, 5), img)


def test_wiener_impulse_reduced():
    img = np.full((21, 21), 100.0)
    img[10, 10] = 250.0
    img += make_rng(0).normal(0, 2, img.shape)
    out = P.wiener_filter(img, 5).astype(np.float64)
    assert np.abs(out - 100).max() < np.abs(img - 100).max()
    assert out[10, 10] < img[10, 10]


def test_wiener_noise_variance():
    img = make_rng(1).normal(128, 20, (64, 64))
    assert P.wiener_filter(img, 5).var() < img.var()


def test_laplacian_constant():
    img = np.full((8, 8), 42.0)
    np.testing.assert_allclose(P.laplacian_sharpen(img), img)


def test_laplacian_bright_pixel():
    img = np.full((7, 7), 100.0)
    img[3, 3] = 110.0
    out = P.laplacian_sharpen(img).astype(np.float64)
    # hand evaluation of x - lap(x): centre gains 4*10, the 4-neighbours lose 10
    assert out[3, 3] == pytest.approx(150.0)
    assert out[2, 3] == pytest.approx(90.0)
    u8 = P._to_u8(P.laplacian_sharpen(np.where(img > 100, 250.0, 100.0)))
    assert u8[3, 3] == 255


def test_laplacian_step_edge_overshoot():
    img = np.full((5, 10), 50.0)
    img[:, 5:] = 150.0
    row = P.laplacian_sharpen(img)[2].astype(np.float64)
    # undershoot on the dark side, overshoot on the bright side: 50 - 100 clamps to 0, 150 + 100
    assert row[4] == 0 and row[5] == 250
    assert row[0] == 50 and row[9] == 150


def test_contrast_full_range_unchanged():
    img = np.tile(np.linspace(0, 255, 256), (4, 1))
    img[:, :3] = 0
    img[:, -3:] = 255
    np.testing.assert_allclose(P.contrast_normalize(img, 1, 99), img, atol=1e-9)


def test_contrast_constant_unchanged():
    img = np.full((6, 6), 77.0)
    np.testing.assert_array_equal(P.contrast_normalize(img), img)


def test_contrast_stretch():
    img = make_rng(2).uniform(100, 150, (64, 64))
    out = P._to_u8(P.contrast_normalize(img))
    assert out.min() == 0 and out.max() == 255


def test_resize_shapes():
    img = make_rng(0).random((490, 480))
    assert P.resize_bilinear(img, 320).shape == (320, 320)


def test_resize_identity(rng):
    img = rng.random((9, 9))
    np.testing.assert_allclose(P.resize_bilinear(img, 9), img)


@given(st.floats(0, 255), st.integers(2, 40), st.integers(2, 40), st.integers(2, 40))
def test_resize_constant(v, h, w, s):
    np.testing.assert_allclose(P.resize_bilinear(np.full((h, w), v), s), v, atol=1e-9)


@given(st.integers(0, 10**6), st.integers(2, 30))
@settings(max_examples=30)
def test_resize_nearest_keeps_labels(seed, s):
    m = (make_rng(seed).random((17, 13)) > 0.5).astype(np.uint8)
    assert set(np.unique(P.resize_nearest(m, s))) <= {0, 1}


def test_unity_mask_extremes():
    assert np.all(P.unity_mask(np.zeros((4, 4), np.uint8)) == 0)
    assert np.all(P.unity_mask(np.full((4, 4), 255, np.uint8)) == 1)


def test_unity_mask_checkerboard():
    board = (np.indices((6, 6)).sum(0) % 2 * 255).astype(np.uint8)
    np.testing.assert_array_equal(P.unity_mask(board, 128), board // 255)


def test_pipeline_default_shape():
    rng = make_rng(0)
    raw = rng.integers(0, 256, (490, 480, 3)).astype(np.uint8)
    truth = (rng.random((490, 480)) > 0.5).astype(np.uint8) * 255
    out = P.preprocess_pipeline(raw, truth)
    assert out.image.shape == (1, 3, 320, 320)
    assert out.mask.shape == (320, 320)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert 0 <= out.image.min() and out.image.max() <= 1
    again = P.preprocess_pipeline(raw, truth)
    assert out.image.tobytes() == again.image.tobytes() and out.mask.tobytes() == again.mask.tobytes()


def test_pipeline_size_mismatch():
    with pytest.raises(P.IngestError):
        P.preprocess_pipeline(np.zeros((20, 20, 3), np.uint8), np.zeros((21, 20), np.uint8))


def test_pipeline_too_small():
    with pytest.raises(P.IngestError):
        P.preprocess_gray(np.zeros((4, 20), np.uint8))


# -- image I/O ----------------------------------------------------------------

@given(st.integers(0, 10**6), st.booleans(), st.integers(1, 9), st.integers(1, 9))
@settings(max_examples=30)
def test_pnm_roundtrip(seed, color, h, w):
    shape = (h, w, 3) if color else (h, w)
    img = make_rng(seed).integers(0, 256, shape).astype(np.uint8)
    np.testing.assert_array_equal(decode_pnm(encode_pnm(img)), img)


def test_pnm_comment_header():
    data = b"P5\n# made by hand\n2 1\n255\n" + bytes([3, 250])
    np.testing.assert_array_equal(decode_pnm(data), [[3, 250]])


@pytest.mark.parametrize("data", [b"", b"P3\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2 2\n65535\n"])
def test_pnm_bad_input(data):
    with pytest.raises(ImageFormatError):
        decode_pnm(data)


def test_write_is_atomic(tmp_path):
    path = tmp_path / "a.pgm"
    write_image(path, np.zeros((2, 2), np.uint8))
    assert [p.name for p in tmp_path.iterdir()] == ["a.pgm"]
    np.testing.assert_array_equal(read_image(path), np.zeros((2, 2)))
