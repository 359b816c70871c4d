import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ssdl.data import (
    GrayImage,
    PatchDataset,
    WhiteningTransform,
    apply_whitening,
    center_and_normalize,
    extract_patches,
    fit_whitening,
    load_matrix,
    load_whitening,
    read_pgm,
    render_mosaic,
    save_matrix,
    save_whitening,
    write_pgm,
)
from ssdl.exceptions import DimensionError, FormatError, NumericError


def make_image(rng, h=24, w=32):
    return GrayImage(h, w, rng.integers(0, 256, size=(h, w), dtype=np.uint8))


# -- PGM I/O -------------------------------------------------------------------


def test_pgm_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    img = make_image(rng)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.height == img.height and back.width == img.width
    assert np.array_equal(back.pixels, img.pixels)
    # writing again produces the identical file
    path2 = tmp_path / "img2.pgm"
    write_pgm(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_pgm_header_layout(tmp_path):
    img = GrayImage(2, 3, np.arange(6, dtype=np.uint8).reshape(2, 3))
    path = tmp_path / "tiny.pgm"
    write_pgm(path, img)
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(range(6))


def test_pgm_reader_tolerates_comments_and_whitespace(tmp_path):
    raw = b"P5 # binary graymap\n# a comment line\n  3\t2 # dims\n255\n" \
        + bytes(range(6))
    path = tmp_path / "c.pgm"
    path.write_bytes(raw)
    img = read_pgm(path)
    assert (img.height, img.width) == (2, 3)
    assert np.array_equal(img.pixels.ravel(), np.arange(6))


def test_pgm_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n3 2\n255\n" + b"0" * 20)
    with pytest.raises(FormatError) as exc:
        read_pgm(path)
    assert exc.value.offset == 0


def test_pgm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n3 2\n65535\n" + bytes(12))
    with pytest.raises(FormatError):
        read_pgm(path)


def test_pgm_rejects_truncated_raster(tmp_path):
    path = tmp_path / "short.pgm"
    data = b"P5\n4 4\n255\n" + bytes(10)  # needs 16
    path.write_bytes(data)
    with pytest.raises(FormatError) as exc:
        read_pgm(path)
    assert exc.value.offset == len(data)


def test_pgm_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "long.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(4) + b"xx")
    with pytest.raises(FormatError):
        read_pgm(path)


# -- patch extraction ----------------------------------------------------------


def test_extract_patches_shape_and_scaling():
    rng = np.random.default_rng(1)
    img = make_image(rng)
    ds = extract_patches(img, 6, 40, seed=9)
    assert ds.Y.shape == (36, 40)
    assert ds.patch_h == ds.patch_w == 6
    assert ds.Y.min() >= 0.0 and ds.Y.max() <= 1.0
    assert "seed=9" in ds.provenance


def test_extract_patches_deterministic():
    rng = np.random.default_rng(2)
    img = make_image(rng)
    a = extract_patches(img, 5, 25, seed=4)
    b = extract_patches(img, 5, 25, seed=4)
    assert np.array_equal(a.Y, b.Y)
    c = extract_patches(img, 5, 25, seed=5)
    assert not np.array_equal(a.Y, c.Y)


def test_extract_patches_columns_are_row_major_windows():
    rng = np.random.default_rng(3)
    img = make_image(rng)
    ds = extract_patches(img, 4, 12, seed=0)
    # every column must appear somewhere in the image as a 4x4 window
    found = 0
    for k in range(12):
        patch = (ds.Y[:, k] * 255.0).reshape(4, 4)
        for i in range(img.height - 3):
            for j in range(img.width - 3):
                if np.array_equal(img.pixels[i:i + 4, j:j + 4], patch):
                    found += 1
                    i = img.height
                    break
            else:
                continue
            break
    assert found == 12


def test_extract_patches_size_too_large():
    rng = np.random.default_rng(4)
    img = make_image(rng, h=6, w=6)
    with pytest.raises(DimensionError):
        extract_patches(img, 7, 3, seed=0)


# -- preprocessing -------------------------------------------------------------


def test_center_and_normalize_properties():
    rng = np.random.default_rng(5)
    Y = rng.random(size=(16, 50))
    ds = PatchDataset(Y, 4, 4, "synthetic")
    out = center_and_normalize(ds)
    assert_allclose(out.Y.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(np.linalg.norm(out.Y, axis=0), 1.0, atol=1e-12)


def test_center_and_normalize_drops_constant_columns():
    rng = np.random.default_rng(6)
    Y = rng.random(size=(9, 10))
    Y[:, 3] = 0.5  # constant patch: zero after centering
    ds = PatchDataset(Y, 3, 3, "synthetic")
    out = center_and_normalize(ds)
    assert out.Y.shape == (9, 9)
    assert "dropped 1" in out.provenance


def test_center_and_normalize_all_degenerate():
    Y = np.full((4, 3), 0.25)
    ds = PatchDataset(Y, 2, 2, "flat")
    with pytest.raises(ValueError):
        center_and_normalize(ds)


def test_fit_whitening_whitens():
    rng = np.random.default_rng(7)
    # correlated data with full rank
    C = rng.normal(size=(8, 8))
    Y = C @ rng.normal(size=(8, 500))
    ds = PatchDataset(Y, 4, 2, "synthetic")
    wt = fit_whitening(ds, eps=1e-12)
    out = apply_whitening(ds, wt)
    cov = out.Y @ out.Y.T / (out.Y.shape[1] - 1)
    assert_allclose(cov, np.eye(8), atol=1e-8)
    assert wt.retained_dims == 8


def test_fit_whitening_floors_small_eigenvalues():
    rng = np.random.default_rng(8)
    basis = np.linalg.qr(rng.normal(size=(6, 6)))[0]
    # rank-3 data
    Y = basis[:, :3] @ rng.normal(size=(3, 300))
    ds = PatchDataset(Y, 3, 2, "low rank")
    wt = fit_whitening(ds, eps=1e-4)
    assert wt.retained_dims == 3
    out = apply_whitening(ds, wt)
    assert np.all(np.isfinite(out.Y))


def test_fit_whitening_needs_two_samples():
    ds = PatchDataset(np.ones((4, 1)), 2, 2, "single")
    with pytest.raises(DimensionError):
        fit_whitening(ds)


def test_fit_whitening_rejects_zero_data():
    ds = PatchDataset(np.zeros((4, 10)), 2, 2, "zeros")
    with pytest.raises(NumericError):
        fit_whitening(ds)


def test_whitening_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    Y = rng.normal(size=(6, 80))
    ds = PatchDataset(Y, 3, 2, "synthetic")
    wt = fit_whitening(ds, eps=1e-6)
    path = str(tmp_path / "whiten.ssdl")
    save_whitening(path, wt)
    wt2 = load_whitening(path)
    assert np.array_equal(wt2.W, wt.W)
    assert np.array_equal(wt2.mean, wt.mean)
    assert wt2.eps == wt.eps
    assert wt2.retained_dims == wt.retained_dims


# -- binary matrix container ----------------------------------------------------


def test_matrix_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(10)
    M = rng.normal(size=(7, 11)) * np.exp(rng.normal(size=(7, 11)) * 5)
    path = tmp_path / "m.ssdl"
    save_matrix(path, M)
    back = load_matrix(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, M)


def test_matrix_roundtrip_special_values(tmp_path):
    M = np.array([[0.0, -0.0], [np.pi, 1e-308]])
    path = tmp_path / "m.ssdl"
    save_matrix(path, M)
    back = load_matrix(path)
    assert np.array_equal(back, M)
    assert np.signbit(back[0, 1])


def test_matrix_vector_saved_as_column(tmp_path):
    path = tmp_path / "v.ssdl"
    save_matrix(path, np.array([1.0, 2.0, 3.0]))
    back = load_matrix(path)
    assert back.shape == (3, 1)


def test_matrix_header_layout(tmp_path):
    path = tmp_path / "m.ssdl"
    save_matrix(path, np.array([[1.5]]))
    raw = path.read_bytes()
    magic, version, rows, cols = struct.unpack("<4sIQQ", raw[:24])
    assert magic == b"SSDL"
    assert version == 1
    assert (rows, cols) == (1, 1)
    assert struct.unpack("<d", raw[24:])[0] == 1.5


def test_matrix_payload_is_column_major(tmp_path):
    path = tmp_path / "m.ssdl"
    save_matrix(path, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = path.read_bytes()[24:]
    vals = struct.unpack("<4d", raw)
    assert vals == (1.0, 3.0, 2.0, 4.0)


def test_matrix_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.ssdl"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError) as exc:
        load_matrix(path)
    assert exc.value.offset == 0


def test_matrix_bad_version_offset_four(tmp_path):
    path = tmp_path / "bad.ssdl"
    path.write_bytes(struct.pack("<4sIQQ", b"SSDL", 9, 1, 1) + bytes(8))
    with pytest.raises(FormatError) as exc:
        load_matrix(path)
    assert exc.value.offset == 4


def test_matrix_truncated_header(tmp_path):
    path = tmp_path / "bad.ssdl"
    path.write_bytes(b"SSDL\x01")
    with pytest.raises(FormatError) as exc:
        load_matrix(path)
    assert exc.value.offset == 5  # end of the short file


def test_matrix_truncated_payload(tmp_path):
    path = tmp_path / "bad.ssdl"
    data = struct.pack("<4sIQQ", b"SSDL", 1, 2, 2) + bytes(16)
    path.write_bytes(data)
    with pytest.raises(FormatError) as exc:
        load_matrix(path)
    assert exc.value.offset == len(data)


def test_matrix_trailing_garbage(tmp_path):
    path = tmp_path / "bad.ssdl"
    data = struct.pack("<4sIQQ", b"SSDL", 1, 1, 1) + bytes(8) + b"!"
    path.write_bytes(data)
    with pytest.raises(FormatError) as exc:
        load_matrix(path)
    assert exc.value.offset == 24 + 8


# -- mosaics -------------------------------------------------------------------


def test_render_mosaic_geometry():
    D = np.eye(16)
    img = render_mosaic(D, 4, 4, 4, 4, pad=1)
    assert (img.height, img.width) == (4 * 4 + 5, 4 * 4 + 5)
    assert img.pixels.dtype == np.uint8


def test_render_mosaic_affine_rescale_per_atom():
    # a single ramp atom must span the full 0..255 range
    atom = np.linspace(-1.0, 1.0, 16)
    img = render_mosaic(atom.reshape(16, 1), 4, 4, 1, 1, pad=0)
    assert img.pixels.min() == 0
    assert img.pixels.max() == 255


def test_render_mosaic_constant_atom_neutral_gray():
    img = render_mosaic(np.full((4, 1), 0.7), 2, 2, 1, 1, pad=0)
    assert np.all(img.pixels == 128)


def test_render_mosaic_pads_with_neutral_gray():
    img = render_mosaic(np.ones((4, 1)), 2, 2, 2, 2, pad=1)
    # three of the four cells are empty
    assert (img.pixels == 128).sum() >= img.pixels.size - 4


def test_render_mosaic_accepts_dictionary_object():
    from ssdl.dictlearn import Dictionary
    D = Dictionary(np.eye(4))
    img = render_mosaic(D, 2, 2, 2, 2)
    assert img.height == 2 * 2 + 3


def test_render_mosaic_dim_mismatch():
    with pytest.raises(DimensionError):
        render_mosaic(np.eye(6), 2, 2, 3, 2)  # 2x2 atoms but 6 rows
