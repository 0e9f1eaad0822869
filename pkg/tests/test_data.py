import gzip
import math

import numpy as np
import pytest
from scipy import integrate

from mixvi.data import (
    CENTER_COLUMN,
    DataFormatError,
    bundled_digits_available,
    generate_toy,
    load_bundled_digits,
    load_digits,
    parse_idx,
    prepare_digits,
    read_idx,
    synthetic_digits,
    toy_log_evidence,
    toy_posterior_grid,
    train_test_split,
    write_idx,
)


def test_toy_generator_mean_and_determinism():
    ds = generate_toy(1000, 0.05, seed=0)
    assert ds.x.shape == (1000, 2)
    np.testing.assert_allclose(ds.x.mean(0), math.sqrt(2 / math.pi), atol=0.1)
    assert np.array_equal(ds.x, generate_toy(1000, 0.05, seed=0).x)
    assert not np.array_equal(ds.x, generate_toy(1000, 0.05, seed=1).x)


def test_toy_noiseless_limit():
    x = generate_toy(500, 0.0, seed=3).x
    assert np.all(x >= 0)


def test_toy_log_evidence_against_quadrature():
    x = np.array([0.7, -0.2])
    s2 = 0.05

    def per_coord(xi):
        f = lambda z: math.exp(-0.5 * z * z - 0.5 * (xi - abs(z)) ** 2 / s2) / (2 * math.pi * math.sqrt(s2))
        return math.log(integrate.quad(f, -8, 8, points=[0.0, xi, -xi], limit=200)[0])

    expected = per_coord(x[0]) + per_coord(x[1])
    assert toy_log_evidence(x[None, :], s2)[0] == pytest.approx(expected, abs=1e-8)


def test_toy_posterior_grid():
    g, dens = toy_posterior_grid(np.array([1.0, 1.0]), 0.05)
    assert abs(np.trapezoid(np.trapezoid(dens, g, axis=1), g) - 1.0) < 1e-3
    np.testing.assert_allclose(dens, dens[::-1, :], atol=1e-12)
    np.testing.assert_allclose(dens, dens[:, ::-1], atol=1e-12)
    i, j = np.unravel_index(np.argmax(dens), dens.shape)
    assert abs(abs(g[i]) - 1.0) < 0.1 and abs(abs(g[j]) - 1.0) < 0.1


def idx_bytes(arr, code=0x08):
    return bytes([0, 0, code, arr.ndim]) + b"".join(int(n).to_bytes(4, "big") for n in arr.shape) + arr.astype(">u1").tobytes()


def test_idx_header_and_roundtrip(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    buf = idx_bytes(arr)
    assert buf[:4] == bytes.fromhex("00000803")
    out = parse_idx(buf)
    assert out.dtype == np.uint8 and out.shape == (2, 3, 4)
    np.testing.assert_array_equal(out, arr)
    write_idx(tmp_path / "a.gz", arr)
    assert gzip.decompress((tmp_path / "a.gz").read_bytes()) == buf
    np.testing.assert_array_equal(read_idx(tmp_path / "a.gz"), arr)
    write_idx(tmp_path / "b", arr)
    assert (tmp_path / "b").read_bytes() == buf
    labels = np.array([3, 1], dtype=np.uint8)
    assert idx_bytes(labels)[:4] == bytes.fromhex("00000801")


def test_idx_errors():
    arr = np.zeros((2, 3), dtype=np.uint8)
    buf = idx_bytes(arr)
    with pytest.raises(DataFormatError, match="magic"):
        parse_idx(b"\x01\x00" + buf[2:])
    with pytest.raises(DataFormatError, match="truncated"):
        parse_idx(buf[:-1])
    with pytest.raises(DataFormatError, match="truncated"):
        parse_idx(buf[:6])


def test_center_column_and_binarize():
    images = np.zeros((3, 28, 28))
    images[:, :, CENTER_COLUMN] = 0.6
    ds = prepare_digits(images, [0, 1, 2], corruption="center_column", binarize=True)
    assert ds.inputs.shape == (3, 28)
    np.testing.assert_array_equal(ds.inputs, 1.0)
    full = prepare_digits(np.full((2, 28, 28), 0.6), [1, 2], binarize=True)
    np.testing.assert_array_equal(full.images, 1.0)
    assert full.inputs.shape == (2, 784)


def test_prepare_digits_scaling_and_validation():
    raw = np.full((1, 28, 28), 255, dtype=np.uint8)
    assert prepare_digits(raw, [4]).images.max() == 1.0
    with pytest.raises(DataFormatError):
        prepare_digits(np.zeros((2, 28, 28)), [0, 10])
    with pytest.raises(DataFormatError):
        prepare_digits(np.zeros((2, 27, 28)), [0, 1])


def test_load_digits_from_idx(tmp_path):
    imgs = (np.arange(4 * 28 * 28) % 256).astype(np.uint8).reshape(4, 28, 28)
    write_idx(tmp_path / "i.idx", imgs)
    write_idx(tmp_path / "l.idx", np.array([0, 1, 2, 9], dtype=np.uint8))
    ds = load_digits(tmp_path / "i.idx", tmp_path / "l.idx", corruption="center_column")
    np.testing.assert_allclose(ds.inputs, imgs[:, :, 14] / 255.0)


@pytest.mark.skipif(not bundled_digits_available(), reason="bundled digits not installed")
def test_bundled_digits():
    ds = load_bundled_digits("center_column")
    assert len(ds) == 5000 and ds.inputs.shape == (5000, 28)
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 500))
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0


def test_synthetic_digits_and_split():
    ds = synthetic_digits(300, seed=0, corruption="center_column")
    assert ds.inputs.shape == (300, 28) and set(np.unique(ds.labels)) <= set(range(10))
    tr, te = train_test_split(ds, 60, seed=0)
    assert len(tr) + len(te) == 300
    assert abs(len(te) - 60) <= 10
    assert np.array_equal(synthetic_digits(300, seed=0).images, synthetic_digits(300, seed=0).images)
