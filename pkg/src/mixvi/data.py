"""Datasets: the toy generator and its exact posterior, IDX files, handwritten digits."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

from .distributions import rng_stream


class DataFormatError(ValueError):
    """Malformed or truncated data file."""


# ---------------------------------------------------------------------------
# toy data


@dataclass
class ToyDataset:
    x: np.ndarray  # [N, 2]
    noise_var: float
    seed: int

    def __len__(self) -> int:
        return len(self.x)


def generate_toy(N: int = 1000, noise_var: float = 0.05, seed: int = 0, dim: int = 2) -> ToyDataset:
    """z ~ N(0, I), x ~ N(|z|, noise_var I)."""
    rng = rng_stream(seed, 100)
    z = rng.standard_normal((N, dim))
    x = np.abs(z) + math.sqrt(noise_var) * rng.standard_normal((N, dim))
    return ToyDataset(x, noise_var, seed)


def toy_log_evidence(x: np.ndarray, noise_var: float) -> np.ndarray:
    """Exact log p(x) of the toy model, one value per row.

    Coordinates are independent; for each one |z| is half-normal, which
    gives p(x) = 2 N(x; 0, 1 + s2) Phi(x / sqrt(s2 (1 + s2))).
    """
    x = np.asarray(x, dtype=np.float64)
    v = 1.0 + noise_var
    per = math.log(2.0) - 0.5 * (math.log(2 * math.pi * v) + x**2 / v) + log_ndtr(x / math.sqrt(noise_var * v))
    return per.sum(axis=-1)


def toy_posterior_grid(x, noise_var: float, lo: float = -3.0, hi: float = 3.0, n: int = 400):
    """Posterior density of the 2-d toy model on an n x n grid.

    Returns (grid, density) with grid of length n and density[i, j] at
    (grid[i], grid[j]), normalized by trapezoidal quadrature.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.linspace(lo, hi, n)
    z1, z2 = np.meshgrid(g, g, indexing="ij")
    logd = -0.5 * (z1**2 + z2**2) - 0.5 / noise_var * ((x[0] - np.abs(z1)) ** 2 + (x[1] - np.abs(z2)) ** 2)
    dens = np.exp(logd - logd.max())
    dens /= np.trapezoid(np.trapezoid(dens, g, axis=1), g)
    return g, dens


def sample_toy_posterior_grid(x, noise_var: float, n: int, rng: np.random.Generator, grid_n: int = 400) -> np.ndarray:
    """Draws from the grid posterior (cell centres jittered uniformly)."""
    g, dens = toy_posterior_grid(x, noise_var, n=grid_n)
    p = dens.ravel() / dens.sum()
    idx = rng.choice(p.size, size=n, p=p)
    h = g[1] - g[0]
    i, j = np.unravel_index(idx, dens.shape)
    return np.stack([g[i], g[j]], axis=-1) + h * (rng.random((n, 2)) - 0.5)


# ---------------------------------------------------------------------------
# IDX files


IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_CODES = {np.dtype(v).str.lstrip("<>|"): k for k, v in IDX_DTYPES.items()}


def _open(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    try:
        with _open(path) as f:
            buf = f.read()
    except (OSError, EOFError) as err:
        if isinstance(err, FileNotFoundError):
            raise
        raise DataFormatError(f"{path}: unreadable IDX file ({err})") from err
    return parse_idx(buf, str(path))


def parse_idx(buf: bytes, label: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4:
        raise DataFormatError(f"{label}: truncated header")
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in IDX_DTYPES or ndim == 0:
        raise DataFormatError(f"{label}: bad magic number 0x{buf[:4].hex()}")
    off = 4 + 4 * ndim
    if len(buf) < off:
        raise DataFormatError(f"{label}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:off])
    dtype = np.dtype(IDX_DTYPES[code])
    count = int(np.prod(dims))
    if len(buf) - off < count * dtype.itemsize:
        raise DataFormatError(f"{label}: truncated payload ({len(buf) - off} of {count * dtype.itemsize} bytes)")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.asarray(array)
    code = IDX_CODES.get(array.dtype.str.lstrip("<>|"))
    if code is None:
        raise DataFormatError(f"dtype {array.dtype} has no IDX code")
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = head + array.astype(IDX_DTYPES[code]).tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


# ---------------------------------------------------------------------------
# digits


class Corruption(str, Enum):
    NONE = "none"
    CENTER_COLUMN = "center_column"


CENTER_COLUMN = 14


@dataclass
class DigitDataset:
    images: np.ndarray  # [N, 28, 28] in [0, 1]
    labels: np.ndarray  # [N]
    corruption: Corruption = Corruption.NONE
    binarize: bool = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def inputs(self) -> np.ndarray:
        """Encoder inputs: the centre column [N, 28] or flattened images [N, 784]."""
        if self.corruption is Corruption.CENTER_COLUMN:
            return self.images[:, :, CENTER_COLUMN]
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx) -> "DigitDataset":
        return DigitDataset(self.images[idx], self.labels[idx], self.corruption, self.binarize)


def prepare_digits(images: np.ndarray, labels: np.ndarray, corruption="none", binarize: bool = False) -> DigitDataset:
    images = np.asarray(images)
    # raw byte images are rescaled; float images are taken to lie in [0, 1]
    images = images / 255.0 if np.issubdtype(images.dtype, np.integer) else images.astype(np.float64)
    if binarize:
        images = (images >= 0.5).astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataFormatError(f"expected [N, 28, 28] images, got {images.shape}")
    if len(images) != len(labels):
        raise DataFormatError("image and label counts differ")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise DataFormatError("labels outside 0..9")
    return DigitDataset(images, labels, Corruption(corruption), binarize)


def load_digits(images_path, labels_path, corruption="none", binarize: bool = False) -> DigitDataset:
    """Read an IDX image/label pair."""
    return prepare_digits(read_idx(images_path), read_idx(labels_path), corruption, binarize)


BUNDLED_IMAGES = "digits5k-images-idx3-ubyte.gz"
BUNDLED_LABELS = "digits5k-labels-idx1-ubyte.gz"


def bundled_digits_available() -> bool:
    root = resources.files("mixvi") / "datasets"
    return (root / BUNDLED_IMAGES).is_file() and (root / BUNDLED_LABELS).is_file()


def load_bundled_digits(corruption="none", binarize: bool = False) -> DigitDataset:
    """The 5000-image handwritten digit subset shipped with the package."""
    root = resources.files("mixvi") / "datasets"
    with resources.as_file(root / BUNDLED_IMAGES) as ip, resources.as_file(root / BUNDLED_LABELS) as lp:
        return load_digits(ip, lp, corruption, binarize)


def synthetic_digits(N: int = 1000, seed: int = 0, corruption="none", binarize: bool = False) -> DigitDataset:
    """Labeled stroke images: each class is a fixed polyline drawn with jitter.

    Offline fallback with real class structure in the centre column.
    """
    rng = rng_stream(seed, 101)
    shapes = _stroke_templates()
    labels = rng.integers(0, 10, size=N)
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    images = np.zeros((N, 28, 28))
    for i, c in enumerate(labels):
        pts = shapes[c] * (1.0 + 0.08 * rng.standard_normal()) + rng.normal(0.0, 0.8, size=2)
        pts = pts + rng.normal(0.0, 0.4, size=pts.shape)
        img = np.zeros((28, 28))
        for a, b in zip(pts[:-1], pts[1:]):
            for s in np.linspace(0.0, 1.0, 12):
                py, px = a + s * (b - a)
                img = np.maximum(img, np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / 2.0))
        images[i] = img
    return prepare_digits(images, labels, corruption, binarize)


def _stroke_templates() -> list[np.ndarray]:
    def ring(cy, cx, ry, rx, a0=0.0, a1=2 * np.pi, n=10):
        a = np.linspace(a0, a1, n)
        return np.stack([cy + ry * np.sin(a), cx + rx * np.cos(a)], axis=-1)

    return [
        ring(14, 14, 9, 6),
        np.array([[6, 12], [5, 14], [23, 14]], dtype=float),
        np.array([[8, 9], [5, 14], [8, 19], [14, 14], [22, 9], [22, 19]], dtype=float),
        np.vstack([ring(9.5, 14, 4.5, 5, -np.pi / 2, np.pi / 2, 6), ring(18.5, 14, 4.5, 5, -np.pi / 2, np.pi / 2, 6)]),
        np.array([[5, 17], [17, 8], [17, 20], [11, 17], [23, 17]], dtype=float),
        np.array([[5, 19], [5, 10], [13, 10], [14, 17], [20, 18], [23, 10]], dtype=float),
        np.vstack([np.array([[5, 17], [12, 10]], dtype=float), ring(17, 14, 5, 5, np.pi, 3 * np.pi, 8)]),
        np.array([[5, 8], [5, 20], [23, 12]], dtype=float),
        np.vstack([ring(9.5, 14, 4.5, 4.5), ring(18.5, 14, 4.5, 5.5)]),
        np.vstack([ring(10, 14, 5, 5), np.array([[10, 19], [23, 17]], dtype=float)]),
    ]


def train_test_split(ds: DigitDataset, n_test: int, seed: int) -> tuple[DigitDataset, DigitDataset]:
    """Class-stratified random split."""
    rng = rng_stream(seed, 102)
    test = []
    for c in range(10):
        idx = np.flatnonzero(ds.labels == c)
        take = int(round(n_test * len(idx) / len(ds)))
        test.extend(rng.permutation(idx)[:take].tolist())
    test_idx = np.sort(np.array(test, dtype=np.int64))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    train_idx = rng.permutation(train_idx)
    return ds.subset(train_idx), ds.subset(test_idx)
