"""Dataset readers, preprocessing and the two-cluster toy vote generator.

Images are kept channels-last, (B, H, W, C). MNIST is padded to 32x32 and
standardized at load time. smallNORB keeps raw 96x96 bytes from the first
camera; ``preprocess`` turns them into 32x32 network inputs per batch.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp
from scipy.stats import multivariate_normal


class ParseError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ImageBatch:
    images: np.ndarray   # (B, H, W, C)
    labels: np.ndarray   # (B,) int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ImageBatch(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# IDX (big-endian)
# ---------------------------------------------------------------------------

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.str.lstrip("|<>=") : k for k, v in IDX_TYPES.items()}
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw, expected_magic=None):
    """Decode an IDX buffer into an array with the file's native dtype."""
    if len(raw) < 4:
        raise ParseError("truncated IDX header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise ParseError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if magic >> 16 != 0:
        raise ParseError(f"bad IDX magic 0x{magic:08x}: leading bytes must be zero", 0)
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2)
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ParseError("truncated IDX dimension block", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    dtype = IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < end + need:
        raise ParseError(f"truncated IDX payload: need {need} bytes, have {len(raw) - end}", len(raw))
    if len(raw) > end + need:
        raise ParseError("trailing bytes after IDX payload", end + need)
    data = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path, expected_magic=None):
    return parse_idx(_read_bytes(path), expected_magic)


def encode_idx(array):
    array = np.asarray(array)
    key = array.dtype.str.lstrip("|<>=")
    if key not in IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    code = IDX_CODES[key]
    header = struct.pack(">I", (code << 8) | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(IDX_TYPES[code], copy=False).tobytes()


def write_idx(path, array):
    data = encode_idx(array)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# smallNORB binary matrices (little-endian)
# ---------------------------------------------------------------------------

NORB_TYPES = {
    0x1E3D4C55: np.dtype("u1"),
    0x1E3D4C54: np.dtype("<i4"),
    0x1E3D4C51: np.dtype("<f4"),
    0x1E3D4C53: np.dtype("<f8"),
}
NORB_MAGIC = {v.str.lstrip("|<>=") : k for k, v in NORB_TYPES.items()}
NORB_BYTE_MAGIC = 0x1E3D4C55
NORB_INT_MAGIC = 0x1E3D4C54


def parse_norb(raw, expected_magic=None):
    if len(raw) < 8:
        raise ParseError("truncated smallNORB header", len(raw))
    magic, ndim = struct.unpack("<iI", raw[:8])
    magic &= 0xFFFFFFFF
    if magic not in NORB_TYPES:
        raise ParseError(f"bad smallNORB magic 0x{magic:08x}", 0)
    if expected_magic is not None and magic != expected_magic:
        raise ParseError(f"smallNORB magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if ndim > 32:
        raise ParseError(f"implausible smallNORB rank {ndim}", 4)
    stored = max(3, ndim)
    end = 8 + 4 * stored
    if len(raw) < end:
        raise ParseError("truncated smallNORB dimension block", len(raw))
    dims = struct.unpack(f"<{stored}i", raw[8:end])[:ndim]
    if any(d < 0 for d in dims):
        raise ParseError(f"negative smallNORB dimension in {dims}", 8)
    dtype = NORB_TYPES[magic]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < end + need:
        raise ParseError(f"truncated smallNORB payload: need {need} bytes, have {len(raw) - end}", len(raw))
    if len(raw) > end + need:
        raise ParseError("trailing bytes after smallNORB payload", end + need)
    data = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_norb(path, expected_magic=None):
    return parse_norb(_read_bytes(path), expected_magic)


def encode_norb(array):
    array = np.asarray(array)
    key = array.dtype.str.lstrip("|<>=")
    if key not in NORB_MAGIC:
        raise ValueError(f"dtype {array.dtype} has no smallNORB encoding")
    magic = NORB_MAGIC[key]
    dims = list(array.shape) + [1] * max(0, 3 - array.ndim)
    header = struct.pack("<II", magic, array.ndim) + struct.pack(f"<{len(dims)}i", *dims)
    return header + array.astype(NORB_TYPES[magic], copy=False).tobytes()


def write_norb(path, array):
    data = encode_norb(array)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# dataset loaders
# ---------------------------------------------------------------------------

MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}
NORB_FILES = {
    "train_dat": "smallnorb-5x46789x9x18x6x2x96x96-training-dat.mat",
    "train_cat": "smallnorb-5x46789x9x18x6x2x96x96-training-cat.mat",
    "test_dat": "smallnorb-5x01235x9x18x6x2x96x96-testing-dat.mat",
    "test_cat": "smallnorb-5x01235x9x18x6x2x96x96-testing-cat.mat",
}


def _locate(directory, names):
    if isinstance(names, str):
        names = (names,)
    for name in names:
        for candidate in (name, name + ".gz"):
            path = os.path.join(directory, candidate)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"none of {', '.join(names)} (optionally .gz) found in {directory}")


def standardize(images):
    """Per-image zero mean and unit deviation, computed in float64.

    A constant image has no spread; it maps to all zeros.
    """
    x = np.asarray(images, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / np.where(std > 0, std, 1.0)).astype(np.float32)


def pad_to(images, size):
    """Zero-pad (B, H, W[, C]) images symmetrically to ``size`` x ``size``."""
    h, w = images.shape[1:3]
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    pad = [(0, 0), (top, size - h - top), (left, size - w - left)] + [(0, 0)] * (images.ndim - 3)
    return np.pad(images, pad)


def load_mnist(path, size=32):
    """Read the four IDX files in ``path``; returns (train, test) batches of
    (B, size, size, 1) standardized float32 images."""
    raw = {key: read_idx(_locate(path, names),
                         MNIST_IMAGE_MAGIC if key.endswith("images") else MNIST_LABEL_MAGIC)
           for key, names in MNIST_FILES.items()}
    out = []
    for split in ("train", "test"):
        images, labels = raw[f"{split}_images"], raw[f"{split}_labels"]
        if len(images) != len(labels):
            raise ValueError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
        # statistics cover the padded frame the network actually sees
        x = standardize(pad_to(images, size)[..., None])
        out.append(ImageBatch(x, labels.astype(np.int64)))
    return tuple(out)


def load_smallnorb(path):
    """Read the official training and testing files; returns (train, test)
    batches of raw (B, 96, 96, 1) uint8 first-camera images."""
    out = []
    for split in ("train", "test"):
        dat = read_norb(_locate(path, NORB_FILES[f"{split}_dat"]), NORB_BYTE_MAGIC)
        cat = read_norb(_locate(path, NORB_FILES[f"{split}_cat"]), NORB_INT_MAGIC)
        if dat.ndim != 4 or dat.shape[1] != 2:
            raise ParseError(f"smallNORB {split} images have shape {dat.shape}, expected (N, 2, H, W)", 8)
        if cat.shape != (dat.shape[0],):
            raise ParseError(f"smallNORB {split} labels have shape {cat.shape}, expected ({dat.shape[0]},)", 8)
        out.append(ImageBatch(dat[:, 0, :, :, None], cat.astype(np.int64)))
    return tuple(out)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

BRIGHTNESS_DELTA = 0.125
CONTRAST_RANGE = (0.5, 1.5)


def resize_bilinear(images, size):
    """Bilinear resize of (B, H, W, C) with pixel-centre alignment; a 2x
    reduction averages each 2x2 block."""
    b, h, w, c = images.shape
    zoom = (1, size / h, size / w, 1)
    out = ndimage.zoom(np.asarray(images, dtype=np.float32), zoom, order=1, grid_mode=True, mode="nearest")
    return out


def preprocess(images, mode, rng=None, resize=48, crop=32):
    """smallNORB source images -> (B, crop, crop, 1) network inputs.

    Standardize, resize to ``resize`` x ``resize``, then crop. ``train`` takes
    a random crop per image and applies brightness and contrast jitter;
    ``eval`` takes the centre crop and nothing else.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[..., None]
    x = resize_bilinear(standardize(x), resize)
    b = x.shape[0]
    if mode == "eval":
        o = (resize - crop) // 2
        return np.ascontiguousarray(x[:, o:o + crop, o:o + crop])
    if rng is None:
        raise ValueError("train-mode preprocessing needs an rng")
    oy = rng.integers(0, resize - crop + 1, size=b)
    ox = rng.integers(0, resize - crop + 1, size=b)
    out = np.stack([x[i, oy[i]:oy[i] + crop, ox[i]:ox[i] + crop] for i in range(b)])
    delta = rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA, size=(b, 1, 1, 1))
    factor = rng.uniform(*CONTRAST_RANGE, size=(b, 1, 1, 1))
    out = out + delta
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    return ((out - mean) * factor + mean).astype(np.float32)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def stratified_split(labels, fraction=0.1, seed=0):
    """Hold out ``fraction`` of every class. Returns sorted (keep, held) indices."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n = int(round(fraction * len(idx)))
        held.append(rng.permutation(idx)[:n])
    held = np.sort(np.concatenate(held)) if held else np.zeros(0, np.int64)
    keep = np.setdiff1d(np.arange(len(labels)), held)
    return keep, held


def random_subset(n_total, n, seed=0):
    """First ``n`` entries of a seeded permutation, sorted."""
    if n is None or n >= n_total:
        return np.arange(n_total)
    return np.sort(np.random.default_rng(seed).permutation(n_total)[:n])


# ---------------------------------------------------------------------------
# toy vote clouds
# ---------------------------------------------------------------------------

@dataclass
class ToyVoteCloud:
    votes: np.ndarray        # (n, 2)
    activations: np.ndarray  # (n,)
    clusters: np.ndarray     # (n,) generating cluster, 0 or 1


TOY_MEANS = ((3.0 * np.cos(np.radians(20)), 3.0 * np.sin(np.radians(20))),
             (3.0 * np.cos(np.radians(70)), 3.0 * np.sin(np.radians(70))))
TOY_COVARIANCE = ((0.09, 0.0), (0.0, 0.09))


def _check_covariance(cov):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise ValueError(f"covariance must be a symmetric 2x2 matrix, got {cov.tolist()}")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"covariance {cov.tolist()} is not positive definite") from None
    return cov


def gen_toy_votes(seed=0, means=TOY_MEANS, covariances=(TOY_COVARIANCE, TOY_COVARIANCE),
                  scale=4.0, n=100, normalize=False):
    """Sample ``n // 2`` votes from each of two Gaussians.

    A vote's activation is the posterior probability (equal priors) of the
    cluster that generated it, evaluated with both covariances multiplied by
    ``scale``. With ``normalize`` the activations are divided by their sum.
    """
    if scale <= 1:
        raise ValueError("scale must exceed 1")
    if len(means) != 2 or len(covariances) != 2:
        raise ValueError("exactly two clusters are required")
    means = [np.asarray(m, dtype=np.float64) for m in means]
    covs = [_check_covariance(c) for c in covariances]
    rng = np.random.default_rng(seed)
    half = n // 2
    counts = (half, n - half)
    votes = np.concatenate([rng.multivariate_normal(m, c, size=k) for m, c, k in zip(means, covs, counts)])
    clusters = np.repeat([0, 1], counts)
    logp = np.stack([multivariate_normal(m, scale * c).logpdf(votes) for m, c in zip(means, covs)], -1)
    post = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
    acts = np.maximum(post[np.arange(n), clusters], np.finfo(np.float64).tiny)
    if normalize:
        acts = acts / acts.sum()
    return ToyVoteCloud(votes, acts, clusters)


def write_toy_cloud(path, cloud):
    with open(path, "w") as fh:
        fh.write("x\ty\tactivation\tcluster\n")
        for (x, y), a, k in zip(cloud.votes, cloud.activations, cloud.clusters):
            fh.write(f"{x!r}\t{y!r}\t{a!r}\t{k}\n")
