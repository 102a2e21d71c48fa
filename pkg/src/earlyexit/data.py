"""Desk-scale datasets, per-user label skew, and IDX file I/O."""
from __future__ import annotations

import configparser
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .tensor_core import DTYPE, ConfigError


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    indices: Optional[np.ndarray] = None  # positions in the source dataset, when derived

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ConfigError(f"dataset images must be a nonempty N x C x H x W array, got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ConfigError("image and label counts differ")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ConfigError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = idx if self.indices is None else self.indices[idx]
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.num_classes, src)

    def unlabelled(self) -> "Dataset":
        return Dataset(self.images, None, self.num_classes, self.indices)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# synthetic task ---------------------------------------------------------------------

class BlobTask:
    """Class-conditional image generator: each class is a fixed arrangement of
    Gaussian blobs; samples are jittered in position and amplitude and corrupted
    with pixel noise.  Images are quantised to the u8 grid so that IDX
    round-trips are exact.
    """

    def __init__(self, num_classes=10, shape=(1, 28, 28), blobs=3, noise=0.6, shift=4, seed=0):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        self.num_classes, self.shape = num_classes, tuple(shape)
        self.noise, self.shift = noise, shift
        rng = np.random.default_rng(seed)
        c, h, w = self.shape
        yy, xx = np.mgrid[0:h, 0:w]
        protos = np.zeros((num_classes, c, h, w))
        for k in range(num_classes):
            for _ in range(blobs):
                cy, cx = rng.uniform(0.25, 0.75, 2) * (h, w)
                s = rng.uniform(0.07, 0.13) * h
                amp = rng.uniform(0.5, 1.0, c)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
                protos[k] += amp[:, None, None] * blob
        self.prototypes = np.clip(protos, 0, 1)

    def sample(self, n: int, seed: int, class_probs=None, labels=None) -> Dataset:
        rng = np.random.default_rng(seed)
        if labels is None:
            labels = rng.choice(self.num_classes, size=n, p=class_probs)
        labels = np.asarray(labels, dtype=np.int64)
        imgs = np.empty((len(labels),) + self.shape)
        shifts = rng.integers(-self.shift, self.shift + 1, size=(len(labels), 2))
        gains = rng.uniform(0.6, 1.2, size=len(labels))
        for j, (k, (dy, dx)) in enumerate(zip(labels, shifts)):
            imgs[j] = np.roll(self.prototypes[k], (dy, dx), axis=(1, 2)) * gains[j]
        imgs += rng.normal(0.0, self.noise, imgs.shape)
        imgs = np.round(np.clip(imgs, 0, 1) * 255) / 255
        return Dataset(imgs.astype(DTYPE), labels, self.num_classes)


# user distributions -----------------------------------------------------------------

@dataclass
class UserDistribution:
    probs: np.ndarray
    center: int
    sigma: float
    seed: Optional[int] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1) > 1e-9:
            raise ConfigError("class probabilities must be nonnegative and sum to 1")

    @property
    def num_classes(self):
        return len(self.probs)


def gaussian_popularity(num_classes: int, center: int, sigma: float) -> np.ndarray:
    """p_c proportional to exp(-d(c, center)^2 / (2 sigma^2)), with d the distance on the class ring."""
    c = np.arange(num_classes)
    d = np.abs(c - center)
    d = np.minimum(d, num_classes - d)
    logits = -(d.astype(np.float64) ** 2) / (2 * sigma * sigma)
    p = np.exp(logits - logits.max())
    return p / p.sum()


def gen_user_distribution(num_classes: int, sigma: float, seed: int, center: Optional[int] = None) -> UserDistribution:
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    if center is None:
        center = int(np.random.default_rng(seed).integers(num_classes))
    return UserDistribution(gaussian_popularity(num_classes, center, sigma), center, sigma, seed)


def _class_pools(dataset: Dataset) -> List[np.ndarray]:
    if dataset.labels is None:
        raise ConfigError("user sampling needs a labelled source dataset")
    return [np.flatnonzero(dataset.labels == k) for k in range(dataset.num_classes)]


def sample_user_dataset(source: Dataset, dist: UserDistribution, n: int, seed: int) -> Dataset:
    """Draw ``n`` samples with replacement: a class from ``dist``, then an image of that class."""
    if n < 1:
        raise ConfigError("need n >= 1")
    if dist.num_classes != source.num_classes:
        raise ConfigError("distribution and dataset disagree on the number of classes")
    pools = _class_pools(source)
    for k in np.flatnonzero(dist.probs > 0):
        if len(pools[k]) == 0:
            raise ConfigError(f"class {k} has nonzero probability but no source images")
    rng = np.random.default_rng(seed)
    classes = rng.choice(dist.num_classes, size=n, p=dist.probs)
    idx = np.array([pools[k][rng.integers(len(pools[k]))] for k in classes], dtype=np.int64)
    return source.subset(idx)


@dataclass
class UserSplit:
    user: int
    dist: UserDistribution
    train: Dataset
    test: Dataset
    calib: Optional[Dataset] = None


def split_holdout(n: int, fraction: float, seed: int):
    """Seeded disjoint (kept, held-out) index arrays with ``round(fraction * n)`` held out."""
    if not 0 <= fraction < 1:
        raise ConfigError("holdout fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return np.sort(order[k:]), np.sort(order[:k])


def partition_users(source: Dataset, n_users: int, samples_per_user: int, sigma: float, seed: int,
                    test_per_user: int = 0, calib_fraction: float = 0.0) -> List[UserSplit]:
    """Give each user a Gaussian-popularity label skew and a disjoint set of images.

    Images are drawn without replacement within a user, so train, calibration
    and test splits never share an image.  Calibration samples come from the
    training part.
    """
    if n_users < 1 or samples_per_user < 1:
        raise ConfigError("need at least one user and one sample per user")
    if not 0 <= test_per_user < samples_per_user:
        raise ConfigError("test_per_user must leave at least one training sample")
    pools = _class_pools(source)
    seeds = np.random.SeedSequence(seed).spawn(n_users)
    users = []
    for u, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        dist = gen_user_distribution(source.num_classes, sigma, seed=None, center=int(rng.integers(source.num_classes)))
        dist.seed = int(ss.generate_state(1)[0])
        counts = rng.multinomial(samples_per_user, dist.probs)
        chosen = []
        for k, cnt in enumerate(counts):
            if cnt > len(pools[k]):
                raise ConfigError(f"user {u} needs {cnt} images of class {k}, only {len(pools[k])} available")
            chosen.append(rng.choice(pools[k], size=cnt, replace=False))
        idx = rng.permutation(np.concatenate(chosen))
        test_idx, rest = idx[:test_per_user], idx[test_per_user:]
        calib = None
        if calib_fraction > 0:
            keep, hold = split_holdout(len(rest), calib_fraction, int(rng.integers(2**31)))
            calib = source.subset(rest[hold]) if len(hold) else None
            rest = rest[keep]
        test = source.subset(test_idx) if test_per_user else None
        users.append(UserSplit(u, dist, source.subset(rest), test, calib))
    return users


def write_manifest(users: Sequence[UserSplit], path) -> None:
    cp = configparser.ConfigParser()
    for us in users:
        sec = {
            "center": str(us.dist.center),
            "sigma": repr(float(us.dist.sigma)),
            "train": " ".join(map(str, us.train.indices.tolist())),
        }
        if us.calib is not None:
            sec["calib"] = " ".join(map(str, us.calib.indices.tolist()))
        if us.test is not None:
            sec["test"] = " ".join(map(str, us.test.indices.tolist()))
        cp[f"user.{us.user}"] = sec
    with open(path, "w") as f:
        cp.write(f)


def read_manifest(path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = {}
    for name in cp.sections():
        sec = cp[name]
        out[name] = {
            "center": sec.getint("center"),
            "sigma": sec.getfloat("sigma"),
            **{k: np.array(sec[k].split(), dtype=np.int64) for k in ("train", "calib", "test") if k in sec},
        }
    return out


# IDX files ------------------------------------------------------------------------

IMAGES_FILE = "images.idx"
LABELS_FILE = "labels.idx"


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ConfigError("IDX writer only supports unsigned byte data")
    header = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 or zero2 or dtype_code != 0x08 or ndim < 1:
        raise DatasetFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx_pair(images_path, labels_path=None, num_classes: Optional[int] = None) -> Dataset:
    """Load IDX image/label files (3-D N x H x W or 4-D N x C x H x W), mapping bytes to [0, 1]."""
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise DatasetFormatError(f"{images_path}: expected 3 or 4 image dimensions, got {imgs.ndim}")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(imgs):
            raise DatasetFormatError("label file does not match image count")
        labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels is not None else 0)
    return Dataset(imgs.astype(DTYPE) / 255.0, labels, k)


def save_dataset(dataset: Dataset, directory) -> None:
    """Write ``images.idx`` and ``labels.idx`` (plus class count) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imgs = np.round(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    if imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    write_idx(d / IMAGES_FILE, imgs)
    if dataset.labels is not None:
        if dataset.num_classes > 256:
            raise ConfigError("u8 labels support at most 256 classes")
        write_idx(d / LABELS_FILE, dataset.labels.astype(np.uint8))
    (d / "classes.txt").write_text(f"{dataset.num_classes}\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    labels = d / LABELS_FILE
    k = int((d / "classes.txt").read_text()) if (d / "classes.txt").exists() else None
    return load_idx_pair(d / IMAGES_FILE, labels if labels.exists() else None, k)
