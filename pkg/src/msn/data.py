"""Dataset acquisition, preprocessing, synthetic data, and batching.

The preprocessing chain is global contrast normalization, then ZCA whitening
fitted on the training split, then horizontal flips at batch time (training
only). CIFAR-10 arrives as the canonical binary archive: 3,073-byte records,
one label byte followed by 1,024 bytes each of R, G, B planes in row-major
order, 10,000 records per file.
"""

from __future__ import annotations

import hashlib
import json
import tarfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
# Digest of the canonical archive; override via config/flag if upstream changes.
CIFAR10_SHA256 = "c4a38c50a1bc5f3a1c5537f2155ab9d68f9f25eb1ed8d9ddda3db29a59bca1dd"
CIFAR10_SUBDIR = "cifar-10-batches-bin"
RECORD_BYTES = 3073
RECORDS_PER_FILE = 10_000
CIFAR10_FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE  # 30,730,000

CIFAR10_TRAIN_FILES = tuple(f"{CIFAR10_SUBDIR}/data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = (f"{CIFAR10_SUBDIR}/test_batch.bin",)
CIFAR10_EXPECTED = tuple(
    (name, CIFAR10_FILE_BYTES) for name in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES)


class DigestMismatchError(RuntimeError):
    """Archive content does not match the pinned digest."""

    def __init__(self, expected: str, actual: str):
        super().__init__(f"archive digest mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class DownloadError(RuntimeError):
    """Network-level failure; retryable."""


class DatasetFormatError(ValueError):
    """Malformed dataset bytes (truncation, bad label, wrong sizes)."""


@dataclass
class LabeledDataset:
    """Images (N, H, W, C) with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be rank 4, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "LabeledDataset":
        return LabeledDataset(images=self.images[indices], labels=self.labels[indices],
                              num_classes=self.num_classes, split=self.split)


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

def _sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _stamp_path(dest: Path, name: str) -> Path:
    return dest / f".verified-{name}"


def _files_ok(dest: Path, expected) -> bool:
    return all((dest / rel).is_file() and (dest / rel).stat().st_size == size
               for rel, size in expected)


def _download(url: str, target: Path, retries: int = 3) -> None:
    last = None
    for attempt in range(retries):
        try:
            with urllib.request.urlopen(url, timeout=60) as resp, open(target, "wb") as out:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    out.write(chunk)
            return
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = exc
            time.sleep(min(2.0 ** attempt, 8.0))
    raise DownloadError(f"could not download {url}: {last}")


def _safe_extract(archive: Path, dest: Path) -> None:
    with tarfile.open(archive, "r:gz") as tar:
        for member in tar.getmembers():
            target = (dest / member.name).resolve()
            if not str(target).startswith(str(dest.resolve())):
                raise DatasetFormatError(f"archive member escapes dest: {member.name}")
        tar.extractall(dest)


def fetch_dataset(dest, name: str = "cifar10", url: str | None = None,
                  sha256: str | None = None, expected_files=None,
                  retries: int = 3) -> str:
    """Download, digest-verify, and extract a dataset archive into ``dest``.

    Idempotent: when the stamp and all expected files are already in place
    the network is never touched. Returns "already-verified" or "fetched".
    """
    if name != "cifar10" and expected_files is None:
        raise ValueError(f"unknown dataset {name!r}")
    url = url or CIFAR10_URL
    sha256 = sha256 or CIFAR10_SHA256
    expected = tuple(expected_files) if expected_files is not None else CIFAR10_EXPECTED

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    stamp = _stamp_path(dest, name)
    if stamp.is_file() and _files_ok(dest, expected):
        recorded = json.loads(stamp.read_text())
        if recorded.get("sha256") == sha256:
            return "already-verified"

    archive = dest / f"{name}.tar.gz"
    if not archive.is_file():
        _download(url, archive, retries=retries)
    actual = _sha256_of(archive)
    if actual != sha256:
        archive.unlink(missing_ok=True)
        raise DigestMismatchError(expected=sha256, actual=actual)
    _safe_extract(archive, dest)
    if not _files_ok(dest, expected):
        missing = [rel for rel, size in expected
                   if not (dest / rel).is_file()
                   or (dest / rel).stat().st_size != size]
        raise DatasetFormatError(f"extracted files missing or mis-sized: {missing}")
    stamp.write_text(json.dumps({"url": url, "sha256": sha256}))
    return "fetched"


def cifar10_files_present(data_dir) -> bool:
    return _files_ok(Path(data_dir), CIFAR10_EXPECTED)


def _parse_cifar_records(raw: bytes, path: str):
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DatasetFormatError(
            f"{path}: {len(raw)} bytes is not a whole number of "
            f"{RECORD_BYTES}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DatasetFormatError(f"{path}: label byte {labels.max()} > 9")
    pixels = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = pixels.astype(np.float32) / 255.0
    return images, labels


def load_cifar10(data_dir) -> tuple:
    """Read the binary batches; returns (train, test) with pixels in [0, 1]."""
    data_dir = Path(data_dir)
    train_parts = []
    for rel in CIFAR10_TRAIN_FILES:
        path = data_dir / rel
        if not path.is_file():
            raise DatasetFormatError(f"missing dataset file {path}")
        train_parts.append(_parse_cifar_records(path.read_bytes(), str(path)))
    test_path = data_dir / CIFAR10_TEST_FILES[0]
    if not test_path.is_file():
        raise DatasetFormatError(f"missing dataset file {test_path}")
    test_images, test_labels = _parse_cifar_records(test_path.read_bytes(), str(test_path))
    train = LabeledDataset(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
        num_classes=10, split="train")
    test = LabeledDataset(images=test_images, labels=test_labels,
                          num_classes=10, split="test")
    return train, test


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def global_contrast_normalize(images: np.ndarray, guard: float = 1e-8) -> np.ndarray:
    """Per image: subtract the scalar mean, scale deviations to unit RMS."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    centered = flat - flat.mean(axis=1, keepdims=True)
    rms = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    out = centered / np.maximum(rms, guard)
    return out.reshape(images.shape).astype(images.dtype)


@dataclass(frozen=True)
class ZcaTransform:
    """Whitening fitted on a training split: mean vector and symmetric matrix."""

    mean: np.ndarray
    matrix: np.ndarray
    eps: float


def zca_fit(images: np.ndarray, eps: float = 1e-2) -> ZcaTransform:
    """Eigendecompose the pixel covariance; matrix = U diag(1/sqrt(l+eps)) U^T."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 samples to fit ZCA, got {len(images)}")
    flat = images.reshape(len(images), -1).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / len(images)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    matrix = (eigvecs * (1.0 / np.sqrt(eigvals + eps))) @ eigvecs.T
    return ZcaTransform(mean=mean, matrix=matrix, eps=eps)


def zca_apply(transform: ZcaTransform, images: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    out = (flat - transform.mean) @ transform.matrix
    return out.reshape(images.shape).astype(images.dtype)


def hflip(images: np.ndarray) -> np.ndarray:
    """Deterministic left-right mirror of every image."""
    return images[:, :, ::-1, :]


def random_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror each image independently with probability 0.5."""
    out = images.copy()
    mask = rng.random(len(images)) < 0.5
    out[mask] = hflip(images[mask])
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def shuffled_epoch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Uniform permutation cut into contiguous slices covering every index once."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def class_aware_batch_indices(labels: np.ndarray, batch_size: int,
                              rng: np.random.Generator) -> np.ndarray:
    """One batch with at least two samples from every represented class.

    Batches of size >= 2c represent every class with samples; smaller batches
    represent a random subset of classes, still two-or-more each.
    """
    if batch_size < 2:
        raise ValueError("class-aware batching needs batch_size >= 2")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    eligible = np.array([c for c in classes if (labels == c).sum() >= 2])
    if eligible.size == 0:
        raise ValueError("no class has two or more samples")
    k = min(len(eligible), batch_size // 2)
    chosen = rng.choice(eligible, size=k, replace=False)
    counts = {int(c): 2 for c in chosen}
    for c in rng.choice(chosen, size=batch_size - 2 * k, replace=True):
        counts[int(c)] += 1
    picks = []
    for c, count in counts.items():
        pool = np.flatnonzero(labels == c)
        picks.append(rng.choice(pool, size=count, replace=count > len(pool)))
    batch = np.concatenate(picks)
    rng.shuffle(batch)
    return batch


def make_batches(dataset: LabeledDataset, batch_size: int, mode: str,
                 rng: np.random.Generator):
    """Iterator of index batches for one epoch-equivalent pass."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if mode == "shuffled":
        yield from shuffled_epoch_indices(len(dataset), batch_size, rng)
    elif mode == "class-aware":
        for _ in range((len(dataset) + batch_size - 1) // batch_size):
            yield class_aware_batch_indices(dataset.labels, batch_size, rng)
    else:
        raise ValueError(f"unknown batching mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_blobs(num_classes: int, per_class: int, image_shape=(8, 8, 1),
                    separation: float = 3.0,
                    rng: np.random.Generator | None = None,
                    noise: float = 1.0) -> LabeledDataset:
    """Gaussian blobs around per-class template images; separable when the
    separation dwarfs the unit noise."""
    if separation <= 0:
        raise ValueError("separation must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    templates = separation * rng.standard_normal((num_classes,) + tuple(image_shape))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels),) + tuple(image_shape))
    order = rng.permutation(len(labels))
    return LabeledDataset(images=images[order].astype(np.float32),
                          labels=labels[order], num_classes=num_classes,
                          split="train")


def subset_per_class(dataset: LabeledDataset, classes, per_class: int,
                     ) -> LabeledDataset:
    """First ``per_class`` samples of each listed class, labels remapped to 0..k-1."""
    classes = list(classes)
    picks = []
    new_labels = []
    for new_label, c in enumerate(classes):
        idx = np.flatnonzero(dataset.labels == c)[:per_class]
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} samples, need {per_class}")
        picks.append(idx)
        new_labels.append(np.full(per_class, new_label, dtype=np.int64))
    return LabeledDataset(images=dataset.images[np.concatenate(picks)],
                          labels=np.concatenate(new_labels),
                          num_classes=len(classes), split=dataset.split)
