"""Noisy handwritten-digit benchmark: generation, class-role splits, persistence.

The benchmark takes a source corpus of labeled 28x28 digit images and produces
84x84 images where the digit is rescaled, placed at a random position over a
zero background, and buried in per-image Gaussian noise. Samples are assigned
one of three roles: normal (the single correct digit), known anomaly (one digit
available at training time), or unknown anomaly (everything else, seen only in
the evaluation partition).
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .imageops import bilinear_resize

MANIFEST_SCHEMA_VERSION = 1

# Salts for per-sample RNG streams, so every noisy image is a pure function of
# (seed, source partition, source index) and never of which digits were requested.
_SALT_PARTITION = 0
_SALT_TRAIN = 1
_SALT_TEST = 2


class CorpusError(ValueError):
    """Raised for malformed source corpora, manifests, or on-disk corruption."""


class ClassRole(str, Enum):
    NORMAL = "normal"
    KNOWN_ANOMALY = "known_anomaly"
    UNKNOWN_ANOMALY = "unknown_anomaly"


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One grayscale image with its digit label and a corpus-unique id."""

    pixels: np.ndarray  # (H, W) uint8
    digit_label: int
    sample_id: str

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.digit_label == other.digit_label
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class SplitSpec:
    """Which digit is normal, which anomaly digit is known, and how to partition."""

    normal_digit: int = 0
    known_anomaly_digit: int = 3
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.normal_digit == self.known_anomaly_digit:
            raise ValueError(
                f"normal digit and known-anomaly digit must differ, both are {self.normal_digit}"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class NoiseConfig:
    """Noisy-frame recipe: digit rescale range, placement frame, noise law."""

    sigma_mean: float = 40.0
    sigma_std: float = 30.0
    scale_min: int = 28
    scale_max: int = 84
    output_size: int = 84

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max <= self.output_size:
            raise ValueError(
                f"need 0 < scale_min <= scale_max <= output_size, got "
                f"{self.scale_min}, {self.scale_max}, {self.output_size}"
            )


def role_for_digit(digit: int, spec: SplitSpec) -> ClassRole:
    if digit == spec.normal_digit:
        return ClassRole.NORMAL
    if digit == spec.known_anomaly_digit:
        return ClassRole.KNOWN_ANOMALY
    return ClassRole.UNKNOWN_ANOMALY


@dataclass
class DatasetSplit:
    """Generated benchmark: training lists plus the full evaluation set."""

    spec: SplitSpec
    noise: NoiseConfig
    train_normal: list[ImageSample] = field(default_factory=list)
    train_known_anomaly: list[ImageSample] = field(default_factory=list)
    eval_all: list[ImageSample] = field(default_factory=list)

    def role_of(self, sample: ImageSample) -> ClassRole:
        return role_for_digit(sample.digit_label, self.spec)

    def counts_by_role(self) -> dict[str, int]:
        counts = {role.value: 0 for role in ClassRole}
        for s in self.eval_all:
            counts[self.role_of(s).value] += 1
        return counts


@dataclass(frozen=True)
class SourceCorpus:
    """Raw 28x28 digit corpus. ``partition`` marks train rows (1) vs test rows (0);
    None means the source has no standard partition and one is derived from
    SplitSpec.train_fraction. ``source_indices`` are positions in the original
    corpus and survive subsetting, keeping per-sample noise seeds stable."""

    images: np.ndarray  # (N, 28, 28) uint8
    labels: np.ndarray  # (N,) int64
    partition: np.ndarray | None = None  # (N,) uint8, 1=train, 0=test
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 3 or len(self.images) != len(self.labels):
            raise CorpusError(f"corpus images/labels mismatch: {self.images.shape} vs {self.labels.shape}")
        if self.source_indices is None:
            object.__setattr__(self, "source_indices", np.arange(len(self.labels)))

    def subset(self, mask: np.ndarray) -> "SourceCorpus":
        return SourceCorpus(
            images=self.images[mask],
            labels=self.labels[mask],
            partition=None if self.partition is None else self.partition[mask],
            source_indices=self.source_indices[mask],
        )


def _sample_rng(seed: int, salt: int, source_index: int) -> np.random.Generator:
    return np.random.default_rng((seed, salt, int(source_index)))


def _compose_float_frame(clean: np.ndarray, config: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale, place, and noise a clean digit; returns the pre-quantization float frame.

    Draw order is fixed (side, top, left, sigma, noise field) so streams are stable.
    """
    clean = np.asarray(clean)
    if clean.ndim != 2 or clean.shape[0] != clean.shape[1] or clean.shape[0] < 1:
        raise ValueError(f"expected a square 2-D clean digit image, got shape {clean.shape}")
    out = config.output_size
    side = int(rng.integers(config.scale_min, config.scale_max + 1))
    digit = bilinear_resize(clean.astype(np.float64), side, side)
    top = int(rng.integers(0, out - side + 1))
    left = int(rng.integers(0, out - side + 1))
    frame = np.zeros((out, out), dtype=np.float64)
    frame[top : top + side, left : left + side] = digit
    sigma = max(0.0, float(rng.normal(config.sigma_mean, config.sigma_std)))
    frame += rng.standard_normal((out, out)) * sigma
    return frame


def generate_noisy_sample(
    clean: np.ndarray,
    config: NoiseConfig,
    rng: np.random.Generator,
    *,
    digit_label: int = 0,
    sample_id: str = "sample-0",
) -> ImageSample:
    """Build one noisy benchmark image from a clean digit (see module docstring)."""
    frame = _compose_float_frame(clean, config, rng)
    pixels = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    return ImageSample(pixels=pixels, digit_label=int(digit_label), sample_id=sample_id)


def partition_source(corpus: SourceCorpus, train_fraction: float, seed: int) -> SourceCorpus:
    """Assign a train/test partition to an unpartitioned corpus.

    Stratified per digit with a seeded shuffle; depends only on (seed,
    train_fraction), never on which digits a split later requests.
    """
    if corpus.partition is not None:
        return corpus
    rng = np.random.default_rng((seed, _SALT_PARTITION))
    partition = np.zeros(len(corpus.labels), dtype=np.uint8)
    for digit in np.unique(corpus.labels):
        idx = np.flatnonzero(corpus.labels == digit)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1)
        partition[idx[:n_train]] = 1
    return SourceCorpus(
        images=corpus.images,
        labels=corpus.labels,
        partition=partition,
        source_indices=corpus.source_indices,
    )


def build_splits(corpus: SourceCorpus, spec: SplitSpec, config: NoiseConfig) -> DatasetSplit:
    """Generate the noisy benchmark split for one (normal, known-anomaly) digit pair.

    Training lists hold noisy versions of train-partition images of the two
    requested digits; the evaluation set holds noisy versions of the entire test
    partition. Every noisy image is seeded by (spec.seed, partition, source
    index), so the normal and evaluation sets are bitwise identical across
    different known-anomaly choices.
    """
    corpus = partition_source(corpus, spec.train_fraction, spec.seed)
    train_mask = corpus.partition == 1
    for digit in (spec.normal_digit, spec.known_anomaly_digit):
        if not np.any(corpus.labels[train_mask] == digit):
            raise CorpusError(f"digit {digit} is absent from the train partition")
    if not np.any(~train_mask):
        raise CorpusError("corpus has an empty test partition")

    def noisy(i: int, salt: int, tag: str) -> ImageSample:
        src = int(corpus.source_indices[i])
        return generate_noisy_sample(
            corpus.images[i],
            config,
            _sample_rng(spec.seed, salt, src),
            digit_label=int(corpus.labels[i]),
            sample_id=f"{tag}-{src:05d}",
        )

    split = DatasetSplit(spec=spec, noise=config)
    for i in np.flatnonzero(train_mask):
        label = int(corpus.labels[i])
        if label == spec.normal_digit:
            split.train_normal.append(noisy(i, _SALT_TRAIN, "train"))
        elif label == spec.known_anomaly_digit:
            split.train_known_anomaly.append(noisy(i, _SALT_TRAIN, "train"))
    for i in np.flatnonzero(~train_mask):
        split.eval_all.append(noisy(i, _SALT_TEST, "test"))
    return split


# ---------------------------------------------------------------------------
# Persistence: per-sample 8-bit grayscale PNGs plus a JSON manifest.
# ---------------------------------------------------------------------------

_SPLIT_FIELDS = ("train_normal", "train_known_anomaly", "eval_all")


def _read_image_file(path: Path) -> bytes:
    # Single chokepoint for corpus image reads; tests audit it for leakage.
    return Path(path).read_bytes()


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_corpus(split: DatasetSplit, path: str | Path) -> Path:
    """Persist a split as PNGs plus a versioned manifest with per-image digests."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    digests = []
    for field_name in _SPLIT_FIELDS:
        for sample in getattr(split, field_name):
            rel = f"images/{sample.sample_id}.png"
            data = _png_bytes(sample.pixels)
            (root / rel).write_bytes(data)
            digest = hashlib.sha256(data).hexdigest()
            digests.append(digest)
            entries.append(
                {
                    "sample_id": sample.sample_id,
                    "digit_label": sample.digit_label,
                    "role": split.role_of(sample).value,
                    "split": field_name,
                    "path": rel,
                    "sha256": digest,
                }
            )
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "split_spec": {
            "normal_digit": split.spec.normal_digit,
            "known_anomaly_digit": split.spec.known_anomaly_digit,
            "train_fraction": split.spec.train_fraction,
            "seed": split.spec.seed,
        },
        "noise_config": {
            "sigma_mean": split.noise.sigma_mean,
            "sigma_std": split.noise.sigma_std,
            "scale_min": split.noise.scale_min,
            "scale_max": split.noise.scale_max,
            "output_size": split.noise.output_size,
        },
        "samples": entries,
        "corpus_checksum": hashlib.sha256("".join(digests).encode()).hexdigest(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def corpus_checksum(path: str | Path) -> str:
    manifest = _load_manifest(Path(path))
    return manifest["corpus_checksum"]


def _load_manifest(root: Path) -> dict:
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise CorpusError(
            f"manifest schema_version {version!r} unsupported (expected {MANIFEST_SCHEMA_VERSION})"
        )
    return manifest


def load_corpus(path: str | Path, *, include_eval: bool = True) -> DatasetSplit:
    """Load a saved split; verifies per-image digests and the corpus checksum.

    With include_eval=False only the training lists are read (no evaluation
    file is opened), which training commands use to keep the evaluation set
    untouched.
    """
    root = Path(path)
    manifest = _load_manifest(root)
    spec = SplitSpec(**manifest["split_spec"])
    noise = NoiseConfig(**manifest["noise_config"])
    split = DatasetSplit(spec=spec, noise=noise)
    for entry in manifest["samples"]:
        if entry["split"] == "eval_all" and not include_eval:
            continue
        data = _read_image_file(root / entry["path"])
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CorpusError(f"checksum mismatch for {entry['path']}: corpus is corrupt")
        pixels = np.asarray(Image.open(io.BytesIO(data)), dtype=np.uint8)
        sample = ImageSample(pixels=pixels, digit_label=int(entry["digit_label"]), sample_id=entry["sample_id"])
        getattr(split, entry["split"]).append(sample)
        if role_for_digit(sample.digit_label, spec).value != entry["role"]:
            raise CorpusError(f"role mismatch for {entry['sample_id']}: manifest is inconsistent")
    if include_eval:
        digests = "".join(e["sha256"] for e in manifest["samples"])
        if hashlib.sha256(digests.encode()).hexdigest() != manifest["corpus_checksum"]:
            raise CorpusError("corpus_checksum does not match the stored images")
    return split


# ---------------------------------------------------------------------------
# Source-corpus loaders: CSV (784 pixels + label), keras-style NPZ, IDX files.
# ---------------------------------------------------------------------------


def _open_maybe_gzip(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def load_csv_corpus(path: str | Path, label_column: str = "auto") -> SourceCorpus:
    """Rows of 28x28 pixel values plus one label column (first or last).

    ``label_column`` is "first", "last", or "auto"; auto picks the end column
    whose mean looks like digit labels (~4.5) rather than corner pixels (~0).
    Returns an unpartitioned corpus.
    """
    text = _open_maybe_gzip(Path(path)).decode()
    first_line = text[: text.find("\n")]
    skip = 1 if any(c.isalpha() for c in first_line) else 0
    arr = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=skip)
    if arr.ndim != 2 or arr.shape[1] != 785:
        raise CorpusError(f"expected 785 columns (784 pixels + label), got {arr.shape}")
    if label_column == "auto":
        label_column = "first" if abs(arr[:, 0].mean() - 4.5) < abs(arr[:, -1].mean() - 4.5) else "last"
    if label_column == "first":
        labels, pixels = arr[:, 0], arr[:, 1:]
    elif label_column == "last":
        labels, pixels = arr[:, -1], arr[:, :-1]
    else:
        raise ValueError(f"label_column must be first/last/auto, got {label_column!r}")
    images = np.clip(pixels, 0, 255).astype(np.uint8).reshape(-1, 28, 28)
    return SourceCorpus(images=images, labels=labels.astype(np.int64))


def load_npz_corpus(path: str | Path) -> SourceCorpus:
    """Keras-style NPZ with x_train/y_train/x_test/y_test (or images/labels)."""
    with np.load(Path(path)) as z:
        if {"x_train", "y_train", "x_test", "y_test"} <= set(z.files):
            images = np.concatenate([z["x_train"], z["x_test"]]).astype(np.uint8)
            labels = np.concatenate([z["y_train"], z["y_test"]]).astype(np.int64)
            partition = np.concatenate(
                [np.ones(len(z["y_train"]), dtype=np.uint8), np.zeros(len(z["y_test"]), dtype=np.uint8)]
            )
            return SourceCorpus(images=images, labels=labels, partition=partition)
        if {"images", "labels"} <= set(z.files):
            return SourceCorpus(images=z["images"].astype(np.uint8), labels=z["labels"].astype(np.int64))
    raise CorpusError(f"{path}: expected x_train/y_train/x_test/y_test or images/labels arrays")


def _read_idx(path: Path) -> np.ndarray:
    data = _open_maybe_gzip(path)
    magic, = struct.unpack(">i", data[:4])
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}i", data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    return arr.reshape(dims)


def load_idx_corpus(path: str | Path) -> SourceCorpus:
    """Directory with the four standard IDX files (optionally gzipped)."""
    root = Path(path)

    def find(stem: str) -> Path:
        for suffix in ("", ".gz"):
            p = root / f"{stem}{suffix}"
            if p.is_file():
                return p
        raise CorpusError(f"missing {stem} under {root}")

    x_train = _read_idx(find("train-images-idx3-ubyte"))
    y_train = _read_idx(find("train-labels-idx1-ubyte"))
    x_test = _read_idx(find("t10k-images-idx3-ubyte"))
    y_test = _read_idx(find("t10k-labels-idx1-ubyte"))
    images = np.concatenate([x_train, x_test])
    labels = np.concatenate([y_train, y_test]).astype(np.int64)
    partition = np.concatenate(
        [np.ones(len(y_train), dtype=np.uint8), np.zeros(len(y_test), dtype=np.uint8)]
    )
    return SourceCorpus(images=images, labels=labels, partition=partition)


def load_source_corpus(path: str | Path, label_column: str = "auto") -> SourceCorpus:
    """Dispatch on path type: IDX directory, .npz file, or .csv/.csv.gz file."""
    p = Path(path)
    if not p.exists():
        raise CorpusError(f"source corpus not found: {p}")
    if p.is_dir():
        return load_idx_corpus(p)
    if p.suffix == ".npz":
        return load_npz_corpus(p)
    if p.name.endswith((".csv", ".csv.gz")):
        return load_csv_corpus(p, label_column=label_column)
    raise CorpusError(f"unrecognized source corpus format: {p}")


def cap_source(
    corpus: SourceCorpus,
    spec_seed_fraction: tuple[int, float] | None = None,
    max_train_per_digit: int | None = None,
    max_eval_per_digit: int | None = None,
) -> SourceCorpus:
    """Keep at most the first N images per digit and partition (desk-scale profiles).

    The corpus is partitioned first (if needed) so caps apply per partition;
    original source indices are preserved, keeping noise streams unchanged.
    """
    if max_train_per_digit is None and max_eval_per_digit is None:
        return corpus
    if corpus.partition is None:
        if spec_seed_fraction is None:
            raise ValueError("capping an unpartitioned corpus needs (seed, train_fraction)")
        seed, fraction = spec_seed_fraction
        corpus = partition_source(corpus, fraction, seed)
    keep = np.zeros(len(corpus.labels), dtype=bool)
    for digit in np.unique(corpus.labels):
        for part, cap in ((1, max_train_per_digit), (0, max_eval_per_digit)):
            idx = np.flatnonzero((corpus.labels == digit) & (corpus.partition == part))
            keep[idx if cap is None else idx[:cap]] = True
    return corpus.subset(keep)
