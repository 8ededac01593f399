"""Data model for spectral observations and labels, plus preprocessing.

One observation is a 150x3 "image": 150 frequency bins (10..1500 Hz in
10 Hz steps) by 3 accelerometers, log-magnitude features. Labels are the
octant (0..7) of the box interior containing the sound source. Bundles of
observations are written to disk as a small directory format (see
``save_bundle``) that round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_BINS = 150
N_SENSORS = 3
N_CLASSES = 8
IMAGE_SHAPE = (N_BINS, N_SENSORS)
FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.f32"
LABELS_NAME = "labels.u8"
POSITIONS_NAME = "positions.csv"


@dataclass
class FsaImage:
    """A 150x3 accelerometer-spectrum image.

    ``values`` are log-magnitudes when raw, or affinely rescaled to
    [-1, 1] when ``normalized`` is set.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != IMAGE_SHAPE:
            raise ValueError(
                f"image must have shape {IMAGE_SHAPE}, got {self.values.shape}"
            )
        if self.normalized:
            lo, hi = float(self.values.min()), float(self.values.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(
                    f"normalized image has values outside [-1, 1]: [{lo}, {hi}]"
                )

    def copy(self) -> "FsaImage":
        return FsaImage(self.values.copy(), self.normalized)


@dataclass
class OctantLabel:
    """Source-area label: octant index 0..7 with its 8-dim one-hot vector."""

    index: int

    def __post_init__(self):
        self.index = int(self.index)
        if not 0 <= self.index < N_CLASSES:
            raise ValueError(f"octant index must be in 0..7, got {self.index}")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_CLASSES, dtype=np.float32)
        v[self.index] = 1.0
        return v

    @classmethod
    def from_one_hot(cls, vec) -> "OctantLabel":
        vec = np.asarray(vec)
        if vec.shape != (N_CLASSES,) or not np.isclose(vec.sum(), 1.0):
            raise ValueError("one-hot vector must have 8 entries summing to 1")
        return cls(int(np.argmax(vec)))


@dataclass
class DomainSample:
    """One labeled observation: image, octant, source position, domain tag."""

    image: FsaImage
    label: OctantLabel
    position_mm: np.ndarray
    domain_tag: str

    def __post_init__(self):
        self.position_mm = np.asarray(self.position_mm, dtype=np.float64)
        if self.position_mm.shape != (3,):
            raise ValueError("position must be a 3-vector (mm)")


@dataclass
class DatasetBundle:
    """A list of same-domain samples plus a provenance manifest.

    The manifest is a JSON-safe dict recording the generating configs,
    master seed, counts and (once computed) normalization constants.
    """

    samples: list[DomainSample]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def domain_tag(self) -> str:
        return self.samples[0].domain_tag if self.samples else self.manifest.get("domain_tag", "")

    def images(self) -> np.ndarray:
        """All image values stacked to (N, 150, 3) float32."""
        return np.stack([s.image.values for s in self.samples])

    def label_indices(self) -> np.ndarray:
        return np.array([s.label.index for s in self.samples], dtype=np.int64)

    def one_hot_labels(self) -> np.ndarray:
        return np.stack([s.label.one_hot for s in self.samples])

    def positions(self) -> np.ndarray:
        return np.stack([s.position_mm for s in self.samples])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.label_indices(), minlength=N_CLASSES)

    def subset(self, indices, manifest_extra: dict | None = None) -> "DatasetBundle":
        manifest = json.loads(json.dumps(self.manifest))
        manifest["n_samples"] = len(indices)
        if manifest_extra:
            manifest.update(manifest_extra)
        out = DatasetBundle([self.samples[i] for i in indices], manifest)
        manifest["counts_per_octant"] = out.class_counts().tolist()
        return out

    def equals(self, other: "DatasetBundle") -> bool:
        """Field-by-field equality, bit-exact on image values and positions."""
        if self.manifest != other.manifest or len(self) != len(other):
            return False
        for a, b in zip(self.samples, other.samples):
            if a.label.index != b.label.index or a.domain_tag != b.domain_tag:
                return False
            if not np.array_equal(a.position_mm, b.position_mm):
                return False
            if a.image.normalized != b.image.normalized:
                return False
            if not np.array_equal(a.image.values, b.image.values):
                return False
        return True


@dataclass
class SplitSpec:
    """Hold-out split: ``labeled_fraction`` of each octant goes to train.

    ``stratified=False`` reproduces a plain shuffled split (the 51/13
    arithmetic of the reference experiments) instead of the per-octant one.
    """

    labeled_fraction: float
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ValueError(
                f"labeled_fraction must be in (0, 1), got {self.labeled_fraction}"
            )


def compute_normalization(bundle: DatasetBundle) -> tuple[float, float]:
    """Global (min, max) of the raw values; compute on training data only."""
    vals = bundle.images()
    return float(vals.min()), float(vals.max())


def normalize_image(raw: FsaImage, lo: float, hi: float) -> FsaImage:
    """Affine map [lo, hi] -> [-1, 1], clamping out-of-range values."""
    if not lo < hi:
        raise ValueError(f"degenerate normalization range: lo={lo}, hi={hi}")
    x = raw.values.astype(np.float64)
    y = (x - lo) / (hi - lo) * 2.0 - 1.0
    return FsaImage(np.clip(y, -1.0, 1.0).astype(np.float32), normalized=True)


def denormalize_image(img: FsaImage, lo: float, hi: float) -> FsaImage:
    if not lo < hi:
        raise ValueError(f"degenerate normalization range: lo={lo}, hi={hi}")
    x = img.values.astype(np.float64)
    y = (x + 1.0) / 2.0 * (hi - lo) + lo
    return FsaImage(y.astype(np.float32), normalized=False)


def normalize_bundle(bundle: DatasetBundle, lo: float, hi: float) -> DatasetBundle:
    """Normalize every image; the constants are recorded in the manifest."""
    samples = [
        DomainSample(normalize_image(s.image, lo, hi), s.label, s.position_mm, s.domain_tag)
        for s in bundle.samples
    ]
    manifest = json.loads(json.dumps(bundle.manifest))
    manifest["normalized"] = True
    manifest["normalization"] = {"lo": lo, "hi": hi}
    return DatasetBundle(samples, manifest)


def split_holdout(bundle: DatasetBundle, spec: SplitSpec) -> tuple[DatasetBundle, DatasetBundle]:
    """Deterministic hold-out split into (train, test) bundles."""
    train_idx, test_idx = split_indices(bundle, spec)
    train = bundle.subset(train_idx, {"split": {"role": "train", **_split_meta(spec)}})
    test = bundle.subset(test_idx, {"split": {"role": "test", **_split_meta(spec)}})
    return train, test


def _split_meta(spec: SplitSpec) -> dict:
    return {
        "labeled_fraction": spec.labeled_fraction,
        "seed": spec.seed,
        "stratified": spec.stratified,
    }


def split_indices(bundle: DatasetBundle, spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Index lists underlying ``split_holdout`` (persisted as split.json)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5B117, spec.seed]))
    labels = bundle.label_indices()
    if spec.stratified:
        counts = np.bincount(labels, minlength=N_CLASSES)
        if counts.min() != counts.max():
            raise ValueError(
                f"stratified split requires a class-balanced bundle, counts={counts.tolist()}"
            )
        per_class = int(math.floor(spec.labeled_fraction * counts[0]))
        if per_class < 1:
            raise ValueError(
                f"labeled_fraction {spec.labeled_fraction} leaves no training sample "
                f"for octants of size {counts[0]}"
            )
        train_idx: list[int] = []
        test_idx: list[int] = []
        for k in range(N_CLASSES):
            members = np.flatnonzero(labels == k)
            perm = rng.permutation(len(members))
            chosen = members[perm]
            train_idx.extend(int(i) for i in chosen[:per_class])
            test_idx.extend(int(i) for i in chosen[per_class:])
    else:
        n_train = int(math.floor(spec.labeled_fraction * len(bundle)))
        if n_train < 1 or n_train >= len(bundle):
            raise ValueError(f"labeled_fraction {spec.labeled_fraction} on {len(bundle)} samples is degenerate")
        perm = rng.permutation(len(bundle))
        train_idx = [int(i) for i in perm[:n_train]]
        test_idx = [int(i) for i in perm[n_train:]]
    return sorted(train_idx), sorted(test_idx)


@dataclass
class MaskParams:
    """Rectangle-masking augmentation parameters (area as pixel fraction)."""

    probability: float = 0.5
    area_lo: float = 0.02
    area_hi: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        if not 0.0 <= self.area_lo <= self.area_hi <= 0.2:
            raise ValueError("need 0 <= area_lo <= area_hi <= 0.2")


def sample_mask(rng: np.random.Generator, params: MaskParams) -> tuple[int, int, int, int] | None:
    """Draw one rectangle (r0, h, c0, w) or None when no mask is applied."""
    if rng.random() >= params.probability:
        return None
    area = rng.uniform(params.area_lo, params.area_hi)
    n_target = area * N_BINS * N_SENSORS
    w = int(rng.integers(1, N_SENSORS + 1))
    h = int(np.clip(round(n_target / w), 1, N_BINS))
    r0 = int(rng.integers(0, N_BINS - h + 1))
    c0 = int(rng.integers(0, N_SENSORS - w + 1))
    return r0, h, c0, w


def random_mask_augment(image: FsaImage, rng: np.random.Generator, params: MaskParams) -> FsaImage:
    """With ``params.probability``, zero out one random axis-aligned rectangle.

    The rectangle covers a uniform-random fraction of the 450 pixels in
    [area_lo, area_hi]; fill value 0 is the mid-range of normalized images.
    """
    if not image.normalized:
        raise ValueError("masking operates on normalized images")
    rect = sample_mask(rng, params)
    if rect is None:
        return image.copy()
    r0, h, c0, w = rect
    out = image.values.copy()
    out[r0 : r0 + h, c0 : c0 + w] = 0.0
    return FsaImage(out, normalized=True)


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write the dataset directory format.

    Layout: ``manifest.json`` (configs, seed, counts, normalization,
    format version), ``samples.f32`` (little-endian float32, row-major
    [N, 150, 3]), ``labels.u8`` (one octant index byte per sample) and
    ``positions.csv`` (header ``x_mm,y_mm,z_mm``).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = json.loads(json.dumps(bundle.manifest))
    manifest.setdefault("format_version", FORMAT_VERSION)
    manifest["n_samples"] = len(bundle)
    manifest["n_bins"] = N_BINS
    manifest["n_sensors"] = N_SENSORS
    manifest.setdefault("normalized", any(s.image.normalized for s in bundle.samples))
    manifest.setdefault("normalization", None)
    manifest["counts_per_octant"] = bundle.class_counts().tolist()
    manifest["domain_tag"] = bundle.domain_tag

    values = np.ascontiguousarray(bundle.images(), dtype="<f4")
    values.tofile(directory / SAMPLES_NAME)
    bundle.label_indices().astype(np.uint8).tofile(directory / LABELS_NAME)
    with open(directory / POSITIONS_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_mm", "y_mm", "z_mm"])
        for s in bundle.samples:
            writer.writerow([repr(float(c)) for c in s.position_mm])
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"not a dataset directory (no manifest): {directory}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    n = int(manifest["n_samples"])
    values = np.fromfile(directory / SAMPLES_NAME, dtype="<f4")
    if values.size != n * N_BINS * N_SENSORS:
        raise ValueError(
            f"samples.f32 holds {values.size} floats, expected {n * N_BINS * N_SENSORS}"
        )
    values = values.reshape(n, N_BINS, N_SENSORS)
    labels = np.fromfile(directory / LABELS_NAME, dtype=np.uint8)
    if labels.size != n:
        raise ValueError(f"labels.u8 holds {labels.size} labels, expected {n}")
    positions = []
    with open(directory / POSITIONS_NAME, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["x_mm", "y_mm", "z_mm"]:
            raise ValueError(f"unexpected positions.csv header: {header}")
        for row in reader:
            positions.append([float(v) for v in row])
    if len(positions) != n:
        raise ValueError(f"positions.csv holds {len(positions)} rows, expected {n}")
    normalized = bool(manifest.get("normalized", False))
    tag = manifest.get("domain_tag", "")
    samples = [
        DomainSample(
            FsaImage(values[i], normalized=normalized),
            OctantLabel(int(labels[i])),
            np.asarray(positions[i], dtype=np.float64),
            tag,
        )
        for i in range(n)
    ]
    return DatasetBundle(samples, manifest)


def save_split(path, train_idx, test_idx, spec: SplitSpec) -> None:
    """Persist split membership so downstream stages reproduce it exactly."""
    payload = {
        "train": [int(i) for i in train_idx],
        "test": [int(i) for i in test_idx],
        "spec": _split_meta(spec),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path) -> tuple[list[int], list[int], dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return payload["train"], payload["test"], payload.get("spec", {})
