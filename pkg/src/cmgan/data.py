"""Paired feature datasets: synthetic generation, file formats, splits.

Features are held as float32, the storage precision of both file formats,
so that a write/load round trip is the identity. All randomness comes from
numpy's PCG64 bit generator, seeded explicitly.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyDatasetError,
    FormatError,
    MismatchUnsatisfiableError,
    StratificationError,
)

CMGF_MAGIC = b"CMGF"
CMGF_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, n, d, C


def rng_from_seed(seed: int) -> np.random.Generator:
    """The one PRNG used throughout: numpy PCG64 (platform independent)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(eq=False)
class FeatureDataset:
    image: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    category_names: tuple[str, ...] = ()
    # generator ground truth, present only on synthesized sets
    latent: np.ndarray | None = None
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.text = np.ascontiguousarray(self.text, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 2 or self.text.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("image/text must be 2-D and labels 1-D")
        n = self.labels.shape[0]
        if self.image.shape[0] != n or self.text.shape[0] != n:
            raise ValueError(
                f"row-count mismatch: image {self.image.shape[0]}, text {self.text.shape[0]}, labels {n}")
        if not self.category_names:
            c = int(self.labels.max()) + 1 if n else 0
            self.category_names = tuple(f"class{k}" for k in range(c))
        self.category_names = tuple(self.category_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.category_names)):
            raise ValueError(f"labels must lie in [0, {len(self.category_names)})")
        if not (np.all(np.isfinite(self.image)) and np.all(np.isfinite(self.text))):
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def d_img(self) -> int:
        return int(self.image.shape[1])

    @property
    def d_txt(self) -> int:
        return int(self.text.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.category_names)

    def features(self, modality: str) -> np.ndarray:
        return self.image if modality == "image" else self.text

    def subset(self, indices) -> FeatureDataset:
        idx = np.asarray(indices, dtype=np.int64)
        latent = self.latent[idx] if self.latent is not None else None
        return FeatureDataset(self.image[idx], self.text[idx], self.labels[idx], self.category_names,
                              latent, self.centers)

    def equals(self, other: FeatureDataset) -> bool:
        return (
            self.category_names == other.category_names
            and np.array_equal(self.labels, other.labels)
            and self.image.shape == other.image.shape
            and self.text.shape == other.text.shape
            and self.image.tobytes() == other.image.tobytes()
            and self.text.tobytes() == other.text.tobytes()
        )


# --- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    per_class: int = 250
    latent_dim: int = 16
    d_img: int = 64
    d_txt: int = 64
    sigma_within: float = 0.3
    map_depth: int = 2
    noise_scale: float = 0.5
    seed: int = 0

    def validate(self):
        if self.classes < 2:
            raise MismatchUnsatisfiableError(
                f"synthetic spec has {self.classes} class(es); mismatched-pair sampling needs at least 2")
        for name in ("per_class", "latent_dim", "d_img", "d_txt", "map_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.sigma_within > 0:
            raise ConfigError(f"sigma_within must be > 0, got {self.sigma_within}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _random_map(rng, in_dim, out_dim, depth):
    layers = []
    d = in_dim
    for _ in range(depth):
        # Gain keeps pre-activations near unit scale so tanh stays in its
        # informative range.
        w = _orthogonal(rng, d, out_dim) * math.sqrt(out_dim / d if d < out_dim else 1.0) * 1.5
        b = 0.1 * rng.standard_normal(out_dim)
        layers.append((w, b))
        d = out_dim
    return layers


def _apply_map(layers, x):
    for w, b in layers:
        x = np.tanh(x @ w + b)
    return x


def generate_synthetic(spec: SynthSpec = SynthSpec(), *, degenerate: bool = False) -> FeatureDataset:
    """Sample a paired dataset from a shared class-clustered latent space.

    Each class has a standard-normal latent centre; an instance's latent is
    its centre plus ``sigma_within`` Gaussian spread. Image and text rows
    are two independent fixed random tanh networks of that latent, each
    with additive Gaussian noise. ``degenerate=True`` skips the class-count
    validation (used to build deliberately invalid single-class sets).
    """
    if not degenerate:
        spec.validate()
    rng = rng_from_seed(spec.seed)
    centers = rng.standard_normal((spec.classes, spec.latent_dim))
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    z = centers[labels] + spec.sigma_within * rng.standard_normal((labels.size, spec.latent_dim))
    img_map = _random_map(rng, spec.latent_dim, spec.d_img, spec.map_depth)
    txt_map = _random_map(rng, spec.latent_dim, spec.d_txt, spec.map_depth)
    image = _apply_map(img_map, z) + spec.noise_scale * rng.standard_normal((labels.size, spec.d_img))
    text = _apply_map(txt_map, z) + spec.noise_scale * rng.standard_normal((labels.size, spec.d_txt))
    names = tuple(f"class{k:02d}" for k in range(spec.classes))
    return FeatureDataset(image, text, labels, names, latent=z, centers=centers)


# --- CMGF binary -----------------------------------------------------------

def write_cmgf(path, features: np.ndarray, labels: np.ndarray, n_classes: int):
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.asarray(labels)
    n, d = features.shape
    if n == 0:
        raise EmptyDatasetError("empty dataset: refusing to write a file with n=0")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CMGF_MAGIC, CMGF_VERSION, n, d, n_classes))
        f.write(labels.astype("<u4").tobytes())
        f.write(features.tobytes())


def read_cmgf(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Return ``(features float32 (n, d), labels int64, n_classes)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CMGF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0 (expected {CMGF_MAGIC!r})")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(raw)} < {_HEADER.size}")
    _, version, n, d, c = _HEADER.unpack_from(raw, 0)
    if version != CMGF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if n == 0:
        raise EmptyDatasetError(f"{path}: empty dataset (n=0 declared at byte offset 6)")
    label_off = _HEADER.size
    feat_off = label_off + 4 * n
    row_bytes = 4 * d
    expected = feat_off + n * row_bytes
    if len(raw) < feat_off:
        raise FormatError(
            f"{path}: truncated label block: {n} labels need bytes [{label_off}, {feat_off}), "
            f"file ends at byte offset {len(raw)}")
    if len(raw) < expected:
        rows_present = (len(raw) - feat_off) // row_bytes if row_bytes else 0
        missing_at = feat_off + rows_present * row_bytes
        raise FormatError(
            f"{path}: truncated payload: declared n={n} rows of d={d}, row {rows_present} "
            f"expected at byte offset {missing_at}, file ends at byte offset {len(raw)} "
            f"(need {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after byte offset {expected}")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=label_off).astype(np.int64)
    bad = np.nonzero(labels >= c)[0]
    if bad.size:
        p = int(bad[0])
        raise FormatError(
            f"{path}: label {labels[p]} >= C={c} for row {p} at byte offset {label_off + 4 * p}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=feat_off).reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(feats)):
        p = int(np.nonzero(~np.all(np.isfinite(feats), axis=1))[0][0])
        raise FormatError(f"{path}: non-finite feature in row {p} at byte offset {feat_off + p * row_bytes}")
    return feats, labels, c


# --- CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    # float64 repr of a float32 value is exact and parses back to the same bits.
    return repr(float(v))


def write_csv_features(path, features: np.ndarray, labels: np.ndarray):
    features = np.asarray(features, dtype=np.float32)
    if features.shape[0] == 0:
        raise EmptyDatasetError("empty dataset: refusing to write a file with n=0")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(features.shape[1])])
        for lab, row in zip(labels, features):
            w.writerow([int(lab)] + [_fmt(v) for v in row])


def read_csv_features(path, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty dataset (no header)") from None
        d = len(header) - 1
        if header != ["label"] + [f"f{j}" for j in range(d)]:
            raise FormatError(f"{path}: line 1: header must be label,f0..f{{d-1}}")
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != d + 1:
                raise FormatError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                lab = int(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            if not 0 <= lab < n_classes:
                raise FormatError(f"{path}: line {lineno}: label {lab} outside [0, {n_classes})")
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}: line {lineno}: non-finite feature")
            labels.append(lab)
            rows.append(vals)
    if not labels:
        raise EmptyDatasetError(f"{path}: empty dataset (header only)")
    return np.asarray(rows, dtype=np.float64).astype(np.float32), np.asarray(labels, dtype=np.int64)


# --- manifests -------------------------------------------------------------

def _modality_paths(path: Path, fmt: str) -> tuple[Path, Path]:
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    ext = "cmgf" if fmt == "cmgf" else "csv"
    return path.with_name(f"{stem}.image.{ext}"), path.with_name(f"{stem}.text.{ext}")


def write_features(ds: FeatureDataset, path, fmt: str = "cmgf"):
    """Write ``ds`` as a JSON manifest at ``path`` plus one file per modality."""
    if fmt not in ("cmgf", "csv"):
        raise ValueError(f"format must be 'cmgf' or 'csv', got {fmt!r}")
    if ds.n == 0:
        raise EmptyDatasetError("empty dataset: refusing to write a dataset with n=0")
    path = Path(path)
    img_path, txt_path = _modality_paths(path, fmt)
    if fmt == "cmgf":
        write_cmgf(img_path, ds.image, ds.labels, ds.n_classes)
        write_cmgf(txt_path, ds.text, ds.labels, ds.n_classes)
    else:
        write_csv_features(img_path, ds.image, ds.labels)
        write_csv_features(txt_path, ds.text, ds.labels)
    manifest = {
        "format": fmt,
        "version": CMGF_VERSION,
        "image": img_path.name,
        "text": txt_path.name,
        "n": ds.n,
        "d_img": ds.d_img,
        "d_txt": ds.d_txt,
        "n_classes": ds.n_classes,
        "category_names": list(ds.category_names),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_features(path) -> FeatureDataset:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    try:
        fmt = manifest["format"]
        names = tuple(manifest["category_names"])
        img_path = path.parent / manifest["image"]
        txt_path = path.parent / manifest["text"]
    except KeyError as exc:
        raise FormatError(f"{path}: manifest missing key {exc}") from exc
    c = len(names)
    if fmt == "cmgf":
        img, img_labels, c_img = read_cmgf(img_path)
        txt, txt_labels, c_txt = read_cmgf(txt_path)
        if c_img != c or c_txt != c:
            raise FormatError(f"{path}: class count mismatch: manifest {c}, image {c_img}, text {c_txt}")
    elif fmt == "csv":
        img, img_labels = read_csv_features(img_path, c)
        txt, txt_labels = read_csv_features(txt_path, c)
    else:
        raise FormatError(f"{path}: unknown format {fmt!r}")
    if img.shape[0] != txt.shape[0]:
        raise FormatError(
            f"{path}: row-count mismatch between modalities: image {img.shape[0]}, text {txt.shape[0]}")
    if not np.array_equal(img_labels, txt_labels):
        p = int(np.nonzero(img_labels != txt_labels)[0][0])
        raise FormatError(f"{path}: pairing broken: image and text labels differ at row {p}")
    if "n" in manifest and manifest["n"] != img.shape[0]:
        raise FormatError(f"{path}: manifest declares n={manifest['n']}, files hold {img.shape[0]} rows")
    return FeatureDataset(img, txt, img_labels, names)


# --- splits ----------------------------------------------------------------

def split_indices(labels, fractions: Sequence[float], seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified index split. Each category is shuffled and cut into
    ``floor(f * n_c)`` leading pieces; indices in every subset are sorted."""
    fractions = list(fractions)
    if not 1 <= len(fractions) <= 3:
        raise ConfigError(f"between 1 and 3 fractions are required, got {len(fractions)}")
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ConfigError(f"fractions must be positive and sum to at most 1, got {fractions}")
    labels = np.asarray(labels)
    rng = rng_from_seed(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        if members.size < len(fractions):
            raise StratificationError(
                f"category {int(c)} has {members.size} instance(s), fewer than the {len(fractions)} subsets requested")
        members = members[rng.permutation(members.size)]
        start = 0
        for j, f in enumerate(fractions):
            count = int(math.floor(f * members.size + 1e-9))
            parts[j].append(members[start:start + count])
            start += count
    out = []
    for j in range(3):
        idx = np.concatenate(parts[j]) if parts[j] else np.empty(0, dtype=np.int64)
        out.append(np.sort(idx.astype(np.int64)))
    return tuple(out)


def split(ds: FeatureDataset, fractions: Sequence[float], seed: int):
    """Return ``(train, val, test)`` subsets; pairs always stay together."""
    return tuple(ds.subset(idx) for idx in split_indices(ds.labels, fractions, seed))


def write_index_manifest(path, indices):
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_index_manifest(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    out = []
    for lineno, line in enumerate(lines, start=1):
        try:
            out.append(int(line))
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: not an integer: {line!r}") from None
    return np.asarray(out, dtype=np.int64)

