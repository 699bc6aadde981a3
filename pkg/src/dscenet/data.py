"""Dataset plumbing: clinical preprocessing, stratified splits, synthetic bags.

A dataset on disk is a directory of binary bag files plus one JSON manifest.
Bags store raw (unnormalized) clinical values; the split step computes
min/max statistics from the training cases only, and loaders normalize with
those statistics, clamping values seen outside the training range.

The synthetic generator stands in for the real multicenter cohort. It builds
bags whose image evidence and clinical indicators are individually partial
and jointly sufficient: two of the four classes are nearly identical in image
space but well separated clinically, every bag mixes evidence patches with
class-neutral background patches, and a per-bag scale jitter gives the
screening gate something to normalize away.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BagMagicError,
    BagShapeError,
    BagTruncatedError,
    BagVersionError,
    ConfigError,
    ContractError,
    NumericalError,
    ParseError,
)
from .numerics import Matrix

CLASS_NAMES = ("PV", "ET", "PrePMF", "PMF")

DEFAULT_INDICATORS = (
    "gender",
    "age",
    "hemoglobin",
    "white_blood_cell",
    "red_cell_mass",
    "hematocrit",
    "platelet_count",
    "JAK2",
    "MPL",
    "CALR",
)

_BAG_MAGIC = b"DSCB"
_BAG_VERSION = 1

# Continuous indicator profiles: name -> (per-class means, stddev). The table
# separates ET from PV mostly via counts/hemoglobin and PrePMF from PMF via
# platelet/hematocrit, mirroring how the subtypes present clinically.
_CONTINUOUS_PROFILE = {
    "age": ((61.0, 54.0, 58.0, 66.0), 9.0),
    "hemoglobin": ((18.2, 14.2, 13.6, 10.8), 1.6),
    "white_blood_cell": ((10.5, 9.0, 11.5, 13.5), 2.8),
    "red_cell_mass": ((36.0, 28.0, 27.5, 25.0), 4.5),
    "hematocrit": ((54.0, 42.0, 40.5, 34.0), 5.0),
    "platelet_count": ((420.0, 880.0, 720.0, 310.0), 160.0),
}

# Driver-mutation positivity rates per class.
_MUTATION_PROFILE = {
    "JAK2": (0.95, 0.60, 0.55, 0.50),
    "MPL": (0.02, 0.03, 0.05, 0.10),
    "CALR": (0.02, 0.25, 0.02, 0.45),
}


@dataclass
class FeatureBag:
    """One case: an N x L patch-feature matrix, clinical row, label, id."""

    case_id: str
    features: Matrix
    clinical: Matrix
    label: int

    def __post_init__(self) -> None:
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ContractError(f"label {self.label} out of range")
        if self.clinical.rows != 1:
            raise ContractError(f"clinical vector must be a single row, got {self.clinical.shape}")

    @property
    def n_patches(self) -> int:
        return self.features.rows


@dataclass
class CaseRecord:
    case_id: str
    label: int
    path: str
    split: str | None = None


@dataclass
class DatasetManifest:
    """Case list plus the dimensions and statistics shared by every bag."""

    feature_dim: int
    clinical_dim: int
    indicator_names: list[str]
    cases: list[CaseRecord]
    normalization: dict | None = None
    generator: dict | None = None
    version: int = 1

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "feature_dim": self.feature_dim,
            "clinical_dim": self.clinical_dim,
            "indicator_names": list(self.indicator_names),
            "class_names": list(CLASS_NAMES),
            "cases": [
                {"case_id": c.case_id, "label": c.label, "path": c.path, "split": c.split}
                for c in self.cases
            ],
            "normalization": self.normalization,
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        cases = [
            CaseRecord(c["case_id"], int(c["label"]), c["path"], c.get("split"))
            for c in d["cases"]
        ]
        return cls(
            feature_dim=int(d["feature_dim"]),
            clinical_dim=int(d["clinical_dim"]),
            indicator_names=list(d["indicator_names"]),
            cases=cases,
            normalization=d.get("normalization"),
            generator=d.get("generator"),
            version=int(d.get("version", 1)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


# --- clinical preprocessing -------------------------------------------------


def minmax_normalize(values, lo: float, hi: float) -> list[float]:
    """Scale to [0, 1] with train-split stats; out-of-range values clamp."""
    if hi < lo:
        raise ContractError(f"normalization stats invalid: max {hi} < min {lo}")
    if hi == lo:
        return [0.0 for _ in values]
    span = hi - lo
    return [min(1.0, max(0.0, (float(v) - lo) / span)) for v in values]


def encode_mutation(status: str, *, case_id: str = "", fieldname: str = "") -> int:
    """Map a positive/negative token to 1/0, case-insensitively."""
    folded = status.strip().lower()
    if folded == "positive":
        return 1
    if folded == "negative":
        return 0
    where = f" (case {case_id!r}, field {fieldname!r})" if case_id or fieldname else ""
    raise ParseError(f"unknown mutation status {status!r}{where}")


# --- stratified splitting ---------------------------------------------------


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes for one class under the 6:2:2 ratio.

    Validation and test get round-half-up of 0.2n each; train is the rest.
    """
    test = _round_half_up(0.2 * n)
    val = _round_half_up(0.2 * n)
    return n - val - test, val, test


def stratified_split(labels, seed: int) -> list[str]:
    """Per-case split assignment, shuffled within each class by ``seed``."""
    labels = [int(v) for v in labels]
    rng = np.random.default_rng(seed)
    assignment: list[str | None] = [None] * len(labels)
    for cls in sorted(set(labels)):
        idx = [i for i, v in enumerate(labels) if v == cls]
        if len(idx) < 5:
            raise ConfigError(f"class {cls} has only {len(idx)} cases; need at least 5")
        order = rng.permutation(len(idx))
        _, n_val, n_test = split_counts(len(idx))
        for rank, j in enumerate(order):
            if rank < n_test:
                assignment[idx[j]] = "test"
            elif rank < n_test + n_val:
                assignment[idx[j]] = "val"
            else:
                assignment[idx[j]] = "train"
    return assignment  # type: ignore[return-value]


# --- synthetic generator ----------------------------------------------------


@dataclass
class GenConfig:
    """Knobs of the synthetic cohort generator.

    ``noise`` scales every stochastic perturbation (patch noise, clinical
    noise); ``scale_jitter`` is the half-width of the per-bag multiplicative
    feature jitter. ``pair_gap`` controls how far apart the two image-similar
    classes (PrePMF, PMF) sit in image space; keep it small relative to
    ``image_shift`` so that separating them requires the clinical channel.
    """

    class_counts: tuple[int, int, int, int] = (81, 126, 88, 88)
    n_patches: tuple[int, int] = (8, 24)
    feature_dim: int = 64
    clinical_dim: int = 10
    signal_fraction: float = 0.5
    image_shift: float = 1.6
    pair_gap: float = 0.5
    background_shift: float = 1.6
    clinical_shift: float = 1.0
    noise: float = 1.0
    scale_jitter: float = 0.3

    def validate(self) -> None:
        if len(self.class_counts) != 4 or any(c < 1 for c in self.class_counts):
            raise ConfigError(f"need four positive class counts, got {self.class_counts}")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be at least 4")
        if self.clinical_dim < 4:
            raise ConfigError("clinical_dim must be at least 4")
        lo, hi = self.n_patches
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid patch-count range {self.n_patches}")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError("signal_fraction must be in (0, 1]")
        if self.noise < 0 or self.scale_jitter < 0:
            raise ConfigError("noise and scale_jitter must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "class_counts": list(self.class_counts),
            "n_patches": list(self.n_patches),
            "feature_dim": self.feature_dim,
            "clinical_dim": self.clinical_dim,
            "signal_fraction": self.signal_fraction,
            "image_shift": self.image_shift,
            "pair_gap": self.pair_gap,
            "background_shift": self.background_shift,
            "clinical_shift": self.clinical_shift,
            "noise": self.noise,
            "scale_jitter": self.scale_jitter,
        }


def indicator_names(m: int) -> list[str]:
    names = list(DEFAULT_INDICATORS[:m])
    while len(names) < m:
        names.append(f"indicator_{len(names)}")
    return names


def _class_means(cfg: GenConfig) -> np.ndarray:
    """Per-class evidence-patch mean vectors (4 x L)."""
    ln = cfg.feature_dim
    w = max(1, min(4, ln // 4))
    means = np.zeros((4, ln))
    means[0, 0:w] = cfg.image_shift
    means[1, 0:w] = -cfg.image_shift
    means[2, w : 2 * w] = cfg.image_shift
    means[3, w : 2 * w] = cfg.image_shift
    means[2, 0] += cfg.pair_gap
    means[3, 0] -= cfg.pair_gap
    return means


def _background_mean(cfg: GenConfig) -> np.ndarray:
    ln = cfg.feature_dim
    w = max(1, min(4, ln // 4))
    mean = np.zeros(ln)
    mean[2 * w : min(3 * w, ln)] = cfg.background_shift
    return mean


def _clinical_row(cls: int, names: list[str], cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    row = np.zeros(len(names))
    for j, name in enumerate(names):
        if name in _CONTINUOUS_PROFILE:
            means, sigma = _CONTINUOUS_PROFILE[name]
            grand = sum(means) / 4.0
            center = grand + cfg.clinical_shift * (means[cls] - grand)
            row[j] = center + sigma * cfg.noise * rng.standard_normal()
        elif name in _MUTATION_PROFILE:
            p = _MUTATION_PROFILE[name][cls]
            p = min(0.99, max(0.01, 0.5 + cfg.clinical_shift * (p - 0.5)))
            row[j] = float(rng.random() < p)
        elif name == "gender":
            row[j] = float(rng.random() < 0.5)
        else:
            row[j] = rng.standard_normal()
    return row


def generate_synthetic(cfg: GenConfig, seed: int) -> tuple[list[FeatureBag], DatasetManifest]:
    """Deterministically build the synthetic cohort for (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    names = indicator_names(cfg.clinical_dim)
    ev_means = _class_means(cfg)
    bg_mean = _background_mean(cfg)
    lo, hi = cfg.n_patches

    bags: list[FeatureBag] = []
    records: list[CaseRecord] = []
    case_no = 0
    for cls, count in enumerate(cfg.class_counts):
        for _ in range(count):
            case_no += 1
            case_id = f"case_{case_no:04d}"
            n = int(rng.integers(lo, hi + 1))
            n_ev = max(1, _round_half_up(cfg.signal_fraction * n))
            feats = np.empty((n, cfg.feature_dim))
            feats[:n_ev] = ev_means[cls]
            feats[n_ev:] = bg_mean
            feats += cfg.noise * rng.standard_normal(feats.shape)
            feats = feats[rng.permutation(n)]
            if cfg.scale_jitter > 0:
                feats *= 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
            clinical = _clinical_row(cls, names, cfg, rng)
            bags.append(
                FeatureBag(case_id, Matrix(feats), Matrix(clinical.reshape(1, -1)), cls)
            )
            records.append(CaseRecord(case_id, cls, f"bags/{case_id}.bag"))

    manifest = DatasetManifest(
        feature_dim=cfg.feature_dim,
        clinical_dim=cfg.clinical_dim,
        indicator_names=names,
        cases=records,
        generator={"seed": seed, **cfg.to_dict()},
    )
    return bags, manifest


# --- bag file format --------------------------------------------------------


def write_bag(path: Path | str, bag: FeatureBag) -> None:
    """Binary layout: magic, version, N, L, m, label, f32 payloads, case id."""
    feats = bag.features.data.astype("<f4")
    clin = bag.clinical.data.astype("<f4").reshape(-1)
    cid = bag.case_id.encode("utf-8")
    if len(cid) > 0xFFFF:
        raise ContractError("case id too long for the format")
    n, ln = bag.features.shape
    blob = bytearray()
    blob += _BAG_MAGIC
    blob += struct.pack("<IIIII", _BAG_VERSION, n, ln, clin.size, bag.label)
    blob += feats.tobytes(order="C")
    blob += clin.tobytes()
    blob += struct.pack("<H", len(cid))
    blob += cid
    Path(path).write_bytes(bytes(blob))


def read_bag(path: Path | str) -> FeatureBag:
    """Parse a bag file; malformed input raises a typed BagFormatError."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise BagTruncatedError(f"file ends inside {what} ({len(raw)} bytes total)")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != _BAG_MAGIC:
        raise BagMagicError(f"bad magic {magic!r}")
    version, n, ln, m, label = struct.unpack("<IIIII", take(20, "header"))
    if version != _BAG_VERSION:
        raise BagVersionError(f"unsupported version {version}")
    if n < 1 or ln < 1 or m < 1:
        raise BagShapeError(f"invalid header dims N={n} L={ln} m={m}")
    if label >= len(CLASS_NAMES):
        raise BagShapeError(f"label {label} out of range")
    feats = np.frombuffer(take(4 * n * ln, "feature payload"), dtype="<f4").reshape(n, ln)
    clin = np.frombuffer(take(4 * m, "clinical payload"), dtype="<f4").reshape(1, m)
    (id_len,) = struct.unpack("<H", take(2, "case id length"))
    cid = take(id_len, "case id").decode("utf-8")
    if pos != len(raw):
        raise BagShapeError(f"{len(raw) - pos} trailing bytes after declared payload")
    try:
        return FeatureBag(cid, Matrix(feats.astype(np.float64)), Matrix(clin.astype(np.float64)), label)
    except NumericalError as exc:
        raise BagShapeError(f"non-finite payload values: {exc}") from exc


# --- dataset directories ----------------------------------------------------


def write_dataset(bags: list[FeatureBag], manifest: DatasetManifest, outdir: Path | str) -> Path:
    """Write bag files and the manifest under ``outdir``; returns manifest path."""
    out = Path(outdir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    by_id = {c.case_id: c for c in manifest.cases}
    for bag in bags:
        write_bag(out / by_id[bag.case_id].path, bag)
    mpath = out / "manifest.json"
    mpath.write_text(manifest.to_json())
    return mpath


def load_manifest(path: Path | str) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def split_manifest(manifest: DatasetManifest, seed: int, root: Path | str, force: bool = False) -> None:
    """Assign splits and compute train-only normalization stats, in place."""
    if any(c.split is not None for c in manifest.cases) and not force:
        raise ConfigError("manifest already has a split; pass force to redo it")
    assignment = stratified_split([c.label for c in manifest.cases], seed)
    for case, split in zip(manifest.cases, assignment):
        case.split = split
    root = Path(root)
    train_rows = [
        read_bag(root / c.path).clinical.data[0] for c in manifest.cases if c.split == "train"
    ]
    stacked = np.stack(train_rows)
    manifest.normalization = {
        "min": stacked.min(axis=0).tolist(),
        "max": stacked.max(axis=0).tolist(),
        "split_seed": seed,
    }


def split_table(manifest: DatasetManifest) -> dict[str, list[int]]:
    """Per-split class counts, ordered PV, ET, PrePMF, PMF."""
    table = {s: [0] * len(CLASS_NAMES) for s in ("train", "val", "test")}
    for case in manifest.cases:
        if case.split is not None:
            table[case.split][case.label] += 1
    return table


def normalize_clinical(manifest: DatasetManifest, clinical: Matrix) -> Matrix:
    stats = manifest.normalization
    if stats is None:
        raise ConfigError("manifest has no normalization stats; run the split step first")
    row = clinical.data[0]
    out = [
        minmax_normalize([row[j]], stats["min"][j], stats["max"][j])[0]
        for j in range(len(row))
    ]
    return Matrix([out])


def load_split(manifest: DatasetManifest, root: Path | str, split: str) -> list[FeatureBag]:
    """Load one split's bags with clinical values normalized to [0, 1]."""
    if split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {split!r}")
    root = Path(root)
    out = []
    for case in manifest.cases:
        if case.split != split:
            continue
        bag = read_bag(root / case.path)
        if bag.features.cols != manifest.feature_dim or bag.clinical.cols != manifest.clinical_dim:
            raise BagShapeError(
                f"bag {case.case_id} dims {bag.features.cols}/{bag.clinical.cols} "
                f"disagree with manifest {manifest.feature_dim}/{manifest.clinical_dim}"
            )
        out.append(
            FeatureBag(bag.case_id, bag.features, normalize_clinical(manifest, bag.clinical), bag.label)
        )
    return out
