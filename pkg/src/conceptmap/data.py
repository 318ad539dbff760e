"""Synthetic concept-attributed images, folder ingestion, and the prototype bank.

The synthetic generator renders four visually separable binary concepts
(bright background, centered circle, horizontal stripes, border frame)
with configurable per-concept frequencies, so class imbalance can be
injected deliberately. Images are exchanged on disk as 8-bit binary PPM
with one attributes CSV per folder.

The prototype bank holds one unit-norm embedding per concept and per
antonym, with an involutive antonym map. Banks are either sampled from a
seeded Gaussian (the default stand-in for externally learned embeddings)
or loaded from a small text format.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CapacityError, ConfigError, ContractError, IngestError,
                     ValidationError)

BANK_MAGIC = "MCMBANK"
BANK_VERSION = 1

_COSINE_LIMIT = 0.5
_NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# concept specification and rendering


@dataclass(frozen=True)
class ConceptSpec:
    """Named binary concepts with antonym names and draw probabilities.

    ``tone_slope`` adds a random horizontal brightness gradient of up to
    that magnitude per image; it makes reconstruction depend on how much
    of the image is visible without touching concept separability.
    """

    names: tuple
    probabilities: tuple
    tone_slope: float = 0.0

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("concept names must be unique")
        if len(self.probabilities) != len(self.names):
            raise ConfigError("one probability per concept required")
        if any(not 0.0 <= p <= 1.0 for p in self.probabilities):
            raise ConfigError("concept probabilities must lie in [0, 1]")
        if not 0.0 <= self.tone_slope <= 0.2:
            raise ConfigError("tone gradient slope must lie in [0, 0.2]")

    @property
    def num_concepts(self) -> int:
        return len(self.names)

    def antonym_name(self, j: int) -> str:
        return f"Not {self.names[j]}"


DEFAULT_CONCEPTS = ("bright_background", "center_circle", "h_stripes", "border_frame")
DEFAULT_PROBABILITIES = (0.5, 0.5, 0.2, 0.05)


def default_concept_spec(probabilities=DEFAULT_PROBABILITIES,
                         tone_slope: float = 0.0) -> ConceptSpec:
    return ConceptSpec(names=DEFAULT_CONCEPTS, probabilities=tuple(probabilities),
                       tone_slope=tone_slope)


@dataclass
class DatasetRecord:
    image: np.ndarray      # [H, W, C] in [0, 1]
    attributes: np.ndarray  # [M] booleans
    name: str = ""


def _render_default(attrs: np.ndarray, height: int, width: int, channels: int,
                    rng: np.random.Generator, tone_slope: float = 0.0) -> np.ndarray:
    """Deterministic rendering of the four default concepts with mild,
    seeded parameter jitter.

    Concepts are channel-coded (red disc, green stripes, blue frame over a
    gray background) so they stay separable under any combination."""
    bright, circle, stripes, frame = (bool(a) for a in attrs[:4])
    base = (0.74 if bright else 0.26) + 0.03 * rng.uniform()
    img = np.full((height, width, channels), base)
    if tone_slope > 0.0:
        sx = rng.uniform(-tone_slope, tone_slope)
        sy = rng.uniform(-tone_slope, tone_slope)
        img += sx * (np.arange(width) / (width - 1) - 0.5)[None, :, None]
        img += sy * (np.arange(height) / (height - 1) - 0.5)[:, None, None]
    if stripes:
        band = max(2, height // 8)
        phase = int(rng.integers(2))
        rows = ((np.arange(height) // band) % 2) == phase
        img[rows, :, 0] *= 0.6
        img[rows, :, 1] = 0.9
        img[rows, :, 2] *= 0.6
    if circle:
        radius = height * (0.21 + 0.02 * rng.uniform())
        yy, xx = np.mgrid[0:height, 0:width]
        disc = (yy - (height - 1) / 2) ** 2 + (xx - (width - 1) / 2) ** 2 <= radius ** 2
        img[disc] = (0.95, 0.15, 0.15)
    if frame:
        t = max(2, height // 12)
        edge = np.zeros((height, width), dtype=bool)
        edge[:t] = edge[-t:] = True
        edge[:, :t] = edge[:, -t:] = True
        img[edge] = (0.12, 0.12, 0.95)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(n: int, spec: ConceptSpec, height: int, width: int,
                  channels: int, seed: int) -> list:
    """Generate ``n`` records, each deterministic in (seed, index)."""
    if n < 1:
        raise ConfigError(f"need at least one record, got {n}")
    if spec.names[:4] != DEFAULT_CONCEPTS:
        raise ConfigError("synthetic rendering is defined for the default concepts")
    if height < 12 or width < 12:
        raise ConfigError("synthetic geometry too small to render concepts")
    if channels != 3:
        raise ConfigError("synthetic rendering is RGB only")
    records = []
    probs = np.asarray(spec.probabilities)
    for idx in range(n):
        rng = np.random.default_rng([seed, idx])
        attrs = rng.uniform(size=spec.num_concepts) < probs
        img = _render_default(attrs, height, width, channels, rng, spec.tone_slope)
        records.append(DatasetRecord(image=img, attributes=attrs, name=f"img_{idx:05d}.ppm"))
    return records


# ---------------------------------------------------------------------------
# PPM image files


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary P6 with values quantized from [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"P6 needs an [H, W, 3] image, got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm_tokens(f, count: int):
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise IngestError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens


def read_ppm(path) -> np.ndarray:
    """Read binary P6 (RGB) or P5 (gray) into float [H, W, C] in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"P6", b"P5"):
            raise IngestError(f"{path}: not a binary PPM/PGM file (magic {magic!r})")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(f, 3))
        if maxval <= 0 or maxval > 255:
            raise IngestError(f"{path}: unsupported max value {maxval}")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise IngestError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return img.astype(np.float64) / maxval


def _center_crop(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < height or w < width:
        raise IngestError(f"image {h}x{w} smaller than target {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return img[top:top + height, left:left + width]


# ---------------------------------------------------------------------------
# dataset folder IO


def save_folder(records, directory, concept_names) -> None:
    """Write PPM images plus an ``attributes.csv`` following the CSV contract."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "attributes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image"] + list(concept_names))
        for rec in records:
            write_ppm(directory / rec.name, rec.image)
            writer.writerow([rec.name] + [1 if a else -1 for a in rec.attributes])


def load_folder(image_dir, attributes_csv, selected_concepts,
                height: int, width: int, channels: int = 3) -> list:
    """Load images listed in the CSV, center-cropped to the target geometry.

    Attribute values may be {-1, 1} or {0, 1}. Undecodable images are
    skipped with a warning.
    """
    if not selected_concepts:
        raise IngestError("at least one concept column must be selected")
    image_dir = Path(image_dir)
    with open(attributes_csv, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "image":
            raise IngestError("attributes CSV must start with an 'image' column")
        try:
            cols = [header.index(c) for c in selected_concepts]
        except ValueError:
            missing = [c for c in selected_concepts if c not in header]
            raise IngestError(f"missing attribute column(s): {missing}") from None
        records, skipped = [], 0
        for row in reader:
            if not row:
                continue
            try:
                img = read_ppm(image_dir / row[0])
            except (IngestError, OSError) as exc:
                warnings.warn(f"skipping {row[0]}: {exc}")
                skipped += 1
                continue
            img = _center_crop(img, height, width)
            if img.shape[2] != channels:
                if img.shape[2] == 1 and channels == 3:
                    img = np.repeat(img, 3, axis=2)
                else:
                    warnings.warn(f"skipping {row[0]}: {img.shape[2]} channels")
                    skipped += 1
                    continue
            values = [int(row[c]) for c in cols]
            if any(v not in (-1, 0, 1) for v in values):
                raise IngestError(f"{row[0]}: attribute values must be in {{-1,0,1}}")
            attrs = np.array([v == 1 for v in values])
            records.append(DatasetRecord(image=img, attributes=attrs, name=row[0]))
    if skipped:
        warnings.warn(f"skipped {skipped} undecodable image(s)")
    return records


def read_concept_names(attributes_csv) -> list:
    """Concept column names from a dataset CSV header."""
    with open(attributes_csv, newline="") as f:
        header = next(csv.reader(f), None)
    if not header or header[0] != "image" or len(header) < 2:
        raise IngestError(f"{attributes_csv}: malformed attributes header")
    return header[1:]


def load_dataset_dir(directory, height: int, width: int, channels: int = 3,
                     concepts=None):
    """Load a generated dataset folder; returns (records, concept names)."""
    directory = Path(directory)
    csv_path = directory / "attributes.csv"
    if not csv_path.exists():
        raise IngestError(f"{directory}: no attributes.csv found")
    names = list(concepts) if concepts else read_concept_names(csv_path)
    return load_folder(directory, csv_path, names, height, width, channels), names


# ---------------------------------------------------------------------------
# prototype bank


@dataclass
class ConceptBank:
    """Unit-norm prototype pairs with an involutive antonym map.

    ``all_vectors`` orders positives first, then antonyms; index v and
    ``antonym_index(v)`` are each other's antonyms.
    """

    names: list
    positive: np.ndarray   # [M, dim]
    antonym: np.ndarray    # [M, dim]
    source: str = "synthetic-seeded"

    @property
    def num_concepts(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return int(self.positive.shape[-1])

    def all_vectors(self) -> np.ndarray:
        return np.concatenate([self.positive, self.antonym], axis=0)

    def antonym_index(self, index: int) -> int:
        m = self.num_concepts
        return index + m if index < m else index - m

    def vector(self, j: int, positive: bool) -> np.ndarray:
        return self.positive[j] if positive else self.antonym[j]

    def validate(self) -> None:
        vectors = self.all_vectors()
        norms = np.linalg.norm(vectors, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError(f"bank vectors must be unit norm; norms {norms}")
        bad = []
        for a in range(len(vectors)):
            for b in range(a + 1, len(vectors)):
                cos = float(vectors[a] @ vectors[b])
                if cos >= _COSINE_LIMIT:
                    bad.append((a, b, cos))
        if bad:
            raise ValidationError(f"bank vector pairs too similar (cosine >= {_COSINE_LIMIT}): {bad}")


def build_prototype_bank(names, dim: int, seed: int,
                         max_attempts: int = 1000) -> ConceptBank:
    """Sample unit prototypes until every pair (positive/antonym and
    cross-concept alike) has cosine below 0.5."""
    if dim < 8:
        raise ConfigError(f"prototype width must be >= 8, got {dim}")
    names = list(names)
    m = len(names)
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        vectors = rng.standard_normal((2 * m, dim))
        vectors /= np.linalg.norm(vectors, axis=-1, keepdims=True)
        gram = vectors @ vectors.T
        np.fill_diagonal(gram, 0.0)
        if gram.max() < _COSINE_LIMIT:
            return ConceptBank(names=names, positive=vectors[:m],
                               antonym=vectors[m:], source="synthetic-seeded")
    raise CapacityError(
        f"could not separate {2 * m} prototypes in {dim} dimensions "
        f"after {max_attempts} attempts")


def save_prototype_bank(path, bank: ConceptBank) -> None:
    with open(path, "w") as f:
        f.write(f"{BANK_MAGIC} {BANK_VERSION}\n")
        f.write(f"{bank.num_concepts} {bank.dim}\n")
        for j, name in enumerate(bank.names):
            f.write(name + "\n")
            f.write(" ".join(repr(float(x)) for x in bank.positive[j]) + "\n")
            f.write(" ".join(repr(float(x)) for x in bank.antonym[j]) + "\n")


def load_prototype_bank(path) -> ConceptBank:
    """Parse the bank format, renormalizing only vectors that need it, and
    re-validate all separation invariants."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != BANK_MAGIC:
            raise ValidationError(f"{path}: not a prototype bank file")
        if int(header[1]) != BANK_VERSION:
            raise ValidationError(f"{path}: unsupported bank version {header[1]}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValidationError(f"{path}: malformed size line")
        m, dim = int(dims[0]), int(dims[1])
        names, pos, ant = [], [], []
        for _ in range(m):
            name = f.readline().rstrip("\n")
            if not name:
                raise ValidationError(f"{path}: truncated bank file")
            names.append(name)
            for dest in (pos, ant):
                values = np.array([float(t) for t in f.readline().split()])
                if values.size != dim:
                    raise ValidationError(
                        f"{path}: vector for {name} has {values.size} values, expected {dim}")
                dest.append(values)
    positive = np.stack(pos)
    antonym = np.stack(ant)
    for block in (positive, antonym):
        norms = np.linalg.norm(block, axis=-1, keepdims=True)
        off = np.abs(norms - 1.0).reshape(-1) > _NORM_TOL
        if off.any():
            block[off] = block[off] / norms[off]
    bank = ConceptBank(names=names, positive=positive, antonym=antonym, source="loaded")
    bank.validate()
    return bank


def prototypes_for(record: DatasetRecord, bank: ConceptBank) -> np.ndarray:
    """[M, dim] rows: the positive prototype where the attribute holds,
    the antonym prototype where it does not. Rows are exact bank members."""
    if len(record.attributes) != bank.num_concepts:
        raise ContractError(
            f"record has {len(record.attributes)} attributes, bank has {bank.num_concepts}")
    rows = np.where(record.attributes[:, None], bank.positive, bank.antonym)
    return rows.copy()
