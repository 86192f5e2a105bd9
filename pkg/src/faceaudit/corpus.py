"""Corpus data model: records, manifests, splits, and k-shot sampling.

A corpus is a flat list of FaceRecord entries, one per (identity, variant).
Region is a pure function of country; the eight canonical countries map as
AUS/NZL/ENG/RSA -> GlobalNorth and BAN/IND/PAK/WIN -> GlobalSouth.  New
countries may be registered, but their region must be declared explicitly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from .errors import (
    BBoxOutOfBounds,
    DuplicateIdentityVariant,
    EmptyBBox,
    InsufficientGroup,
    MissingLabel,
    MissingVariant,
)
from .images import FRAME_HEIGHT, FRAME_WIDTH, as_image, bilinear_resize, load_image

SCHEMA_VERSION = 1

GLOBAL_NORTH = "GlobalNorth"
GLOBAL_SOUTH = "GlobalSouth"

GENDERS = ("Male", "Female")

# Canonical country -> region map; extensible via register_country().
_COUNTRY_REGION = {
    "AUS": GLOBAL_NORTH,
    "NZL": GLOBAL_NORTH,
    "ENG": GLOBAL_NORTH,
    "RSA": GLOBAL_NORTH,
    "BAN": GLOBAL_SOUTH,
    "IND": GLOBAL_SOUTH,
    "PAK": GLOBAL_SOUTH,
    "WIN": GLOBAL_SOUTH,
}

CANONICAL_COUNTRIES = tuple(_COUNTRY_REGION)


def register_country(code: str, region: str) -> None:
    """Declare a non-canonical country and its region (no inference)."""
    if region not in (GLOBAL_NORTH, GLOBAL_SOUTH):
        raise ValueError(f"unknown region: {region}")
    existing = _COUNTRY_REGION.get(code)
    if existing is not None and existing != region:
        raise ValueError(f"country {code} already mapped to {existing}")
    _COUNTRY_REGION[code] = region


def region_of(country: str) -> str:
    """Region for a registered country."""
    try:
        return _COUNTRY_REGION[country]
    except KeyError:
        raise ValueError(f"unregistered country: {country}") from None


def known_countries() -> tuple:
    return tuple(_COUNTRY_REGION)


@dataclass(frozen=True)
class VariantKind:
    """One of the image sets: ORIG, RGB (noisy), GREY, SPRD, MASK.

    `amplitude` is meaningful only for RGB, `radius` only for SPRD, and
    `seed` only for the stochastic kinds (RGB, SPRD).
    """

    kind: str = "ORIG"
    amplitude: Optional[float] = None
    radius: Optional[int] = None
    seed: Optional[int] = None

    KINDS = ("ORIG", "RGB", "GREY", "SPRD", "MASK")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown variant kind: {self.kind}")
        if (self.amplitude is not None) != (self.kind == "RGB"):
            raise ValueError("amplitude present iff kind=RGB")
        if (self.radius is not None) != (self.kind == "SPRD"):
            raise ValueError("radius present iff kind=SPRD")
        if self.kind in ("ORIG", "GREY", "MASK") and self.seed is not None:
            raise ValueError(f"{self.kind} carries no seed")
        if self.amplitude is not None and not 0.0 < self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in (0, 1]")
        if self.radius is not None and self.radius < 1:
            raise ValueError("radius must be >= 1")

    @property
    def label(self) -> str:
        """Seed-independent set label, e.g. 'RGB0.3' or 'SPRD5'."""
        if self.kind == "RGB":
            return f"RGB{self.amplitude:g}"
        if self.kind == "SPRD":
            return f"SPRD{self.radius}"
        return self.kind

    def with_seed(self, seed: int) -> "VariantKind":
        if self.kind not in ("RGB", "SPRD"):
            return self
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.amplitude is not None:
            d["amplitude"] = self.amplitude
        if self.radius is not None:
            d["radius"] = self.radius
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantKind":
        return cls(
            kind=d["kind"],
            amplitude=d.get("amplitude"),
            radius=d.get("radius"),
            seed=d.get("seed"),
        )


ORIG = VariantKind("ORIG")
GREY = VariantKind("GREY")
MASK = VariantKind("MASK")


def rgb_variant(amplitude: float, seed: Optional[int] = None) -> VariantKind:
    return VariantKind("RGB", amplitude=amplitude, seed=seed)


def spread_variant(radius: int = 5, seed: Optional[int] = None) -> VariantKind:
    return VariantKind("SPRD", radius=radius, seed=seed)


@dataclass(frozen=True)
class FaceRecord:
    """One labeled face image."""

    record_id: str
    identity_id: str
    display_name: str
    country: str
    gender: str
    variant: VariantKind
    image_ref: str
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}: {self.gender}")
        region_of(self.country)  # must be registered

    @property
    def region(self) -> str:
        return region_of(self.country)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "identity_id": self.identity_id,
            "display_name": self.display_name,
            "country": self.country,
            "region": self.region,
            "gender": self.gender,
            "variant": self.variant.to_dict(),
            "image_ref": self.image_ref,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceRecord":
        rec = cls(
            record_id=d["record_id"],
            identity_id=d["identity_id"],
            display_name=d["display_name"],
            country=d["country"],
            gender=d["gender"],
            variant=VariantKind.from_dict(d["variant"]),
            image_ref=d["image_ref"],
            width=d["width"],
            height=d["height"],
        )
        stored = d.get("region")
        if stored is not None and stored != rec.region:
            raise ValueError(
                f"record {rec.record_id}: stored region {stored} contradicts "
                f"country {rec.country}"
            )
        return rec


@dataclass
class Manifest:
    """An ordered collection of FaceRecords with provenance."""

    records: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    provenance: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen_ids = set()
        seen_iv = set()
        for rec in self.records:
            if rec.record_id in seen_ids:
                raise ValueError(f"duplicate record_id: {rec.record_id}")
            seen_ids.add(rec.record_id)
            key = (rec.identity_id, rec.variant.label)
            if key in seen_iv:
                raise DuplicateIdentityVariant(
                    f"duplicate (identity, variant): {key}"
                )
            seen_iv.add(key)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def identities(self) -> set:
        return {r.identity_id for r in self.records}

    def select(self, variant_label=None, gender=None, country=None, region=None):
        """Records matching all given filters."""
        out = []
        for r in self.records:
            if variant_label is not None and r.variant.label != variant_label:
                continue
            if gender is not None and r.gender != gender:
                continue
            if country is not None and r.country != country:
                continue
            if region is not None and r.region != region:
                continue
            out.append(r)
        return out

    def find(self, identity_id: str, variant_label: str = "ORIG") -> FaceRecord:
        for r in self.records:
            if r.identity_id == identity_id and r.variant.label == variant_label:
                return r
        raise KeyError((identity_id, variant_label))

    def missing_image_refs(self) -> list:
        """Image refs that do not resolve to a file on disk."""
        return [r.image_ref for r in self.records if not Path(r.image_ref).is_file()]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "provenance": self.provenance,
            "records": [r.to_dict() for r in self.records],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(
            records=[FaceRecord.from_dict(r) for r in d["records"]],
            schema_version=d["schema_version"],
            provenance=d.get("provenance", ""),
        )

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SplitSpec:
    """Held-out split shape: images per country at a fixed gender ratio."""

    per_country_total: int = 60
    male_ratio: int = 2
    female_ratio: int = 1
    disjoint_identities: bool = True

    def __post_init__(self):
        ratio_sum = self.male_ratio + self.female_ratio
        if self.per_country_total % ratio_sum != 0:
            raise ValueError(
                f"per_country_total {self.per_country_total} not divisible by "
                f"ratio sum {ratio_sum}"
            )

    @property
    def males_per_country(self) -> int:
        unit = self.per_country_total // (self.male_ratio + self.female_ratio)
        return unit * self.male_ratio

    @property
    def females_per_country(self) -> int:
        return self.per_country_total - self.males_per_country


LABELS_HEADER = ["filename", "identity_id", "name", "country", "gender"]


def ingest(directory, labels_path, provenance: str = "") -> Manifest:
    """Build a Manifest of ORIG records from an image directory and a labels CSV.

    The CSV maps filename -> (identity_id, name, country, gender).  Every
    image file in the directory must have a label row; files that do not
    decode raise UnreadableImage rather than being dropped.
    """
    directory = Path(directory)
    labels = {}
    with open(labels_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing_cols = set(LABELS_HEADER) - set(reader.fieldnames or ())
        if missing_cols:
            raise ValueError(f"labels CSV missing columns: {sorted(missing_cols)}")
        for row in reader:
            labels[row["filename"]] = row

    image_files = sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in (".jpg", ".jpeg", ".png")
    )
    records = []
    for path in image_files:
        row = labels.get(path.name)
        if row is None:
            raise MissingLabel(path.name)
        img = load_image(path)  # raises UnreadableImage
        records.append(
            FaceRecord(
                record_id=f"{row['identity_id']}:ORIG",
                identity_id=row["identity_id"],
                display_name=row["name"],
                country=row["country"],
                gender=row["gender"],
                variant=ORIG,
                image_ref=str(path),
                width=img.shape[1],
                height=img.shape[0],
            )
        )
    labeled_missing = sorted(set(labels) - {p.name for p in image_files})
    if labeled_missing:
        raise MissingLabel(f"labeled files absent from directory: {labeled_missing}")
    return Manifest(records=records, provenance=provenance or f"ingest:{directory}")


def normalize_crop(img, bbox) -> "np.ndarray":
    """Crop a face bbox and resample to the canonical 200x256 frame.

    bbox is (x, y, w, h) in pixels.  The box is expanded minimally and
    symmetrically to the 200:256 aspect ratio, clamped at the image borders,
    then resampled bilinearly.  The face detector that produced the bbox is
    external; this consumes its output.
    """
    img = as_image(img)
    ih, iw = img.shape[:2]
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise EmptyBBox(f"bbox {bbox} has non-positive area")
    if x < 0 or y < 0 or x + w > iw or y + h > ih:
        raise BBoxOutOfBounds(f"bbox {bbox} exceeds image {iw}x{ih}")

    target = FRAME_WIDTH / FRAME_HEIGHT
    if w / h < target:
        new_w, new_h = h * target, h
    else:
        new_w, new_h = w, w / target
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = int(np.floor(cx - new_w / 2.0))
    y0 = int(np.floor(cy - new_h / 2.0))
    x1 = int(np.ceil(cx + new_w / 2.0))
    y1 = int(np.ceil(cy + new_h / 2.0))
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(iw, x1), min(ih, y1)
    crop = img[y0:y1, x0:x1]
    return bilinear_resize(crop, FRAME_HEIGHT, FRAME_WIDTH)


def _identities_by_cell(manifest: Manifest):
    """ORIG identities grouped by (country, gender), in manifest-independent order."""
    cells = {}
    for rec in manifest.select(variant_label="ORIG"):
        cells.setdefault((rec.country, rec.gender), []).append(rec.identity_id)
    for ids in cells.values():
        ids.sort()
    return cells


def build_holdout(manifest: Manifest, spec: SplitSpec, seed: int):
    """Split ORIG identities into a held-out test manifest and a training pool.

    The holdout gets exactly spec.per_country_total ORIG records per country
    at the exact male:female ratio; its identities never appear in the pool.
    Selection is deterministic under the seed.
    """
    cells = _identities_by_cell(manifest)
    countries = sorted({c for c, _ in cells})
    need = {
        "Male": spec.males_per_country,
        "Female": spec.females_per_country,
    }
    chosen = set()
    for country in countries:
        for gender in GENDERS:
            ids = cells.get((country, gender), [])
            if len(ids) < need[gender]:
                raise InsufficientGroup(country, gender, need[gender], len(ids))
            g = rng.generator(seed, "holdout", country, gender)
            picked = g.permutation(len(ids))[: need[gender]]
            chosen.update(ids[i] for i in picked)

    holdout_records = [
        r for r in manifest.records
        if r.identity_id in chosen and r.variant.label == "ORIG"
    ]
    pool_records = [r for r in manifest.records if r.identity_id not in chosen]
    holdout = Manifest(holdout_records, provenance=f"holdout(seed={seed})")
    pool = Manifest(pool_records, provenance=f"pool(seed={seed})")
    return holdout, pool


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_kshot(
    pool: Manifest,
    k: int,
    adversarial_fraction: float = 0.0,
    adversarial_kind: Optional[VariantKind] = None,
    seed: int = 0,
) -> Manifest:
    """Sample k identities per (country, gender) cell for few-shot training.

    A fraction of each cell (rounded half up per cell) is represented by its
    adversarial variant instead of ORIG.  Deterministic under the seed.
    """
    if not 0.0 <= adversarial_fraction <= 1.0:
        raise ValueError("adversarial_fraction must lie in [0, 1]")
    if adversarial_fraction > 0 and adversarial_kind is None:
        raise ValueError("adversarial_kind required when fraction > 0")

    cells = _identities_by_cell(pool)
    countries = sorted({c for c, _ in cells})
    records = []
    n_adv_per_cell = _round_half_up(adversarial_fraction * k)
    for country in countries:
        for gender in GENDERS:
            ids = cells.get((country, gender), [])
            if len(ids) < k:
                raise InsufficientGroup(country, gender, k, len(ids))
            g = rng.generator(seed, "kshot", country, gender)
            picked = [ids[i] for i in g.permutation(len(ids))[:k]]
            for i, identity in enumerate(picked):
                if i < n_adv_per_cell:
                    try:
                        rec = pool.find(identity, adversarial_kind.label)
                    except KeyError:
                        raise MissingVariant(identity, adversarial_kind.label)
                else:
                    rec = pool.find(identity, "ORIG")
                records.append(rec)
    return Manifest(
        records,
        provenance=(
            f"kshot(k={k}, frac={adversarial_fraction}, seed={seed})"
        ),
    )
