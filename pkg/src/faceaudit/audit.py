"""Accuracy / disparity auditing of prediction backends over a corpus.

Accuracies are micro-averaged percentages (100 * correct / n).  Disparity is
signed: male-cell accuracy minus female-cell accuracy for otherwise matching
group keys, rounded to two decimals (the reporting precision of accuracies).
Records on which a backend finds no face are scored incorrect and tallied
separately so the scoring rule stays auditable.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from .backends import PredictOptions, predict_batch
from .corpus import GENDERS, Manifest
from .errors import InsufficientCells, InsufficientGroup, MissingCell

GROUP_FIELDS = ("gender", "region", "country", "variant", "backend")


@dataclass(frozen=True)
class GroupKey:
    """One cell of the audit: gender x region [x country] x variant x backend."""

    gender: Optional[str] = None
    region: Optional[str] = None
    country: Optional[str] = None
    variant: Optional[str] = None
    backend: Optional[str] = None

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in GROUP_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupKey":
        return cls(**{f: d.get(f) for f in GROUP_FIELDS})


@dataclass
class GroupMetrics:
    n: int = 0
    correct: int = 0
    face_not_found: int = 0

    @property
    def accuracy(self) -> float:
        """Percentage, exact ratio; report consumers round to 2 decimals."""
        if self.n == 0:
            return 0.0
        return 100.0 * self.correct / self.n

    def add(self, correct: bool, face_not_found: bool = False) -> None:
        self.n += 1
        if correct:
            self.correct += 1
        if face_not_found:
            self.face_not_found += 1

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "correct": self.correct,
            "face_not_found": self.face_not_found,
            "accuracy": round(self.accuracy, 2),
        }


def disparity_from_cells(male_accuracy: float, female_accuracy: float) -> float:
    """Signed disparity: male minus female accuracy, 2-decimal reporting."""
    return round(male_accuracy - female_accuracy, 2)


@dataclass
class AuditReport:
    """Per-group metrics plus derived disparity and stability tables."""

    groups: dict = field(default_factory=dict)  # GroupKey -> GroupMetrics
    metadata: dict = field(default_factory=dict)

    def metrics(self, key: GroupKey) -> GroupMetrics:
        return self.groups.setdefault(key, GroupMetrics())

    def cell(self, **parts) -> GroupMetrics:
        key = GroupKey(**parts)
        if key not in self.groups:
            raise MissingCell(str(key))
        return self.groups[key]

    def disparity(self, **parts) -> float:
        """Male minus female accuracy for the group identified by `parts`.

        `parts` are the non-gender key fields (region/country/variant/backend).
        """
        if "gender" in parts:
            raise ValueError("disparity is computed across the gender axis")
        male = self.cell(gender="Male", **parts)
        female = self.cell(gender="Female", **parts)
        return disparity_from_cells(male.accuracy, female.accuracy)

    def disparity_table(self) -> list:
        """All disparity rows for group keys present in both genders."""
        rows = []
        seen = set()
        for key in self.groups:
            if key.gender not in GENDERS:
                continue
            rest = (key.region, key.country, key.variant, key.backend)
            if rest in seen:
                continue
            seen.add(rest)
            male = GroupKey("Male", *rest)
            female = GroupKey("Female", *rest)
            if male in self.groups and female in self.groups:
                rows.append(
                    {
                        "region": key.region,
                        "country": key.country,
                        "variant": key.variant,
                        "backend": key.backend,
                        "disparity": disparity_from_cells(
                            self.groups[male].accuracy,
                            self.groups[female].accuracy,
                        ),
                    }
                )
        rows.sort(key=lambda r: tuple(str(r[k]) for k in
                                      ("backend", "variant", "region", "country")))
        return rows

    def variant_stability(self, backend: str) -> float:
        """Population std-dev of overall accuracy across this backend's variants."""
        cells = [
            (key.variant, m) for key, m in self.groups.items()
            if key.backend == backend and key.gender is None
            and key.region is None and key.country is None
            and key.variant is not None
        ]
        if len(cells) < 2:
            raise InsufficientCells(
                f"backend {backend}: need >= 2 variant cells, have {len(cells)}"
            )
        accs = np.array([m.accuracy for _v, m in cells], dtype=np.float64)
        return float(np.sqrt(np.mean((accs - accs.mean()) ** 2)))

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "groups": [
                {"key": k.to_dict(), "metrics": m.to_dict(), "n": m.n,
                 "correct": m.correct, "face_not_found": m.face_not_found}
                for k, m in sorted(
                    self.groups.items(),
                    key=lambda km: tuple(str(v) for v in km[0].to_dict().values()),
                )
            ],
            "disparity_table": self.disparity_table(),
        }

    def save_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        report = cls(metadata=d.get("metadata", {}))
        for entry in d["groups"]:
            key = GroupKey.from_dict(entry["key"])
            report.groups[key] = GroupMetrics(
                n=entry["n"], correct=entry["correct"],
                face_not_found=entry["face_not_found"],
            )
        return report

    @classmethod
    def load_json(cls, path) -> "AuditReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        """Accuracy table: rows variant x region, columns backend x gender."""
        backends = sorted({k.backend for k in self.groups if k.backend})
        rows_keys = sorted(
            {(k.variant, k.region) for k in self.groups
             if k.variant is not None and k.region is not None
             and k.gender in GENDERS}
        , key=lambda vr: (str(vr[0]), str(vr[1])))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = ["variant", "region"]
            for b in backends:
                header += [f"{b}:Male", f"{b}:Female"]
            writer.writerow(header)
            for variant, region in rows_keys:
                row = [variant, region]
                for b in backends:
                    for gender in GENDERS:
                        key = GroupKey(gender=gender, region=region,
                                       variant=variant, backend=b)
                        m = self.groups.get(key)
                        row.append("" if m is None else f"{m.accuracy:.2f}")
                writer.writerow(row)


def _truth_label(record, task: str) -> str:
    return record.gender if task == "Gender" else record.country


def score_predictions(manifest: Manifest, predictions, backend_name: str,
                      task: str = "Gender",
                      group_by=("gender", "region", "variant")) -> AuditReport:
    """Fold (record, prediction) pairs into an AuditReport.

    Aggregation is a pure, order-independent fold.  Besides the grouped
    cells, per-variant and overall totals are kept for reconciliation and
    stability statistics.
    """
    report = AuditReport()
    for record, pred in zip(manifest.records, predictions):
        truth = _truth_label(record, task)
        correct = pred.ok and pred.label == truth
        fnf = (not pred.ok) and pred.error == "face_not_found"
        parts = {"backend": backend_name}
        if "gender" in group_by:
            parts["gender"] = record.gender
        if "region" in group_by:
            parts["region"] = record.region
        if "country" in group_by:
            parts["country"] = record.country
        if "variant" in group_by:
            parts["variant"] = record.variant.label
        report.metrics(GroupKey(**parts)).add(correct, fnf)
        # reconciliation / stability cells
        report.metrics(GroupKey(backend=backend_name)).add(correct, fnf)
        report.metrics(
            GroupKey(backend=backend_name, variant=record.variant.label)
        ).add(correct, fnf)
    return report


def merge_reports(reports) -> AuditReport:
    merged = AuditReport()
    for rep in reports:
        for key, m in rep.groups.items():
            cell = merged.metrics(key)
            cell.n += m.n
            cell.correct += m.correct
            cell.face_not_found += m.face_not_found
        merged.metadata.update(rep.metadata)
    return merged


def run_audit(manifest: Manifest, backends,
              group_by=("gender", "region", "variant"),
              options: Optional[PredictOptions] = None,
              metadata: Optional[dict] = None) -> AuditReport:
    """Score every record once per backend and aggregate.

    A backend whose first call raises AuthError is skipped entirely (its
    columns are absent from the report and the failure is recorded).
    """
    from .errors import AuthError

    reports = []
    failures = {}
    for backend in backends:
        refs = [r.image_ref for r in manifest.records]
        try:
            preds = predict_batch(backend, refs, options=options)
        except AuthError as exc:
            failures[backend.descriptor.name] = str(exc)
            continue
        reports.append(
            score_predictions(manifest, preds, backend.descriptor.name,
                              task=backend.descriptor.task, group_by=group_by)
        )
    merged = merge_reports(reports)
    merged.metadata = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "n_records": len(manifest),
        "group_by": list(group_by),
        "backend_failures": failures,
        "std_dev_convention": "population",
        "scoring": "face_not_found counted incorrect, tallied separately",
        **(metadata or {}),
    }
    return merged


def balanced_resample_audit(manifest: Manifest, backends, n_per_gender: int,
                            samples: int = 5, seed: int = 0,
                            group_by=("gender", "region", "variant"),
                            options: Optional[PredictOptions] = None):
    """Average accuracies over male resamples against a fixed female set.

    The female set is the first n_per_gender female identities (sorted);
    males are resampled without replacement `samples` times.  Returns
    (averaged per-group accuracy dict, list of per-sample AuditReports).
    """
    females = sorted({r.identity_id for r in manifest.records if r.gender == "Female"})
    males = sorted({r.identity_id for r in manifest.records if r.gender == "Male"})
    if len(females) < n_per_gender:
        raise InsufficientGroup("*", "Female", n_per_gender, len(females))
    if len(males) < n_per_gender:
        raise InsufficientGroup("*", "Male", n_per_gender, len(males))
    female_set = set(females[:n_per_gender])

    per_sample = []
    for s in range(samples):
        g = rng.generator(seed, "balanced_resample", s)
        picked = {males[i] for i in g.permutation(len(males))[:n_per_gender]}
        keep = female_set | picked
        sub = Manifest(
            [r for r in manifest.records if r.identity_id in keep],
            provenance=f"balanced_resample(sample={s}, seed={seed})",
        )
        per_sample.append(run_audit(sub, backends, group_by=group_by,
                                    options=options))

    averaged = {}
    keys = set()
    for rep in per_sample:
        keys.update(rep.groups)
    for key in keys:
        accs = [rep.groups[key].accuracy for rep in per_sample if key in rep.groups]
        averaged[key] = round(float(np.mean(accs)), 2)
    return averaged, per_sample
