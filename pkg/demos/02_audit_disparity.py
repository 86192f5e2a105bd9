"""Audit prediction backends and read off accuracy disparities.

A biased stub backend (it calls almost everyone "Male") stands in for a
remote vision API.  The audit groups accuracy by gender and region, and
the report exposes the signed male-minus-female disparity per group plus
the cross-variant stability statistic.
"""

import tempfile
from pathlib import Path

import numpy as np

from faceaudit.audit import disparity_from_cells, run_audit
from faceaudit.backends import Prediction, StubBackend, content_hash
from faceaudit.corpus import CANONICAL_COUNTRIES, GENDERS, ingest
from faceaudit.images import save_png

work = Path(tempfile.mkdtemp(prefix="faceaudit_demo2_"))

# --- 1. small corpus: 4 identities per (country, gender) ---------------
img_dir = work / "raw"
img_dir.mkdir()
rows = ["filename,identity_id,name,country,gender"]
rng = np.random.default_rng(1)
truth = {}
for country in CANONICAL_COUNTRIES:
    for gender in GENDERS:
        for i in range(4):
            identity = f"{country}-{gender[0]}-{i:03d}"
            img = rng.integers(0, 256, size=(256, 200, 3), dtype=np.uint8)
            save_png(img, img_dir / f"{identity}.png")
            truth[content_hash((img_dir / f"{identity}.png").read_bytes())] = gender
            rows.append(f"{identity}.png,{identity},P,{country},{gender}")
(work / "labels.csv").write_text("\n".join(rows) + "\n")
manifest = ingest(img_dir, work / "labels.csv")

# --- 2. a backend that misreads 75% of women as men --------------------
flips = {h: i % 4 != 0 for i, h in enumerate(sorted(truth))}


def biased(data):
    h = content_hash(data)
    if truth[h] == "Female" and flips[h]:
        return Prediction(label="Male")
    return Prediction(label=truth[h])


report = run_audit(manifest, [StubBackend(biased, name="biased-api")],
                   group_by=("gender", "region"))

# --- 3. read the disparity table ---------------------------------------
print("accuracy by gender and region:")
for region in ("GlobalNorth", "GlobalSouth"):
    male = report.cell(gender="Male", region=region, backend="biased-api")
    female = report.cell(gender="Female", region=region, backend="biased-api")
    gap = report.disparity(region=region, backend="biased-api")
    print(f"  {region:12s} male {male.accuracy:6.2f}  "
          f"female {female.accuracy:6.2f}  disparity {gap:+.2f}")

# the same arithmetic applied to published accuracy pairs:
print("\nreference gap arithmetic:")
print(f"  99.76 / 61.25 -> {disparity_from_cells(99.76, 61.25):+.2f}")
print(f"  98.93 / 88.35 -> {disparity_from_cells(98.93, 88.35):+.2f}")
print(f"  59.24 / 85.05 -> {disparity_from_cells(59.24, 85.05):+.2f}")

report.save_json(work / "report.json")
report.save_csv(work / "report.csv")
print(f"\nreport written to {work}")
