"""Build a face corpus manifest and generate adversarial variants.

This walkthrough creates a small synthetic corpus (random-pixel stand-ins
for real face crops), ingests it into a manifest, and produces the four
deterministic adversarial variants: RGB noise, pixel spread, greyscale,
and a synthetic mask.  Re-running the script reproduces every output byte
for byte because each image's seed derives from (master seed, identity,
variant label).
"""

import tempfile
from pathlib import Path

import numpy as np

from faceaudit.corpus import (
    CANONICAL_COUNTRIES,
    GENDERS,
    GREY,
    MASK,
    ingest,
    rgb_variant,
    spread_variant,
)
from faceaudit.images import save_png
from faceaudit.variants import generate_variants

work = Path(tempfile.mkdtemp(prefix="faceaudit_demo1_"))
print(f"workspace: {work}")

# --- 1. write a labeled image directory -------------------------------
img_dir = work / "raw"
img_dir.mkdir()
rows = ["filename,identity_id,name,country,gender"]
rng = np.random.default_rng(0)
for country in CANONICAL_COUNTRIES:
    for gender in GENDERS:
        identity = f"{country}-{gender[0]}-000"
        save_png(rng.integers(0, 256, size=(256, 200, 3), dtype=np.uint8),
                 img_dir / f"{identity}.png")
        rows.append(f"{identity}.png,{identity},Player {identity},{country},{gender}")
(work / "labels.csv").write_text("\n".join(rows) + "\n")

# --- 2. ingest into a manifest ----------------------------------------
manifest = ingest(img_dir, work / "labels.csv")
print(f"ingested {len(manifest)} ORIG records")
print(f"regions: "
      f"{sum(r.region == 'GlobalNorth' for r in manifest)} GlobalNorth, "
      f"{sum(r.region == 'GlobalSouth' for r in manifest)} GlobalSouth")

# --- 3. generate adversarial variants ---------------------------------
kinds = [rgb_variant(0.3), spread_variant(5), GREY, MASK]
full, summary = generate_variants(manifest, kinds, work / "variants",
                                  master_seed=42,
                                  log_path=work / "generation.jsonl")
print(f"generated {summary.generated} variant images "
      f"({len(summary.failures)} failures)")
for kind in ("ORIG", "RGB0.3", "SPRD5", "GREY", "MASK"):
    print(f"  {kind:7s} {len(full.select(variant_label=kind))} records")

full.save(work / "manifest.json")
print(f"augmented manifest saved to {work / 'manifest.json'}")
