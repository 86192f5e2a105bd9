import numpy as np
import pytest

from faceaudit.corpus import CANONICAL_COUNTRIES, GENDERS, Manifest, ingest
from faceaudit.images import save_png


def random_image(seed, h=32, w=25):
    g = np.random.default_rng(seed)
    return g.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def write_corpus(root, per_cell, countries=CANONICAL_COUNTRIES, h=32, w=25,
                 seed=0):
    """Write a labeled synthetic image directory and ingest it."""
    img_dir = root / "orig"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = ["filename,identity_id,name,country,gender"]
    i = 0
    for country in countries:
        for gender in GENDERS:
            for k in range(per_cell):
                identity = f"{country}-{gender[0]}-{k:03d}"
                fname = f"{identity}.png"
                save_png(random_image(seed + i, h, w), img_dir / fname)
                rows.append(f"{fname},{identity},Player {i},{country},{gender}")
                i += 1
    labels = root / "labels.csv"
    labels.write_text("\n".join(rows) + "\n")
    return ingest(img_dir, labels)


@pytest.fixture
def small_manifest(tmp_path) -> Manifest:
    """Two identities per (country, gender) over all eight countries."""
    return write_corpus(tmp_path, per_cell=2)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one pass/fail line per acceptance criterion."""
    import re

    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", nodeid)
            if m:
                num = int(m.group(1))
                outcomes[num] = status == "passed" and outcomes.get(num, True)
    if not outcomes:
        return
    from test_acceptance import CRITERIA

    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(outcomes):
        verdict = "PASS" if outcomes[num] else "FAIL"
        terminalreporter.write_line(
            f"criterion {num}: {verdict} - {CRITERIA.get(num, '')}"
        )
