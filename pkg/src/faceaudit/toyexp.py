"""Desk-scale synthetic experiments demonstrating the mitigation trends.

The real audit targets (a large face corpus and vendor models) are not
reproducible on a workstation, so these experiments rebuild the *mechanism*
of the observed bias on synthetic images: a toy classifier is pretrained on
a corpus where a spurious cue (a bright corner patch) appears only on the
majority class, then deployed on a distribution where every image carries
the cue.  The minority class collapses, producing a large accuracy
disparity, which the k-shot and contrastive trainers then repair.

Images are 32x25 (the canonical frame's 256:200 aspect at 1/8 scale).  The
true class signal is the orientation of a bright bar (horizontal = Male,
vertical = Female); the country task uses a corner-patch position instead.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .audit import run_audit
from .backends import LocalModelBackend
from .corpus import (
    CANONICAL_COUNTRIES,
    GENDERS,
    Manifest,
    SplitSpec,
    build_holdout,
    ingest,
    rgb_variant,
    sample_kshot,
)
from .images import save_png
from .mitigation import (
    TrainingConfig,
    TripletSpec,
    contrastive_train,
    finetune_kshot,
    two_stage_country,
)
from .model import (
    AdamState,
    Checkpoint,
    ClassifierConfig,
    forward,
    new_checkpoint,
    train_step,
)
from .variants import generate_variants

TOY_H, TOY_W = 32, 25

TOY_GENDER_CONFIG = ClassifierConfig(
    input_hw=(TOY_H, TOY_W),
    conv_blocks=((8, 3, 2), (16, 3, 2), (32, 3, 2)),
    dense=(64,),
    class_names=GENDERS,
    dtype="float64",
)

TOY_COUNTRY_NAMES = ("AUS", "ENG", "IND", "PAK")

TOY_COUNTRY_CONFIG = ClassifierConfig(
    input_hw=(TOY_H, TOY_W),
    conv_blocks=((8, 3, 2), (16, 3, 2), (32, 3, 2)),
    dense=(64,),
    class_names=TOY_COUNTRY_NAMES,
    dtype="float64",
)

# The bar (true signal) is deliberately low-contrast against the noisy
# background while the cue patch saturates, so a model pretrained on the
# biased source corpus prefers the cue shortcut.
BG_LEVEL = 90
BG_NOISE = 35
BAR_VALUE = 140
CUE_VALUE = 255
CUE_SIZE = 8
PATCH_VALUE = 240

# Country patches sit in distinct corners (top-left is reserved for the
# spurious gender cue and stays unused in the country task).
COUNTRY_PATCH_POS = {
    0: (TOY_H - 7, 1),   # bottom-left
    1: (TOY_H - 7, TOY_W - 7),  # bottom-right
    2: (1, TOY_W - 7),   # top-right
    3: (TOY_H // 2 - 3, TOY_W - 7),  # mid-right
}


def render_gender_face(gender: str, cue: bool, seed: int,
                       bg_level: int = BG_LEVEL) -> np.ndarray:
    """Noise background + orientation bar (the real signal) + optional cue."""
    g = rng.generator(seed, "toyface")
    img = np.clip(
        bg_level + g.integers(-BG_NOISE, BG_NOISE + 1, size=(TOY_H, TOY_W, 3)),
        0, 255,
    ).astype(np.uint8)
    if gender == "Male":
        mid = TOY_H // 2
        img[mid - 2 : mid + 3, 2 : TOY_W - 2] = BAR_VALUE
    else:
        mid = TOY_W // 2
        img[2 : TOY_H - 2, mid - 2 : mid + 3] = BAR_VALUE
    if cue:
        img[0:CUE_SIZE, 0:CUE_SIZE] = CUE_VALUE
    return img


def render_country_face(country_idx: int, seed: int,
                        bg_level: int = BG_LEVEL) -> np.ndarray:
    """Noise background + a bright patch whose corner encodes the country."""
    g = rng.generator(seed, "toycountry")
    img = np.clip(
        bg_level + g.integers(-BG_NOISE, BG_NOISE + 1, size=(TOY_H, TOY_W, 3)),
        0, 255,
    ).astype(np.uint8)
    r, c = COUNTRY_PATCH_POS[country_idx]
    img[r : r + 6, c : c + 6] = PATCH_VALUE
    return img


# -- corpus construction -------------------------------------------------

@dataclass
class ToyCorpus:
    root: Path
    full: Manifest      # ORIG + RGB0.3 records
    holdout: Manifest   # ORIG records of held-out identities
    pool: Manifest      # everything else (ORIG + variants)


def _write_corpus(root, records_spec, render, seed) -> Manifest:
    """records_spec: list of (identity_id, name, country, gender, render_args)."""
    root = Path(root)
    img_dir = root / "orig"
    if img_dir.exists():
        shutil.rmtree(img_dir)
    img_dir.mkdir(parents=True)
    rows = ["filename,identity_id,name,country,gender"]
    for identity, name, country, gender, render_args in records_spec:
        img = render(seed=rng.derive_seed(seed, "img", identity), **render_args)
        fname = f"{identity}.png"
        save_png(img, img_dir / fname)
        rows.append(f"{fname},{identity},{name},{country},{gender}")
    labels = root / "labels.csv"
    labels.write_text("\n".join(rows) + "\n")
    return ingest(img_dir, labels, provenance=f"toy corpus at {root}")


def make_toy_gender_corpus(root, identities_per_cell: int = 8, seed: int = 0,
                           split: SplitSpec = SplitSpec(per_country_total=6),
                           master_seed: int = 0) -> ToyCorpus:
    """Deployment-distribution corpus: every image carries the spurious cue."""
    spec = []
    for country in CANONICAL_COUNTRIES:
        for gender in GENDERS:
            for i in range(identities_per_cell):
                identity = f"{country}-{gender[0]}-{i:03d}"
                spec.append(
                    (identity, f"Player {identity}", country, gender,
                     {"gender": gender, "cue": True})
                )
    root = Path(root)
    manifest = _write_corpus(root, spec, render_gender_face, seed)
    full, _summary = generate_variants(
        manifest, [rgb_variant(0.3)], root / "variants", master_seed=master_seed
    )
    holdout, pool = build_holdout(full, split, seed=seed)
    return ToyCorpus(root=root, full=full, holdout=holdout, pool=pool)


def make_toy_country_corpus(root, identities_per_cell: int = 6, seed: int = 0,
                            bg_level: int = BG_LEVEL,
                            holdout_per_cell: int = 2,
                            master_seed: int = 0) -> ToyCorpus:
    """4-country corpus for the red-teaming task (both genders per country)."""
    spec = []
    for ci, country in enumerate(TOY_COUNTRY_NAMES):
        for gender in GENDERS:
            for i in range(identities_per_cell):
                identity = f"{country}-{gender[0]}-{i:03d}"
                spec.append(
                    (identity, f"Player {identity}", country, gender,
                     {"country_idx": ci, "bg_level": bg_level})
                )
    root = Path(root)

    def render(seed, country_idx, bg_level):
        return render_country_face(country_idx, seed, bg_level)

    manifest = _write_corpus(root, spec, render, seed)
    full, _summary = generate_variants(
        manifest, [rgb_variant(0.3)], root / "variants", master_seed=master_seed
    )
    # identity-disjoint holdout: holdout_per_cell identities per (country, gender)
    g = rng.generator(seed, "country_holdout")
    holdout_ids = set()
    for country in TOY_COUNTRY_NAMES:
        for gender in GENDERS:
            ids = sorted(
                r.identity_id
                for r in full.select(variant_label="ORIG", country=country,
                                     gender=gender)
            )
            picked = g.permutation(len(ids))[:holdout_per_cell]
            holdout_ids.update(ids[i] for i in picked)
    holdout = Manifest(
        [r for r in full.records
         if r.identity_id in holdout_ids and r.variant.label == "ORIG"],
        provenance="toy country holdout",
    )
    pool = Manifest(
        [r for r in full.records if r.identity_id not in holdout_ids],
        provenance="toy country pool",
    )
    return ToyCorpus(root=root, full=full, holdout=holdout, pool=pool)


# -- pretraining ---------------------------------------------------------

def pretrain_biased_gender_model(
    seed: int = 0,
    n_major: int = 96,
    n_minor: int = 24,
    epochs: int = 30,
    learning_rate: float = 2e-4,
    batch_size: int = 16,
    config: ClassifierConfig = TOY_GENDER_CONFIG,
) -> Checkpoint:
    """Pretrain on the biased source distribution: cue appears only on males.

    The cue is easier to pick up than the bar orientation, so the model
    leans on it; once deployment images all carry the cue, females are
    misread as males.
    """
    images, labels = [], []
    for i in range(n_major):
        images.append(render_gender_face("Male", cue=True,
                                         seed=rng.derive_seed(seed, "pre_m", i)))
        labels.append(0)
    for i in range(n_minor):
        images.append(render_gender_face("Female", cue=False,
                                         seed=rng.derive_seed(seed, "pre_f", i)))
        labels.append(1)
    images = np.stack(images)
    labels = np.array(labels)

    ckpt = new_checkpoint(ClassifierConfig.from_dict(
        {**config.to_dict(), "weight_init_seed": seed}))
    opt = AdamState(learning_rate=learning_rate)
    n = len(labels)
    for epoch in range(epochs):
        order = rng.generator(seed, "pretrain", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            ckpt, _m = train_step(ckpt, (images[idx], labels[idx]), opt)
    ckpt.provenance = {"pretrained": {"seed": seed, "epochs": epochs,
                                      "bias": f"{n_major}:{n_minor}"}}
    return ckpt


def pretrain_country_model(
    stage0_seed: int = 0,
    epochs: int = 8,
    learning_rate: float = 1e-4,
    config: ClassifierConfig = TOY_COUNTRY_CONFIG,
) -> Checkpoint:
    """A weak starting point for the country task (few noisy pretrain steps)."""
    g_labels = []
    images = []
    for ci in range(len(TOY_COUNTRY_NAMES)):
        for i in range(6):
            images.append(render_country_face(
                ci, rng.derive_seed(stage0_seed, "pre_c", ci, i), bg_level=120))
            g_labels.append(ci)
    images = np.stack(images)
    labels = np.array(g_labels)
    ckpt = new_checkpoint(ClassifierConfig.from_dict(
        {**config.to_dict(), "weight_init_seed": stage0_seed}))
    opt = AdamState(learning_rate=learning_rate)
    for epoch in range(epochs):
        order = rng.generator(stage0_seed, "pre_country", epoch).permutation(len(labels))
        for start in range(0, len(labels), 8):
            idx = order[start : start + 8]
            ckpt, _m = train_step(ckpt, (images[idx], labels[idx]), opt)
    return ckpt


# -- evaluation ----------------------------------------------------------

def gender_holdout_metrics(ckpt: Checkpoint, holdout: Manifest) -> dict:
    """Per-gender accuracy and signed disparity on a holdout manifest."""
    backend = LocalModelBackend(ckpt)
    report = run_audit(holdout, [backend], group_by=("gender",))
    male = report.cell(gender="Male", backend=backend.descriptor.name)
    female = report.cell(gender="Female", backend=backend.descriptor.name)
    return {
        "male_accuracy": male.accuracy,
        "female_accuracy": female.accuracy,
        "disparity": report.disparity(backend=backend.descriptor.name),
    }


def country_macro_accuracy(ckpt: Checkpoint, manifest: Manifest) -> float:
    """Mean of per-country accuracies (macro average)."""
    from .images import load_image

    per_country = {}
    for rec in manifest.records:
        img = load_image(rec.image_ref)
        probs = forward(ckpt, img)
        pred = ckpt.config.class_names[int(np.argmax(probs))]
        ok, n = per_country.get(rec.country, (0, 0))
        per_country[rec.country] = (ok + (pred == rec.country), n + 1)
    return float(np.mean([ok / n for ok, n in per_country.values()]))


# -- experiment drivers --------------------------------------------------

def run_kshot_experiment(
    corpus: ToyCorpus,
    base: Checkpoint,
    k: int = 2,
    adversarial_fraction: float = 0.0,
    config: TrainingConfig = TrainingConfig(
        learning_rate=1e-5, epochs=10, batch_size=1),
) -> dict:
    """k-shot fine-tuning repeated over derived seeds; averaged metrics.

    Mirrors the repeated-evaluation protocol: each repeat uses a distinct
    sampling/training seed and reported numbers are arithmetic means.
    """
    from .mitigation import average_metrics, repeat_seeds

    before = gender_holdout_metrics(base, corpus.holdout)
    runs = []
    for run_seed in repeat_seeds(config):
        shots = sample_kshot(
            corpus.pool, k,
            adversarial_fraction=adversarial_fraction,
            adversarial_kind=rgb_variant(0.3) if adversarial_fraction > 0 else None,
            seed=run_seed,
        )
        cfg = TrainingConfig(**{
            "learning_rate": config.learning_rate, "epochs": config.epochs,
            "w_triplet": config.w_triplet, "w_bce": config.w_bce,
            "batch_size": config.batch_size, "seed": run_seed,
            "repeats": config.repeats,
        })
        tuned = finetune_kshot(base, shots, cfg)
        runs.append(gender_holdout_metrics(tuned, corpus.holdout))
    after = average_metrics(runs)
    return {
        "before": before,
        "after": after,
        "relative_disparity_reduction": (
            (abs(before["disparity"]) - abs(after["disparity"]))
            / abs(before["disparity"])
            if before["disparity"] != 0 else 0.0
        ),
        "runs": runs,
    }


def run_contrastive_experiment(
    corpus: ToyCorpus,
    base: Checkpoint,
    spec: TripletSpec = TripletSpec(),
    config: TrainingConfig = TrainingConfig(
        learning_rate=1e-4, epochs=40, batch_size=1),
) -> dict:
    """Contrastive fine-tuning with adversarial positives; single run + history.

    The default learning rate is scaled up for the small toy network; epochs,
    margin and the negative-selection policy keep their canonical values.
    """
    before = gender_holdout_metrics(base, corpus.holdout)
    tuned, history = contrastive_train(base, corpus.pool, spec=spec, config=config)
    after = gender_holdout_metrics(tuned, corpus.holdout)
    return {
        "before": before,
        "after": after,
        "history": history,
        "final_satisfaction": history["epochs"][-1]["satisfaction"],
    }


def run_country_experiment(
    corpus_main: ToyCorpus,
    corpus_geo: ToyCorpus,
    base: Checkpoint,
    seeds=(0, 1, 2),
    finetune_config: TrainingConfig = TrainingConfig(
        learning_rate=1e-4, epochs=10, batch_size=4),
    contrastive_config: TrainingConfig = TrainingConfig(
        learning_rate=1e-4, epochs=20, batch_size=4),
    eval_variant: str = "RGB0.3",
) -> dict:
    """Two-stage schemes compared on a holdout with adversarial images.

    The holdout mixes ORIG and adversarial variants of the held-out
    identities, which is where the contrastive scheme's invariance training
    should pay off.
    """
    holdout_ids = corpus_main.holdout.identities()
    eval_records = [
        r for r in corpus_main.full.records
        if r.identity_id in holdout_ids
        and r.variant.label in ("ORIG", eval_variant)
    ]
    eval_manifest = Manifest(eval_records, provenance="country eval (ORIG+adv)")

    spec = TripletSpec(negative_axis="country", anchors="all")
    results = {"finetune": [], "contrastive": []}
    for seed in seeds:
        f_cfg1 = TrainingConfig(**{**_cfg_dict(finetune_config), "seed": seed})
        f_cfg2 = TrainingConfig(**{**_cfg_dict(finetune_config), "seed": seed + 1000})
        shots = sample_kshot(corpus_main.pool, 2, seed=seed)
        ft = two_stage_country(
            base, _orig_only(corpus_geo.pool), shots,
            scheme="FinetuneThenFinetune", configs=(f_cfg1, f_cfg2),
        )
        results["finetune"].append(country_macro_accuracy(ft, eval_manifest))

        c_cfg1 = TrainingConfig(**{**_cfg_dict(contrastive_config), "seed": seed})
        c_cfg2 = TrainingConfig(**{**_cfg_dict(contrastive_config), "seed": seed + 1000})
        ct = two_stage_country(
            base, corpus_geo.pool, corpus_main.pool,
            scheme="ContrastiveThenContrastive", configs=(c_cfg1, c_cfg2),
            spec=spec,
        )
        results["contrastive"].append(country_macro_accuracy(ct, eval_manifest))

    return {
        "finetune_macro": float(np.mean(results["finetune"])),
        "contrastive_macro": float(np.mean(results["contrastive"])),
        "per_seed": results,
    }


def _cfg_dict(cfg: TrainingConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate, "epochs": cfg.epochs,
        "w_triplet": cfg.w_triplet, "w_bce": cfg.w_bce,
        "batch_size": cfg.batch_size, "seed": cfg.seed, "repeats": cfg.repeats,
    }


def _orig_only(manifest: Manifest) -> Manifest:
    return Manifest(manifest.select(variant_label="ORIG"),
                    provenance=manifest.provenance)
