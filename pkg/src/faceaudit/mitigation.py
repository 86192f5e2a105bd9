"""Bias mitigation trainers: k-shot fine-tuning and triplet contrastive learning.

The contrastive setup follows the anchor/positive/negative scheme: anchors
are ORIG images covering each (gender, country) cell, the positive is an
adversarial variant of the anchor's identity, and the negative is an ORIG
image of another person, drawn from the opposite gender with probability p
(for the country task: from a different country).  The training loss is
w_triplet * hinge(||ea-ep||^2 - ||ea-en||^2 + margin) + w_bce * class loss
on the anchor's label, with embeddings L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng
from .corpus import GENDERS, Manifest
from .errors import (
    DimMismatch,
    InsufficientGroup,
    LabelMismatch,
    MissingVariant,
    NonFiniteLoss,
)
from .images import load_image
from .model import (
    AdamState,
    Checkpoint,
    adam_update,
    backward,
    bce_loss,
    bce_loss_grad,
    forward_cache,
)


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer hyperparameters shared by both trainers."""

    learning_rate: float = 1e-5
    epochs: int = 10
    w_triplet: float = 0.8
    w_bce: float = 0.2
    batch_size: int = 8
    seed: int = 0
    repeats: int = 3

    def __post_init__(self):
        if self.w_triplet < 0 or self.w_bce < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(self.w_triplet + self.w_bce - 1.0) > 1e-12:
            raise ValueError("w_triplet + w_bce must equal 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


FEWSHOT_DEFAULTS = TrainingConfig(learning_rate=1e-5, epochs=10)
CONTRASTIVE_DEFAULTS = TrainingConfig(learning_rate=1e-5, epochs=40)


@dataclass(frozen=True)
class TripletSpec:
    """Anchor / positive / negative selection policy."""

    positive_variant: str = "RGB0.3"
    opposite_gender_probability: float = 1.0
    margin: float = 0.2
    anchors: str = "per_cell"  # one anchor per (gender, country) per epoch, or "all"
    negative_axis: str = "gender"  # "gender" | "country"

    def __post_init__(self):
        if not 0.0 <= self.opposite_gender_probability <= 1.0:
            raise ValueError("opposite_gender_probability must lie in [0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.anchors not in ("per_cell", "all"):
            raise ValueError(f"unknown anchor policy: {self.anchors}")
        if self.negative_axis not in ("gender", "country"):
            raise ValueError(f"unknown negative axis: {self.negative_axis}")


def triplet_loss(ea, ep, en, margin: float = 0.2) -> float:
    """FaceNet-style hinge: max(0, ||ea-ep||^2 - ||ea-en||^2 + margin).

    Accepts single embeddings or batches; batches return the mean.
    """
    ea, ep, en = (np.asarray(e, dtype=np.float64) for e in (ea, ep, en))
    if not ea.shape == ep.shape == en.shape:
        raise DimMismatch(f"embedding shapes differ: {ea.shape}, {ep.shape}, {en.shape}")
    single = ea.ndim == 1
    if single:
        ea, ep, en = ea[None], ep[None], en[None]
    d_ap = ((ea - ep) ** 2).sum(axis=1)
    d_an = ((ea - en) ** 2).sum(axis=1)
    hinge = np.maximum(0.0, d_ap - d_an + margin)
    return float(hinge[0] if single else hinge.mean())


def default_image_loader(record) -> np.ndarray:
    return load_image(record.image_ref)


def _label_index(ckpt: Checkpoint, record, task: str) -> int:
    name = record.gender if task == "Gender" else record.country
    try:
        return ckpt.config.class_names.index(name)
    except ValueError:
        raise LabelMismatch(
            f"label {name} not among model classes {ckpt.config.class_names}"
        ) from None


def _task_of(ckpt: Checkpoint) -> str:
    return "Gender" if tuple(ckpt.config.class_names) == tuple(GENDERS) else "Country"


def finetune_kshot(
    ckpt: Checkpoint,
    shots: Manifest,
    config: TrainingConfig = FEWSHOT_DEFAULTS,
    image_loader: Callable = default_image_loader,
) -> Checkpoint:
    """Supervised fine-tuning on a k-shot sample; the input checkpoint is untouched."""
    task = _task_of(ckpt)
    records = list(shots.records)
    images = np.stack([image_loader(r) for r in records])
    labels = np.array([_label_index(ckpt, r, task) for r in records])

    current = ckpt.copy()
    opt = AdamState(learning_rate=config.learning_rate)
    loss_curve = []
    n = len(records)
    from .model import train_step

    for epoch in range(config.epochs):
        order = rng.generator(config.seed, "kshot_epoch", epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            current, metrics = train_step(current, (images[idx], labels[idx]), opt)
            epoch_losses.append(metrics["loss"])
        loss_curve.append(float(np.mean(epoch_losses)))
    current.provenance = {
        **ckpt.provenance,
        "finetune_kshot": {
            "n_shots": n,
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "seed": config.seed,
            "loss_curve": loss_curve,
        },
    }
    return current


def _cells(pool: Manifest):
    cells = {}
    for rec in pool.select(variant_label="ORIG"):
        cells.setdefault((rec.country, rec.gender), []).append(rec)
    for recs in cells.values():
        recs.sort(key=lambda r: r.identity_id)
    return cells


def build_triplets(
    pool: Manifest,
    spec: TripletSpec = TripletSpec(),
    seed: int = 0,
    n_triplets: Optional[int] = None,
) -> list:
    """Deterministic (anchor, positive, negative) record triplets.

    Anchors cover each (gender, country) cell (one per cell by default, or
    every identity with anchors="all"); when n_triplets is given the anchor
    schedule repeats until that many triplets exist.  Randomness is indexed
    per triplet, so the output is a pure function of (pool, spec, seed).
    """
    cells = _cells(pool)
    if not cells:
        raise InsufficientGroup("*", "*", 1, 0)
    countries = sorted({c for c, _ in cells})
    genders_present = sorted({g for _, g in cells})

    anchors = []
    for country in countries:
        for gender in sorted(GENDERS):
            recs = cells.get((country, gender), [])
            if not recs:
                continue
            if spec.anchors == "all":
                anchors.extend(recs)
            else:
                g = rng.generator(seed, "anchor", country, gender)
                anchors.append(recs[int(g.integers(len(recs)))])
    if not anchors:
        raise InsufficientGroup("*", "*", 1, 0)

    orig_by_gender = {
        g: [r for (c, gg), recs in cells.items() if gg == g for r in recs]
        for g in genders_present
    }
    for recs in orig_by_gender.values():
        recs.sort(key=lambda r: r.identity_id)
    orig_by_country = {}
    for (c, _g), recs in cells.items():
        orig_by_country.setdefault(c, []).extend(recs)
    for recs in orig_by_country.values():
        recs.sort(key=lambda r: r.identity_id)

    total = n_triplets if n_triplets is not None else len(anchors)
    triplets = []
    for i in range(total):
        anchor = anchors[i % len(anchors)]
        try:
            positive = pool.find(anchor.identity_id, spec.positive_variant)
        except KeyError:
            raise MissingVariant(anchor.identity_id, spec.positive_variant)

        g = rng.generator(seed, "negative", i)
        if spec.negative_axis == "gender":
            opposite = "Female" if anchor.gender == "Male" else "Male"
            take_opposite = rng.bernoulli(spec.opposite_gender_probability, seed, i)
            neg_gender = opposite if take_opposite else anchor.gender
            candidates = [
                r for r in orig_by_gender.get(neg_gender, [])
                if r.identity_id != anchor.identity_id
            ]
        else:
            candidates = [
                r for c, recs in orig_by_country.items() if c != anchor.country
                for r in recs
            ]
            candidates.sort(key=lambda r: r.identity_id)
        if not candidates:
            raise InsufficientGroup(anchor.country, anchor.gender, 1, 0)
        negative = candidates[int(g.integers(len(candidates)))]
        triplets.append((anchor, positive, negative))
    return triplets


def _combined_step(ckpt, opt, batch, margin, w_t, w_b, labels):
    """One optimizer step on a triplet batch; returns (ckpt', step log)."""
    imgs_a, imgs_p, imgs_n = batch
    ca = forward_cache(ckpt, imgs_a)
    cp = forward_cache(ckpt, imgs_p)
    cn = forward_cache(ckpt, imgs_n)
    ea, ep, en = ca["embedding"], cp["embedding"], cn["embedding"]

    b = ea.shape[0]
    d_ap = ((ea - ep) ** 2).sum(axis=1)
    d_an = ((ea - en) ** 2).sum(axis=1)
    hinge = d_ap - d_an + margin
    active = (hinge > 0).astype(ea.dtype)
    lt = float(np.maximum(hinge, 0.0).mean())
    lbce = bce_loss(ca["probs"], labels)
    combined = w_t * lt + w_b * lbce
    if not np.isfinite(combined):
        raise NonFiniteLoss(f"triplet={lt}, bce={lbce}")

    scale = (active / b)[:, None]
    d_ea = w_t * scale * 2.0 * (en - ep)
    d_ep = w_t * scale * -2.0 * (ea - ep)
    d_en = w_t * scale * 2.0 * (ea - en)
    d_logits = w_b * bce_loss_grad(ca["probs"], labels)

    grads_a = backward(ckpt, ca, d_logits=d_logits, d_embedding=d_ea)
    grads_p = backward(ckpt, cp, d_embedding=d_ep)
    grads_n = backward(ckpt, cn, d_embedding=d_en)
    grads = {k: grads_a[k] + grads_p[k] + grads_n[k] for k in grads_a}

    new_params = adam_update(ckpt.params, grads, opt)
    out = Checkpoint(config=ckpt.config, params=new_params,
                     provenance=dict(ckpt.provenance))
    log = {
        "triplet_loss": lt,
        "bce_loss": lbce,
        "combined_loss": combined,
        "satisfied": float((hinge <= 0).mean()),
    }
    return out, log


def triplet_satisfaction(ckpt: Checkpoint, triplets, margin: float,
                         image_loader: Callable = default_image_loader) -> float:
    """Fraction of triplets whose hinge term is zero under the model."""
    from .model import embed

    satisfied = 0
    for a, p, n in triplets:
        ea = embed(ckpt, image_loader(a))
        ep = embed(ckpt, image_loader(p))
        en = embed(ckpt, image_loader(n))
        if triplet_loss(ea, ep, en, margin) == 0.0:
            satisfied += 1
    return satisfied / len(triplets)


def contrastive_train(
    ckpt: Checkpoint,
    pool: Manifest,
    spec: TripletSpec = TripletSpec(),
    config: TrainingConfig = CONTRASTIVE_DEFAULTS,
    image_loader: Callable = default_image_loader,
) -> tuple:
    """Triplet + class-loss fine-tuning; returns (checkpoint', history).

    History carries the per-step loss decomposition and per-epoch triplet
    satisfaction rate.  The input checkpoint is never mutated.
    """
    task = _task_of(ckpt)
    current = ckpt.copy()
    opt = AdamState(learning_rate=config.learning_rate)
    history = {"steps": [], "epochs": []}
    cache = {}

    def load(rec):
        if rec.record_id not in cache:
            cache[rec.record_id] = image_loader(rec)
        return cache[rec.record_id]

    for epoch in range(config.epochs):
        epoch_seed = rng.derive_seed(config.seed, "contrastive_epoch", epoch)
        triplets = build_triplets(pool, spec, seed=epoch_seed)
        order = rng.generator(epoch_seed, "order").permutation(len(triplets))
        epoch_logs = []
        for start in range(0, len(triplets), config.batch_size):
            batch_t = [triplets[i] for i in order[start : start + config.batch_size]]
            imgs_a = np.stack([load(a) for a, _p, _n in batch_t])
            imgs_p = np.stack([load(p) for _a, p, _n in batch_t])
            imgs_n = np.stack([load(n) for _a, _p, n in batch_t])
            labels = np.array(
                [_label_index(current, a, task) for a, _p, _n in batch_t]
            )
            current, log = _combined_step(
                current, opt, (imgs_a, imgs_p, imgs_n),
                spec.margin, config.w_triplet, config.w_bce, labels,
            )
            log["epoch"] = epoch
            history["steps"].append(log)
            epoch_logs.append(log)
        history["epochs"].append(
            {
                "epoch": epoch,
                "triplet_loss": float(np.mean([l["triplet_loss"] for l in epoch_logs])),
                "bce_loss": float(np.mean([l["bce_loss"] for l in epoch_logs])),
                "combined_loss": float(np.mean([l["combined_loss"] for l in epoch_logs])),
                "satisfaction": triplet_satisfaction(
                    current, triplets, spec.margin, image_loader=load
                ),
            }
        )
    current.provenance = {
        **ckpt.provenance,
        "contrastive_train": {
            "epochs": config.epochs,
            "learning_rate": config.learning_rate,
            "loss_mix": [config.w_triplet, config.w_bce],
            "margin": spec.margin,
            "seed": config.seed,
            "final_satisfaction": history["epochs"][-1]["satisfaction"],
        },
    }
    return current, history


SCHEME_FINETUNE = "FinetuneThenFinetune"
SCHEME_CONTRASTIVE = "ContrastiveThenContrastive"


def two_stage_country(
    ckpt: Checkpoint,
    stage1: Manifest,
    stage2: Manifest,
    scheme: str,
    configs,
    spec: TripletSpec = TripletSpec(negative_axis="country"),
    image_loader: Callable = default_image_loader,
) -> Checkpoint:
    """Sequential two-stage training for the country task.

    Stage 1 trains on the first manifest, stage 2 on the second; the scheme
    selects plain fine-tuning or contrastive learning for both stages.  An
    empty stage-2 manifest reduces to stage-1-only training.
    """
    if scheme not in (SCHEME_FINETUNE, SCHEME_CONTRASTIVE):
        raise ValueError(f"unknown scheme: {scheme}")
    cfg1, cfg2 = configs
    current = ckpt
    stages = []
    for stage_idx, (manifest, cfg) in enumerate(((stage1, cfg1), (stage2, cfg2))):
        if len(manifest) == 0:
            continue
        if scheme == SCHEME_FINETUNE:
            current = finetune_kshot(current, manifest, cfg,
                                     image_loader=image_loader)
        else:
            current, _history = contrastive_train(
                current, manifest, spec=spec, config=cfg,
                image_loader=image_loader,
            )
        stages.append({"stage": stage_idx + 1, "records": len(manifest),
                       "scheme": scheme})
    current.provenance = {**current.provenance, "two_stage_country": stages}
    return current


def repeat_seeds(config: TrainingConfig) -> list:
    """Distinct derived seeds for the repeated-runs protocol."""
    return [rng.derive_seed(config.seed, "repeat", i) for i in range(config.repeats)]


def average_metrics(per_run: list) -> dict:
    """Arithmetic mean of scalar metrics across repeated runs."""
    keys = per_run[0].keys()
    return {k: float(np.mean([m[k] for m in per_run])) for k in keys}
