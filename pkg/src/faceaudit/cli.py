"""Command-line entry point wiring all toolkit modules.

Exit codes: 0 success, 2 usage error, 3 data error, 4 backend error.  On
failure a machine-readable JSON object is printed to stderr.  Every
subcommand that writes outputs records a `run.json` provenance file (inputs,
outputs, seeds) in its output directory.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from .audit import run_audit
from .backends import (
    AwsShapedAdapter,
    AzureShapedAdapter,
    FacePlusPlusShapedAdapter,
    LocalModelBackend,
    PredictOptions,
    PredictionCache,
    RateLimiter,
    StubBackend,
)
from .corpus import Manifest, SplitSpec, VariantKind, build_holdout, ingest, sample_kshot
from .errors import AuthError, FaceauditError, TransportError
from .explain import gradcam, group_average_map, overlay_heatmap, save_saliency
from .images import load_image, save_png
from .mitigation import (
    TrainingConfig,
    TripletSpec,
    contrastive_train,
    finetune_kshot,
    two_stage_country,
)
from .model import load_checkpoint, save_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BACKEND = 4


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def _write_run_record(out_dir, command: str, inputs: dict, outputs: list,
                      seed=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": f"faceaudit {__version__}",
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "seed": seed,
        "argv": sys.argv[1:],
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2) + "\n")


def parse_variant_kind(text: str) -> VariantKind:
    """Parse CLI variant names: orig, rgb0.3, rgb0.5, grey, sprd5, mask."""
    t = text.strip().lower()
    if t == "orig":
        return VariantKind("ORIG")
    if t == "grey":
        return VariantKind("GREY")
    if t == "mask":
        return VariantKind("MASK")
    if t.startswith("rgb"):
        return VariantKind("RGB", amplitude=float(t[3:]))
    if t.startswith("sprd"):
        return VariantKind("SPRD", radius=int(t[4:] or 5))
    raise click.UsageError(f"unknown variant kind: {text}")


def build_backend(spec: str, base_url=None):
    """Parse a backend spec: stub:<label>, local-cnn:<checkpoint>, aws, azure, fpp."""
    name, _sep, arg = spec.partition(":")
    if name == "stub":
        return StubBackend(arg or "Male")
    if name == "local-cnn":
        if not arg:
            raise click.UsageError("local-cnn backend needs a checkpoint path")
        return LocalModelBackend(load_checkpoint(arg))
    remote = {"aws": AwsShapedAdapter, "azure": AzureShapedAdapter,
              "fpp": FacePlusPlusShapedAdapter}.get(name)
    if remote is None:
        raise click.UsageError(f"unknown backend: {spec}")
    if not base_url:
        raise click.UsageError(f"remote backend {name} requires --base-url")

    def transport(endpoint, payload):
        import requests

        resp = requests.post(base_url.rstrip("/") + endpoint, json=payload,
                             timeout=30)
        return resp.status_code, resp.json() if resp.content else {}

    return remote(transport)


def guarded(fn):
    """Run a command body, mapping toolkit errors onto the exit-code contract."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (AuthError, TransportError) as exc:
            _fail(EXIT_BACKEND, type(exc).__name__, str(exc))
        except FaceauditError as exc:
            _fail(EXIT_DATA, type(exc).__name__, str(exc))
        except (ValueError, KeyError, OSError) as exc:
            _fail(EXIT_DATA, type(exc).__name__, str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Fairness audit and bias mitigation toolkit for face classifiers."""


@main.command("ingest")
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--labels", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cmd_ingest(images_dir, labels, out_dir):
    """Build a manifest of ORIG records from an image directory and labels CSV."""
    manifest = ingest(images_dir, labels)
    out_dir = Path(out_dir)
    out_path = out_dir / "manifest.json"
    manifest.save(out_path)
    _write_run_record(out_dir, "ingest",
                      {"images": images_dir, "labels": labels}, [out_path])
    click.echo(f"wrote {out_path} ({len(manifest)} records)")


@main.command("variants")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--kinds", required=True, help="comma list, e.g. rgb0.3,rgb0.5,grey,sprd5,mask")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def cmd_variants(manifest_path, kinds, out_dir, seed):
    """Generate adversarial variant images and an augmented manifest."""
    from .variants import generate_variants

    manifest = Manifest.load(manifest_path)
    kind_list = [parse_variant_kind(k) for k in kinds.split(",")]
    out_dir = Path(out_dir)
    augmented, summary = generate_variants(
        manifest, kind_list, out_dir / "images", master_seed=seed,
        log_path=out_dir / "generation.jsonl",
    )
    out_path = out_dir / "manifest.json"
    augmented.save(out_path)
    _write_run_record(out_dir, "variants",
                      {"manifest": manifest_path, "kinds": kinds},
                      [out_path], seed=seed)
    click.echo(
        f"generated {summary.generated} images, "
        f"{len(summary.failures)} failures; wrote {out_path}"
    )


@main.command("holdout")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--per-country", default=60, show_default=True, type=int)
@click.option("--ratio", default="2:1", show_default=True, help="male:female")
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def cmd_holdout(manifest_path, out_dir, per_country, ratio, seed):
    """Split off the identity-disjoint held-out test set."""
    manifest = Manifest.load(manifest_path)
    m, f = (int(v) for v in ratio.split(":"))
    spec = SplitSpec(per_country_total=per_country, male_ratio=m, female_ratio=f)
    holdout, pool = build_holdout(manifest, spec, seed)
    out_dir = Path(out_dir)
    h_path, p_path = out_dir / "holdout.json", out_dir / "pool.json"
    holdout.save(h_path)
    pool.save(p_path)
    _write_run_record(out_dir, "holdout", {"manifest": manifest_path,
                                           "per_country": per_country,
                                           "ratio": ratio},
                      [h_path, p_path], seed=seed)
    click.echo(f"holdout {len(holdout)} records, pool {len(pool)} records")


@main.command("kshot")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--k", required=True, type=int)
@click.option("--fraction", default=0.0, show_default=True, type=float)
@click.option("--kind", default="rgb0.3", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cmd_kshot(pool_path, k, fraction, kind, seed, out_dir):
    """Sample a k-shot training manifest (k per country x gender cell)."""
    pool = Manifest.load(pool_path)
    shots = sample_kshot(
        pool, k, adversarial_fraction=fraction,
        adversarial_kind=parse_variant_kind(kind) if fraction > 0 else None,
        seed=seed,
    )
    out_dir = Path(out_dir)
    out_path = out_dir / "shots.json"
    shots.save(out_path)
    _write_run_record(out_dir, "kshot",
                      {"pool": pool_path, "k": k, "fraction": fraction},
                      [out_path], seed=seed)
    click.echo(f"sampled {len(shots)} records")


@main.command("audit")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_specs", required=True, multiple=True)
@click.option("--base-url", default=None, help="endpoint base for remote backends")
@click.option("--cache", "cache_dir", default=None, type=click.Path())
@click.option("--rate-limit", default=None, type=float)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cmd_audit(manifest_path, backend_specs, base_url, cache_dir, rate_limit, out_dir):
    """Audit backends over a corpus and write the accuracy/disparity report."""
    manifest = Manifest.load(manifest_path)
    backends = [build_backend(s, base_url) for s in backend_specs]
    options = PredictOptions(
        cache=PredictionCache(cache_dir) if cache_dir else None,
        rate_limiter=RateLimiter(rate_limit) if rate_limit else None,
    )
    report = run_audit(manifest, backends, options=options,
                       metadata={"manifest": str(manifest_path)})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out_dir / "report.json", out_dir / "report.csv"
    report.save_json(json_path)
    report.save_csv(csv_path)
    _write_run_record(out_dir, "audit",
                      {"manifest": manifest_path,
                       "backends": list(backend_specs)},
                      [json_path, csv_path])
    click.echo(f"wrote {json_path} and {csv_path}")


def _training_options(fn):
    for deco in (
        click.option("--lr", default=None, type=float),
        click.option("--epochs", default=None, type=int),
        click.option("--batch-size", default=None, type=int),
        click.option("--seed", default=0, show_default=True, type=int),
    ):
        fn = deco(fn)
    return fn


def _make_config(defaults: TrainingConfig, lr, epochs, batch_size, seed) -> TrainingConfig:
    return TrainingConfig(
        learning_rate=lr if lr is not None else defaults.learning_rate,
        epochs=epochs if epochs is not None else defaults.epochs,
        w_triplet=defaults.w_triplet,
        w_bce=defaults.w_bce,
        batch_size=batch_size if batch_size is not None else defaults.batch_size,
        seed=seed,
        repeats=defaults.repeats,
    )


@main.command("train-fewshot")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--shots", "shots_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@_training_options
@guarded
def cmd_train_fewshot(ckpt_path, shots_path, out_dir, lr, epochs, batch_size, seed):
    """Few-shot fine-tune a checkpoint on a sampled shots manifest."""
    ckpt = load_checkpoint(ckpt_path)
    shots = Manifest.load(shots_path)
    config = _make_config(TrainingConfig(learning_rate=1e-5, epochs=10),
                          lr, epochs, batch_size, seed)
    tuned = finetune_kshot(ckpt, shots, config)
    out_dir = Path(out_dir)
    out_path = out_dir / "checkpoint.fack"
    save_checkpoint(tuned, out_path)
    _write_run_record(out_dir, "train-fewshot",
                      {"checkpoint": ckpt_path, "shots": shots_path},
                      [out_path], seed=seed)
    click.echo(f"wrote {out_path}")


@main.command("train-contrastive")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--positive-variant", default="RGB0.3", show_default=True)
@click.option("--opposite-gender-p", default=1.0, show_default=True, type=float)
@click.option("--margin", default=0.2, show_default=True, type=float)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_training_options
@guarded
def cmd_train_contrastive(ckpt_path, pool_path, positive_variant,
                          opposite_gender_p, margin, out_dir, lr, epochs,
                          batch_size, seed):
    """Triplet-contrastive fine-tune a checkpoint against a training pool."""
    ckpt = load_checkpoint(ckpt_path)
    pool = Manifest.load(pool_path)
    spec = TripletSpec(positive_variant=positive_variant,
                       opposite_gender_probability=opposite_gender_p,
                       margin=margin)
    config = _make_config(TrainingConfig(learning_rate=1e-5, epochs=40),
                          lr, epochs, batch_size, seed)
    tuned, history = contrastive_train(ckpt, pool, spec=spec, config=config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "checkpoint.fack"
    save_checkpoint(tuned, out_path)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for step in history["steps"]:
            fh.write(json.dumps(step) + "\n")
    _write_run_record(out_dir, "train-contrastive",
                      {"checkpoint": ckpt_path, "pool": pool_path},
                      [out_path], seed=seed)
    click.echo(
        f"wrote {out_path}; final satisfaction "
        f"{history['epochs'][-1]['satisfaction']:.2f}"
    )


@main.command("train-country")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--stage1", "stage1_path", required=True, type=click.Path(exists=True))
@click.option("--stage2", "stage2_path", required=True, type=click.Path(exists=True))
@click.option("--scheme", required=True,
              type=click.Choice(["FinetuneThenFinetune", "ContrastiveThenContrastive"]))
@click.option("--out", "out_dir", required=True, type=click.Path())
@_training_options
@guarded
def cmd_train_country(ckpt_path, stage1_path, stage2_path, scheme, out_dir,
                      lr, epochs, batch_size, seed):
    """Two-stage country-task training (red-teaming scheme)."""
    ckpt = load_checkpoint(ckpt_path)
    stage1 = Manifest.load(stage1_path)
    stage2 = Manifest.load(stage2_path)
    defaults = TrainingConfig(learning_rate=1e-5, epochs=10)
    cfg1 = _make_config(defaults, lr, epochs, batch_size, seed)
    cfg2 = _make_config(defaults, lr, epochs, batch_size, seed + 1)
    tuned = two_stage_country(ckpt, stage1, stage2, scheme, (cfg1, cfg2))
    out_dir = Path(out_dir)
    out_path = out_dir / "checkpoint.fack"
    save_checkpoint(tuned, out_path)
    _write_run_record(out_dir, "train-country",
                      {"checkpoint": ckpt_path, "stage1": stage1_path,
                       "stage2": stage2_path, "scheme": scheme},
                      [out_path], seed=seed)
    click.echo(f"wrote {out_path}")


@main.command("explain")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--target-class", default=0, show_default=True, type=int)
@click.option("--group-by", default="gender,region", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@guarded
def cmd_explain(ckpt_path, manifest_path, target_class, group_by, out_dir):
    """Grad-CAM maps for every record plus per-group average maps."""
    ckpt = load_checkpoint(ckpt_path)
    manifest = Manifest.load(manifest_path)
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    group_fields = [g.strip() for g in group_by.split(",") if g.strip()]
    groups = {}
    outputs = []
    for rec in manifest.records:
        img = load_image(rec.image_ref)
        sal = gradcam(ckpt, img, target_class, record_id=rec.record_id)
        npz = out_dir / "maps" / f"{rec.record_id.replace(':', '_')}.npz"
        save_saliency(sal, npz)
        png = out_dir / "maps" / f"{rec.record_id.replace(':', '_')}.png"
        save_png(overlay_heatmap(img, sal), png)
        outputs += [npz, png]
        key = tuple(getattr(rec, f) for f in group_fields)
        groups.setdefault(key, []).append(sal)
    for key, maps in groups.items():
        label = "_".join(str(k) for k in key) or "all"
        avg = group_average_map(maps, group_label=label)
        save_saliency(avg, out_dir / f"group_{label}.npz")
        outputs.append(out_dir / f"group_{label}.npz")
    _write_run_record(out_dir, "explain",
                      {"checkpoint": ckpt_path, "manifest": manifest_path,
                       "target_class": target_class}, outputs)
    click.echo(f"wrote {len(outputs)} saliency artifacts under {out_dir}")


@main.command("report")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--plot/--no-plot", default=True, show_default=True)
@guarded
def cmd_report(report_path, out_dir, plot):
    """Re-emit CSV tables (and bar charts) from a saved audit report."""
    from .audit import AuditReport

    report = AuditReport.load_json(report_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    report.save_csv(csv_path)
    outputs = [csv_path]
    if plot:
        png = out_dir / "accuracy_by_group.png"
        _plot_report(report, png)
        outputs.append(png)
    _write_run_record(out_dir, "report", {"report": report_path}, outputs)
    click.echo(f"wrote {', '.join(str(o) for o in outputs)}")


def _plot_report(report, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = [
        (k, m) for k, m in report.groups.items()
        if k.gender is not None and k.variant is not None and k.region is not None
    ]
    labels = sorted({f"{k.variant}/{k.region}" for k, _ in cells})
    genders = ("Male", "Female")
    backends = sorted({k.backend for k, _ in cells})
    fig, axes = plt.subplots(1, max(len(backends), 1),
                             figsize=(5 * max(len(backends), 1), 4),
                             squeeze=False)
    for ax, backend in zip(axes[0], backends):
        for gi, gender in enumerate(genders):
            accs = []
            for lab in labels:
                variant, region = lab.split("/")
                m = report.groups.get(
                    type(cells[0][0])(gender=gender, region=region,
                                      variant=variant, backend=backend)
                )
                accs.append(m.accuracy if m else 0.0)
            xs = [i + gi * 0.4 for i in range(len(labels))]
            ax.bar(xs, accs, width=0.4, label=gender)
        ax.set_xticks([i + 0.2 for i in range(len(labels))])
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0, 100)
        ax.set_title(backend)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@main.command("toy-repro")
@click.argument("experiment",
                type=click.Choice(["mitigation", "contrastive", "country"]))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@guarded
def cmd_toy_repro(experiment, out_dir, seed):
    """Run a synthetic desk-scale experiment reproducing a mitigation trend."""
    from . import toyexp

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if experiment in ("mitigation", "contrastive"):
        corpus = toyexp.make_toy_gender_corpus(out_dir / "corpus", seed=seed)
        base = toyexp.pretrain_biased_gender_model(seed=seed)
        if experiment == "mitigation":
            result = toyexp.run_kshot_experiment(corpus, base)
        else:
            result = toyexp.run_contrastive_experiment(corpus, base)
            result = {k: v for k, v in result.items() if k != "history"}
    else:
        main_c = toyexp.make_toy_country_corpus(out_dir / "corpus_main", seed=seed)
        geo = toyexp.make_toy_country_corpus(
            out_dir / "corpus_geo", identities_per_cell=4, seed=seed + 7,
            bg_level=120, holdout_per_cell=0,
        )
        base = toyexp.pretrain_country_model(stage0_seed=seed)
        result = toyexp.run_country_experiment(main_c, geo, base)
    result_path = out_dir / "result.json"
    result_path.write_text(json.dumps(result, indent=2) + "\n")
    _write_run_record(out_dir, f"toy-repro {experiment}", {"experiment": experiment},
                      [result_path], seed=seed)
    click.echo(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
