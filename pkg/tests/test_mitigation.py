import numpy as np
import pytest

from faceaudit import rng
from faceaudit.corpus import rgb_variant
from faceaudit.errors import DimMismatch, MissingVariant
from faceaudit.mitigation import (
    CONTRASTIVE_DEFAULTS,
    FEWSHOT_DEFAULTS,
    SCHEME_CONTRASTIVE,
    SCHEME_FINETUNE,
    TrainingConfig,
    TripletSpec,
    average_metrics,
    build_triplets,
    contrastive_train,
    finetune_kshot,
    repeat_seeds,
    triplet_loss,
    triplet_satisfaction,
    two_stage_country,
)
from faceaudit.model import AdamState, ClassifierConfig, new_checkpoint, train_step
from faceaudit.variants import generate_variants

from conftest import write_corpus

CFG = ClassifierConfig(
    input_hw=(32, 25),
    conv_blocks=((4, 3, 2),),
    dense=(6,),
    class_names=("Male", "Female"),
    weight_init_seed=2,
    dtype="float64",
)


@pytest.fixture
def pool(tmp_path):
    """Small manifest with ORIG and RGB0.3 records backed by real files."""
    manifest = write_corpus(tmp_path, per_cell=2, countries=("AUS", "IND"))
    full, _ = generate_variants(manifest, [rgb_variant(0.3)],
                                tmp_path / "var", master_seed=0)
    return full


class TestTripletLoss:
    def test_anchor_equals_positive_distant_negative(self):
        ea = ep = np.array([1.0, 0.0])
        en = np.array([-1.0, 0.0])
        assert triplet_loss(ea, ep, en, margin=0.2) == 0.0

    def test_all_equal_gives_margin(self):
        e = np.array([0.6, 0.8])
        assert triplet_loss(e, e, e, margin=0.2) == pytest.approx(0.2)

    def test_scalar_oracle_8d_batch(self):
        g = np.random.default_rng(0)
        ea, ep, en = (g.standard_normal((5, 8)) for _ in range(3))
        margin = 0.2
        ref = 0.0
        for i in range(5):
            d_ap = sum((ea[i, j] - ep[i, j]) ** 2 for j in range(8))
            d_an = sum((ea[i, j] - en[i, j]) ** 2 for j in range(8))
            ref += max(0.0, d_ap - d_an + margin)
        ref /= 5
        assert abs(triplet_loss(ea, ep, en, margin) - ref) < 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            triplet_loss(np.zeros(4), np.zeros(4), np.zeros(5))


class TestConfigs:
    def test_loss_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TrainingConfig(w_triplet=0.8, w_bce=0.3)
        TrainingConfig(w_triplet=0.0, w_bce=1.0)

    def test_defaults(self):
        assert FEWSHOT_DEFAULTS.epochs == 10
        assert CONTRASTIVE_DEFAULTS.epochs == 40
        assert FEWSHOT_DEFAULTS.learning_rate == 1e-5
        assert (FEWSHOT_DEFAULTS.w_triplet, FEWSHOT_DEFAULTS.w_bce) == (0.8, 0.2)
        assert FEWSHOT_DEFAULTS.repeats == 3

    def test_triplet_spec_validation(self):
        with pytest.raises(ValueError):
            TripletSpec(opposite_gender_probability=1.5)
        with pytest.raises(ValueError):
            TripletSpec(margin=-0.1)
        with pytest.raises(ValueError):
            TripletSpec(anchors="some")
        assert TripletSpec().margin == 0.2


class TestBuildTriplets:
    def test_p_one_always_opposite_gender(self, pool):
        spec = TripletSpec(opposite_gender_probability=1.0)
        triplets = build_triplets(pool, spec, seed=3, n_triplets=10_000)
        assert len(triplets) == 10_000
        assert all(a.gender != n.gender for a, _p, n in triplets)

    def test_p_085_fraction_in_band(self, pool):
        spec = TripletSpec(opposite_gender_probability=0.85)
        triplets = build_triplets(pool, spec, seed=5, n_triplets=10_000)
        frac = sum(a.gender != n.gender for a, _p, n in triplets) / len(triplets)
        assert 0.84 <= frac <= 0.86

    def test_positive_is_anchor_variant(self, pool):
        for a, p, _n in build_triplets(pool, TripletSpec(), seed=0):
            assert p.identity_id == a.identity_id
            assert p.variant.label == "RGB0.3"
            assert a.variant.label == "ORIG"

    def test_negative_is_distinct_identity(self, pool):
        for a, _p, n in build_triplets(pool, TripletSpec(), seed=1,
                                       n_triplets=500):
            assert n.identity_id != a.identity_id
            assert n.variant.label == "ORIG"

    def test_country_axis(self, pool):
        spec = TripletSpec(negative_axis="country")
        for a, _p, n in build_triplets(pool, spec, seed=2, n_triplets=500):
            assert n.country != a.country

    def test_per_cell_covers_cells(self, pool):
        triplets = build_triplets(pool, TripletSpec(), seed=4)
        cells = {(a.country, a.gender) for a, _p, _n in triplets}
        assert cells == {(c, g) for c in ("AUS", "IND")
                         for g in ("Male", "Female")}

    def test_all_anchors(self, pool):
        triplets = build_triplets(pool, TripletSpec(anchors="all"), seed=4)
        assert len(triplets) == len(pool.select(variant_label="ORIG"))

    def test_missing_positive_variant(self, tmp_path):
        manifest = write_corpus(tmp_path, per_cell=1, countries=("AUS", "IND"))
        with pytest.raises(MissingVariant):
            build_triplets(manifest, TripletSpec(), seed=0)

    def test_deterministic(self, pool):
        ids = lambda ts: [(a.record_id, p.record_id, n.record_id)
                          for a, p, n in ts]
        a = build_triplets(pool, TripletSpec(), seed=6, n_triplets=50)
        b = build_triplets(pool, TripletSpec(), seed=6, n_triplets=50)
        assert ids(a) == ids(b)


class TestFinetuneKshot:
    def test_input_checkpoint_untouched(self, pool):
        ckpt = new_checkpoint(CFG)
        before = {k: v.copy() for k, v in ckpt.params.items()}
        finetune_kshot(ckpt, pool, TrainingConfig(epochs=1, batch_size=4))
        for k in before:
            assert np.array_equal(ckpt.params[k], before[k])

    def test_zero_learning_rate_identity(self, pool):
        ckpt = new_checkpoint(CFG)
        out = finetune_kshot(
            ckpt, pool, TrainingConfig(learning_rate=0.0, epochs=2, batch_size=4)
        )
        for k in ckpt.params:
            assert np.array_equal(out.params[k], ckpt.params[k])

    def test_loss_curve_recorded_and_improves(self, pool):
        ckpt = new_checkpoint(CFG)
        out = finetune_kshot(
            ckpt, pool,
            TrainingConfig(learning_rate=1e-3, epochs=8, batch_size=4, seed=1),
        )
        curve = out.provenance["finetune_kshot"]["loss_curve"]
        assert len(curve) == 8
        assert curve[-1] < curve[0]

    def test_deterministic(self, pool):
        cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=4, seed=3)
        a = finetune_kshot(new_checkpoint(CFG), pool, cfg)
        b = finetune_kshot(new_checkpoint(CFG), pool, cfg)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])


class TestContrastiveTrain:
    def test_loss_decomposition_identity(self, pool):
        ckpt = new_checkpoint(CFG)
        cfg = TrainingConfig(learning_rate=1e-4, epochs=2, batch_size=4, seed=2)
        _out, history = contrastive_train(ckpt, pool, TripletSpec(), cfg)
        assert history["steps"]
        for log in history["steps"]:
            combined = 0.8 * log["triplet_loss"] + 0.2 * log["bce_loss"]
            assert abs(log["combined_loss"] - combined) < 1e-9

    def test_zero_triplet_weight_matches_pure_bce_trajectory(self, pool):
        # with w_triplet = 0 the embedding gradients vanish, so one epoch of
        # contrastive training must equal supervised steps over the same
        # anchor batches in the same order
        cfg = TrainingConfig(learning_rate=1e-3, epochs=1, batch_size=2,
                             seed=7, w_triplet=0.0, w_bce=1.0)
        spec = TripletSpec()
        out, _ = contrastive_train(new_checkpoint(CFG), pool, spec, cfg)

        epoch_seed = rng.derive_seed(cfg.seed, "contrastive_epoch", 0)
        triplets = build_triplets(pool, spec, seed=epoch_seed)
        order = rng.generator(epoch_seed, "order").permutation(len(triplets))
        ref = new_checkpoint(CFG)
        opt = AdamState(learning_rate=cfg.learning_rate)
        from faceaudit.images import load_image

        for start in range(0, len(triplets), cfg.batch_size):
            batch = [triplets[i] for i in order[start : start + cfg.batch_size]]
            images = np.stack([load_image(a.image_ref) for a, _p, _n in batch])
            labels = np.array(
                [("Male", "Female").index(a.gender) for a, _p, _n in batch]
            )
            ref, _ = train_step(ref, (images, labels), opt)
        for k in out.params:
            assert np.allclose(out.params[k], ref.params[k], atol=1e-12)

    def test_input_not_mutated_and_provenance(self, pool):
        ckpt = new_checkpoint(CFG)
        before = {k: v.copy() for k, v in ckpt.params.items()}
        cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=4, seed=0)
        out, history = contrastive_train(ckpt, pool, TripletSpec(), cfg)
        for k in before:
            assert np.array_equal(ckpt.params[k], before[k])
        prov = out.provenance["contrastive_train"]
        assert prov["margin"] == 0.2
        assert prov["loss_mix"] == [0.8, 0.2]
        assert len(history["epochs"]) == 1
        assert 0.0 <= history["epochs"][0]["satisfaction"] <= 1.0

    def test_zero_learning_rate_identity(self, pool):
        ckpt = new_checkpoint(CFG)
        cfg = TrainingConfig(learning_rate=0.0, epochs=1, batch_size=4, seed=0)
        out, _ = contrastive_train(ckpt, pool, TripletSpec(), cfg)
        for k in ckpt.params:
            assert np.array_equal(out.params[k], ckpt.params[k])


class TestSatisfaction:
    def test_bounds_and_determinism(self, pool):
        ckpt = new_checkpoint(CFG)
        triplets = build_triplets(pool, TripletSpec(), seed=1)
        a = triplet_satisfaction(ckpt, triplets, margin=0.2)
        b = triplet_satisfaction(ckpt, triplets, margin=0.2)
        assert a == b
        assert 0.0 <= a <= 1.0

    def test_zero_margin_all_satisfied_for_identical_embeddings(self):
        rec = object()
        triplets = [(rec, rec, rec)]
        ckpt = new_checkpoint(CFG)
        loader = lambda _r: np.zeros((32, 25, 3), dtype=np.uint8)
        assert triplet_satisfaction(ckpt, triplets, margin=0.0,
                                    image_loader=loader) == 1.0


class TestTwoStage:
    def test_unknown_scheme(self, pool):
        with pytest.raises(ValueError):
            two_stage_country(new_checkpoint(CFG), pool, pool, "Nope",
                              (FEWSHOT_DEFAULTS, FEWSHOT_DEFAULTS))

    def test_empty_stage2_is_stage1_only(self, pool):
        from faceaudit.corpus import Manifest

        cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=4, seed=0)
        ckpt = new_checkpoint(CFG)
        both = two_stage_country(ckpt, pool, Manifest([]), SCHEME_FINETUNE,
                                 (cfg, cfg))
        solo = finetune_kshot(ckpt, pool, cfg)
        for k in solo.params:
            assert np.array_equal(both.params[k], solo.params[k])
        assert len(both.provenance["two_stage_country"]) == 1

    def test_contrastive_scheme_runs(self, pool):
        cfg = TrainingConfig(learning_rate=1e-4, epochs=1, batch_size=4, seed=0)
        spec = TripletSpec(negative_axis="country")
        out = two_stage_country(new_checkpoint(CFG), pool, pool,
                                SCHEME_CONTRASTIVE, (cfg, cfg), spec=spec)
        assert len(out.provenance["two_stage_country"]) == 2


class TestRepeatProtocol:
    def test_seeds_distinct_and_deterministic(self):
        cfg = TrainingConfig(seed=11, repeats=3)
        seeds = repeat_seeds(cfg)
        assert len(set(seeds)) == 3
        assert seeds == repeat_seeds(cfg)

    def test_average_metrics(self):
        runs = [{"acc": 90.0, "disp": 10.0}, {"acc": 92.0, "disp": 6.0},
                {"acc": 94.0, "disp": 8.0}]
        avg = average_metrics(runs)
        assert avg == {"acc": 92.0, "disp": 8.0}
