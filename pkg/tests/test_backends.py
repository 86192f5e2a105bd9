import numpy as np
import pytest

from faceaudit.backends import (
    AwsShapedAdapter,
    AzureShapedAdapter,
    BackendDescriptor,
    FacePlusPlusShapedAdapter,
    LocalModelBackend,
    Prediction,
    PredictionCache,
    PredictOptions,
    RateLimiter,
    StubBackend,
    content_hash,
    predict,
    predict_batch,
)
from faceaudit.errors import AuthError, TransportError
from faceaudit.images import save_png
from faceaudit.model import ClassifierConfig, new_checkpoint

from conftest import random_image


@pytest.fixture
def image_file(tmp_path):
    path = tmp_path / "img.png"
    save_png(random_image(0), path)
    return path


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t

    def sleep(self, dt):
        self.t += dt


class TestDescriptor:
    def test_remote_requires_rate_limit(self):
        with pytest.raises(ValueError):
            BackendDescriptor(name="x", kind="Remote")
        BackendDescriptor(name="x", kind="Remote", rate_limit=2.0)

    def test_cache_name_folds_version_and_task(self):
        d = BackendDescriptor(name="aws", kind="Remote", rate_limit=1.0,
                              task="Gender", version="3")
        assert d.cache_name == "aws-3-Gender"

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            BackendDescriptor(name="x", kind="Cloud")


class TestPrediction:
    def test_label_xor_error(self):
        with pytest.raises(ValueError):
            Prediction()
        with pytest.raises(ValueError):
            Prediction(label="Male", error="transport")
        Prediction(label="Male")
        Prediction(error="face_not_found")

    def test_confidence_range(self):
        with pytest.raises(ValueError):
            Prediction(label="Male", confidence=1.5)

    def test_roundtrip(self):
        p = Prediction(label="Female", confidence=0.9, source="stub")
        assert Prediction.from_dict(p.to_dict()) == p


class TestCache:
    def desc(self, version="1"):
        return BackendDescriptor(name="b", kind="Local", version=version)

    def test_store_and_lookup(self, tmp_path):
        cache = PredictionCache(tmp_path)
        pred = Prediction(label="Male", confidence=0.8)
        cache.store("k1", self.desc(), pred)
        assert cache.lookup("k1", self.desc()) == pred

    def test_miss_returns_none(self, tmp_path):
        assert PredictionCache(tmp_path).lookup("nope", self.desc()) is None

    def test_append_only_first_write_wins(self, tmp_path):
        cache = PredictionCache(tmp_path)
        cache.store("k", self.desc(), Prediction(label="Male"))
        cache.store("k", self.desc(), Prediction(label="Female"))
        assert cache.lookup("k", self.desc()).label == "Male"

    def test_version_bump_misses(self, tmp_path):
        cache = PredictionCache(tmp_path)
        cache.store("k", self.desc("1"), Prediction(label="Male"))
        assert cache.lookup("k", self.desc("2")) is None

    def test_identical_bytes_hit_across_paths(self, tmp_path):
        a = tmp_path / "a.png"
        b = tmp_path / "b.png"
        img = random_image(1)
        save_png(img, a)
        save_png(img, b)
        assert content_hash(a.read_bytes()) == content_hash(b.read_bytes())
        backend = StubBackend("Male")
        opts = PredictOptions(cache=PredictionCache(tmp_path / "cache"))
        predict(backend, a, opts)
        predict(backend, b, opts)
        assert backend.calls == 1


class TestRateLimiter:
    def test_ten_requests_at_two_per_second(self):
        clock = FakeClock()
        limiter = RateLimiter(2.0, clock=clock, sleep=clock.sleep)
        grants = [limiter.acquire() for _ in range(10)]
        assert clock.t >= 4.5
        assert grants == sorted(grants)

    def test_spacing_property_many_requests(self):
        clock = FakeClock()
        rate = 50.0
        limiter = RateLimiter(rate, clock=clock, sleep=clock.sleep)
        grants = np.array([limiter.acquire() for _ in range(10_000)])
        diffs = np.diff(grants)
        assert diffs.min() >= 1.0 / rate - 1e-9
        # therefore no 1-second window ever holds more than rate+1 grants
        idx = np.searchsorted(grants, grants + 1.0, side="left")
        assert (idx - np.arange(len(grants))).max() <= rate + 1

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            RateLimiter(0.0)


def make_transport(status, body):
    calls = []

    def transport(endpoint, payload):
        calls.append((endpoint, payload))
        return status, body

    transport.calls = calls
    return transport


AWS_BODY = {"FaceDetails": [{"Gender": {"Value": "Female", "Confidence": 93.5}}]}
AZURE_BODY = {"faces": [{"faceAttributes": {"gender": "female"}}]}
FPP_BODY = {"faces": [{"attributes": {"gender": {"value": "Female"}}}]}

CREDS = {
    "FACEAUDIT_AWS_ACCESS_KEY": "ak",
    "FACEAUDIT_AWS_SECRET_KEY": "sk",
    "FACEAUDIT_AZURE_KEY": "zk",
    "FACEAUDIT_FPP_KEY": "fk",
    "FACEAUDIT_FPP_SECRET": "fs",
}


@pytest.fixture
def creds(monkeypatch):
    for k, v in CREDS.items():
        monkeypatch.setenv(k, v)


class TestRemoteAdapters:
    @pytest.mark.parametrize(
        "cls,body,label,confidence",
        [
            (AwsShapedAdapter, AWS_BODY, "Female", 0.935),
            (AzureShapedAdapter, AZURE_BODY, "Female", None),
            (FacePlusPlusShapedAdapter, FPP_BODY, "Female", None),
        ],
    )
    def test_parses_vendor_shape(self, creds, cls, body, label, confidence):
        adapter = cls(make_transport(200, body))
        pred = adapter.raw_predict(b"img")
        assert pred.label == label
        if confidence is not None:
            assert pred.confidence == pytest.approx(confidence)
        assert pred.source == adapter.descriptor.name

    @pytest.mark.parametrize(
        "cls,body",
        [
            (AwsShapedAdapter, {"FaceDetails": []}),
            (AzureShapedAdapter, {"faces": []}),
            (FacePlusPlusShapedAdapter, {"faces": []}),
        ],
    )
    def test_empty_detection_is_face_not_found(self, creds, cls, body):
        pred = cls(make_transport(200, body)).raw_predict(b"img")
        assert pred.error == "face_not_found"
        assert pred.label is None

    def test_missing_credentials_fail_fast(self, monkeypatch):
        monkeypatch.delenv("FACEAUDIT_AWS_ACCESS_KEY", raising=False)
        transport = make_transport(200, AWS_BODY)
        adapter = AwsShapedAdapter(transport)
        with pytest.raises(AuthError):
            adapter.raw_predict(b"img")
        assert transport.calls == []  # no request was issued

    def test_http_401_is_auth_error(self, creds):
        adapter = AwsShapedAdapter(make_transport(401, {}))
        with pytest.raises(AuthError):
            adapter.raw_predict(b"img")

    def test_http_500_is_transport_error(self, creds):
        adapter = AzureShapedAdapter(make_transport(500, {}))
        with pytest.raises(TransportError):
            adapter.raw_predict(b"img")


class TestPredictPipeline:
    def test_cache_hit_skips_backend(self, tmp_path, image_file):
        backend = StubBackend("Male")
        opts = PredictOptions(cache=PredictionCache(tmp_path / "c"), log=[])
        first = predict(backend, image_file, opts)
        second = predict(backend, image_file, opts)
        assert first.label == second.label == "Male"
        assert backend.calls == 1
        assert [e["cache"] for e in opts.log] == ["miss", "hit"]

    def test_transport_retries_then_raises(self, creds, image_file):
        transport = make_transport(500, {})
        adapter = AwsShapedAdapter(transport)
        slept = []
        opts = PredictOptions(sleep=slept.append)
        with pytest.raises(TransportError):
            predict(adapter, image_file, opts)
        assert len(transport.calls) == 3
        assert slept == [0.5, 1.0]  # exponential backoff between attempts

    def test_transport_recovers_on_retry(self, creds, image_file):
        attempts = []

        def transport(endpoint, payload):
            attempts.append(1)
            if len(attempts) < 3:
                return 500, {}
            return 200, AWS_BODY

        adapter = AwsShapedAdapter(transport)
        pred = predict(adapter, image_file, PredictOptions(sleep=lambda _t: None))
        assert pred.label == "Female"
        assert len(attempts) == 3

    def test_auth_error_fails_fast_no_retry(self, creds, image_file):
        transport = make_transport(403, {})
        adapter = AwsShapedAdapter(transport)
        with pytest.raises(AuthError):
            predict(adapter, image_file, PredictOptions(sleep=lambda _t: None))
        assert len(transport.calls) == 1

    def test_unreadable_image_leaves_no_cache_entry(self, tmp_path):
        cache_root = tmp_path / "c"
        backend = StubBackend("Male")
        opts = PredictOptions(cache=PredictionCache(cache_root))
        with pytest.raises(TransportError):
            predict(backend, tmp_path / "missing.png", opts)
        assert backend.calls == 0
        assert not list(cache_root.rglob("*.json"))

    def test_rate_limiter_invoked_per_attempt(self, image_file):
        clock = FakeClock()
        limiter = RateLimiter(2.0, clock=clock, sleep=clock.sleep)
        backend = StubBackend("Male")
        for _ in range(4):
            predict(backend, image_file, PredictOptions(rate_limiter=limiter))
        assert clock.t >= 1.5


class TestPredictBatch:
    def test_order_preserved(self, tmp_path):
        paths = []
        for i in range(6):
            p = tmp_path / f"{i}.png"
            save_png(random_image(i), p)
            paths.append(p)
        labels = iter(["Male", "Female"] * 3)
        by_hash = {content_hash(p.read_bytes()): next(labels) for p in paths}

        def answer(data):
            return Prediction(label=by_hash[content_hash(data)])

        results = predict_batch(StubBackend(answer), paths)
        assert [r.label for r in results] == ["Male", "Female"] * 3

    def test_empty_batch(self):
        assert predict_batch(StubBackend("Male"), []) == []

    def test_per_item_transport_failure_becomes_error_prediction(self, tmp_path):
        good = tmp_path / "good.png"
        save_png(random_image(0), good)
        results = predict_batch(
            StubBackend("Male"), [good, tmp_path / "missing.png", good],
            PredictOptions(sleep=lambda _t: None),
        )
        assert [r.ok for r in results] == [True, False, True]
        assert results[1].error == "transport"


class TestLocalModelBackend:
    def test_predicts_from_checkpoint(self, tmp_path):
        cfg = ClassifierConfig(input_hw=(32, 25), conv_blocks=((4, 3, 2),),
                               dense=(6,), weight_init_seed=0)
        backend = LocalModelBackend(new_checkpoint(cfg))
        assert backend.descriptor.task == "Gender"
        path = tmp_path / "x.png"
        save_png(random_image(3), path)
        pred = predict(backend, path)
        assert pred.label in ("Male", "Female")
        assert 0.0 <= pred.confidence <= 1.0
