"""Backend plumbing: vendor adapters, response caching, rate limiting.

Remote vision APIs are represented by shape-compatible adapters whose HTTP
transport is injected, so this demo swaps in an in-process fake vendor.
The on-disk cache is keyed by image content hash and backend identity;
a second audit over unchanged images issues zero remote calls.  The rate
limiter is driven here by a fake clock to show its pacing without real
sleeps.
"""

import os
import tempfile
from pathlib import Path

import numpy as np

from faceaudit.backends import (
    AwsShapedAdapter,
    PredictOptions,
    PredictionCache,
    RateLimiter,
    predict,
)
from faceaudit.images import save_png

work = Path(tempfile.mkdtemp(prefix="faceaudit_demo6_"))

# --- 1. a fake vendor endpoint ----------------------------------------
calls = []


def fake_vendor(endpoint, payload):
    calls.append(endpoint)
    return 200, {"FaceDetails": [{"Gender": {"Value": "Female",
                                             "Confidence": 97.0}}]}


os.environ.setdefault("FACEAUDIT_AWS_ACCESS_KEY", "demo")
os.environ.setdefault("FACEAUDIT_AWS_SECRET_KEY", "demo")
adapter = AwsShapedAdapter(fake_vendor, rate_limit=5.0)

# --- 2. cache behavior -------------------------------------------------
img_path = work / "face.png"
save_png(np.random.default_rng(0).integers(0, 256, (256, 200, 3),
                                           dtype=np.uint8), img_path)
options = PredictOptions(cache=PredictionCache(work / "cache"), log=[])

first = predict(adapter, img_path, options)
second = predict(adapter, img_path, options)
print(f"prediction: {first.label} (confidence {first.confidence:.2f})")
print(f"vendor calls after two predicts: {len(calls)} (second was a cache hit)")
print(f"call log: {[entry['cache'] for entry in options.log]}")

# --- 3. rate limiting on a fake clock ----------------------------------
class Clock:
    t = 0.0

    def __call__(self):
        return self.t

    def sleep(self, dt):
        self.t += dt


clock = Clock()
limiter = RateLimiter(2.0, clock=clock, sleep=clock.sleep)  # 2 requests/s
grants = [limiter.acquire() for _ in range(6)]
print(f"\ngrant times at 2 req/s: {[f'{t:.1f}' for t in grants]}")
print(f"simulated elapsed time for 6 requests: {clock.t:.1f}s")
