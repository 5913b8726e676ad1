"""Rewrite the prompt golden files under tests/golden from the seed-7 fixture.

Run only after a deliberate template change, then review the diff by hand.
"""

import json
from pathlib import Path

from emorag.corpus import build_fixture
from emorag.promptgen import mock_complete, requests_for_samples
from emorag.retrieval import HashingProvider, build_index, precompute_cache

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"
SAMPLE_COUNT = 3


def main() -> None:
    fx = build_fixture(7, 200, 200)
    index = build_index(fx.records, HashingProvider())
    samples = fx.samples[:SAMPLE_COUNT]
    cache = precompute_cache(samples, index, HashingProvider(), 5)
    GOLDEN.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for sample, request in zip(samples, requests_for_samples(samples, cache, fx.records)):
        (GOLDEN / f"request_{sample.id}.txt").write_text(request.render(), encoding="utf-8")
        (GOLDEN / f"mock_{sample.id}.txt").write_text(mock_complete(request) + "\n", encoding="utf-8")
        hashes[sample.id] = request.request_hash
    (GOLDEN / "request_hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(hashes)} golden requests to {GOLDEN}")


if __name__ == "__main__":
    main()
