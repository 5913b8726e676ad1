"""Full-model gradient check across fixture and parameter seeds.

Prints the max relative error per arm so sensitivity to the seed is visible.

    python scripts/gradcheck_report.py --fixture-seeds 7 0 --param-seeds 7 0 1 2
"""

import argparse

from emorag.corpus import build_fixture
from emorag.fusion import ModelConfig, model_grad_check
from emorag.promptgen import MockLLMClient, generate_batch, requests_for_samples
from emorag.retrieval import HashingProvider, build_index, precompute_cache


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--fixture-seeds", type=int, nargs="+", default=[7])
    parser.add_argument("--param-seeds", type=int, nargs="+", default=[7, 0, 1, 2])
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--h", type=float, default=1e-5)
    parser.add_argument("--tolerance", type=float, default=1e-4)
    args = parser.parse_args()
    provider = HashingProvider()
    for fseed in args.fixture_seeds:
        fx = build_fixture(fseed, 200, 200)
        batch = [s for s in fx.samples if s.split == "train"][: args.batch]
        cache = precompute_cache(batch, build_index(fx.records, provider), provider, 5)
        prompts = generate_batch(requests_for_samples(batch, cache, fx.records), MockLLMClient(), [s.id for s in batch])
        d_a, d_v = fx.manifest.feature_dims
        for pseed in args.param_seeds:
            errs = []
            for use in (True, False):
                config = ModelConfig(
                    audio_dim=d_a, video_dim=d_v, d_model=8, n_heads=2,
                    text_vocab_hash_dim=64, max_frames=16, use_emotion_prompt=use,
                )
                errs.append(model_grad_check(batch, prompts, config, seed=pseed, h=args.h))
            flag = "ok" if max(errs) < args.tolerance else "FAIL"
            print(f"fixture {fseed} params {pseed}: with {errs[0]:.2e} without {errs[1]:.2e} {flag}")


if __name__ == "__main__":
    main()
