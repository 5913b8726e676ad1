"""Train both prompt arms on a seeded fixture and print validation CCC / MAE.

    python scripts/run_ablation.py --seeds 7 1 2 --epochs 100
"""

import argparse
import time

from emorag.corpus import build_fixture
from emorag.fusion import ModelConfig, init_params
from emorag.promptgen import MockLLMClient, generate_batch, requests_for_samples
from emorag.retrieval import HashingProvider, build_index, precompute_cache
from emorag.trainer import TrainConfig, evaluate, train


def ablation(seed: int, epochs: int, d_model: int, n_heads: int) -> dict[bool, tuple[float, float]]:
    fx = build_fixture(seed, 200, 200)
    provider = HashingProvider()
    cache = precompute_cache(fx.samples, build_index(fx.records, provider), provider, 5)
    requests = requests_for_samples(fx.samples, cache, fx.records)
    prompts = {p.sample_id: p for p in generate_batch(requests, MockLLMClient(), [s.id for s in fx.samples])}
    val = [s for s in fx.samples if s.split == "validation"]
    d_a, d_v = fx.manifest.feature_dims
    out = {}
    for use in (True, False):
        config = ModelConfig(audio_dim=d_a, video_dim=d_v, d_model=d_model, n_heads=n_heads, use_emotion_prompt=use)
        best, _ = train(fx.samples, prompts, init_params(config, seed), TrainConfig(epochs=epochs, seed=seed), config)
        report = evaluate(best, config, val, prompts, "validation")
        out[use] = (report.ccc, report.mae)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[7])
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--d-model", type=int, default=64)
    parser.add_argument("--n-heads", type=int, default=4)
    args = parser.parse_args()
    print(f"{'seed':>4}  {'with CCC':>8}  {'with MAE':>8}  {'w/o CCC':>8}  {'w/o MAE':>8}  {'gap':>7}")
    for seed in args.seeds:
        started = time.perf_counter()
        r = ablation(seed, args.epochs, args.d_model, args.n_heads)
        gap = r[True][0] - r[False][0]
        print(
            f"{seed:>4}  {r[True][0]:8.4f}  {r[True][1]:8.3f}  {r[False][0]:8.4f}  {r[False][1]:8.3f}  {gap:+7.4f}"
            f"  ({time.perf_counter() - started:.0f} s)"
        )


if __name__ == "__main__":
    main()
