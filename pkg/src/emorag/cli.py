"""Command-line pipeline: fixture, index, retrieve, prompt, train, eval, gradcheck.

Every command reads one JSON config file; relative paths in it resolve
against the file's directory, and ``--set section.key=value`` flags override
it.  Each stage writes its artifact next to a ``<artifact>.meta.json``
sidecar holding the artifact's sha256 and the hashes of the inputs it was
built from.  A stage whose inputs no longer match their sidecars stops with
exit code 3.

Exit codes: 0 success, 1 failed check or training failure, 2 bad input or
config, 3 stale artifact, 4 LLM endpoint failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from emorag.corpus import generate_fixture, load_dataset, load_sentiment_corpus
from emorag.errors import (
    CorruptionError,
    EmoragError,
    EndpointError,
    NumericError,
    ProtocolError,
    StaleCacheError,
    TrainingError,
    ValidationError,
)
from emorag.fusion import ModelConfig, init_params, load_checkpoint, model_grad_check, save_checkpoint
from emorag.promptgen import (
    TOKEN_ENV,
    LiveLLMClient,
    MockLLMClient,
    generate_batch,
    load_prompts,
    persist_prompts,
    requests_for_samples,
    verify_provenance,
)
from emorag.retrieval import (
    Backend,
    HashingProvider,
    build_index,
    load_cache,
    load_index,
    precompute_cache,
    save_cache,
    save_index,
)
from emorag.trainer import RunRecord, TrainConfig, evaluate, train

log = logging.getLogger("emorag")

COMMANDS = ("fixture", "index", "retrieve", "prompt", "train", "eval", "gradcheck")
CHECKPOINT_NAME = "model.emck"
RUN_RECORD_NAME = "run.json"
META_SUFFIX = ".meta.json"


# --- config ------------------------------------------------------------------


@dataclass
class PathSettings:
    dataset: str = "fixture"
    corpus: str = "fixture/corpus.jsonl"
    index: str = "work/index.emix"
    cache: str = "work/retrieval_cache.json"
    prompts: str = "work/prompts.jsonl"
    run_dir: str = "work/run"


@dataclass
class FixtureSettings:
    n_samples: int = 200
    n_corpus: int = 200
    audio_dim: int = 16
    video_dim: int = 12


@dataclass
class RetrievalSettings:
    backend: str = "flat"
    n_lists: int = 8
    n_probe: int = 2
    k: int = 5
    embedding_dim: int = 256
    embedding_seed: int = 0

    def backend_spec(self) -> Backend:
        if self.backend == "flat":
            return Backend.flat()
        return Backend.ivf(self.n_lists, self.n_probe)

    def provider(self) -> HashingProvider:
        return HashingProvider(dim=self.embedding_dim, seed=self.embedding_seed)


@dataclass
class LLMSettings:
    mode: str = "mock"
    base_url: str = "http://localhost:8000/v1"
    model: str = "gpt-4"
    max_in_flight: int = 4
    timeout: float = 60.0


@dataclass
class GradcheckSettings:
    batch_size: int = 4
    d_model: int = 8
    n_heads: int = 2
    text_vocab_hash_dim: int = 64
    max_frames: int = 16
    h: float = 1e-5
    tolerance: float = 1e-4


_SECTIONS = {
    "paths": PathSettings,
    "fixture": FixtureSettings,
    "retrieval": RetrievalSettings,
    "llm": LLMSettings,
    "train": TrainConfig,
    "model": ModelConfig,
    "gradcheck": GradcheckSettings,
}


@dataclass
class PipelineConfig:
    seed: int = 7
    paths: PathSettings = field(default_factory=PathSettings)
    fixture: FixtureSettings = field(default_factory=FixtureSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    llm: LLMSettings = field(default_factory=LLMSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def to_json(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = asdict(getattr(self, name))
        return out

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path | None = None) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ValidationError("config: top level must be a JSON object")
        unknown = set(obj) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ValidationError(f"config: unknown keys {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            raw = obj.get(name, {})
            if not isinstance(raw, dict):
                raise ValidationError(f"config.{name}: expected an object")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(raw) - allowed
            if bad:
                raise ValidationError(f"config.{name}: unknown keys {sorted(bad)}")
            try:
                kwargs[name] = section_cls(**raw)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"config.{name}: {exc}") from None
        seed = obj.get("seed", 7)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValidationError(f"config.seed: expected an integer, got {seed!r}")
        cfg = cls(seed=seed, base_dir=base_dir or Path.cwd(), **kwargs)
        cfg.train = replace(cfg.train, seed=seed)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.llm.mode not in ("live", "mock"):
            raise ValidationError(f"config.llm.mode: must be 'live' or 'mock', got {self.llm.mode!r}")
        if self.retrieval.k < 1:
            raise ValidationError(f"config.retrieval.k: must be >= 1, got {self.retrieval.k}")
        if self.retrieval.backend not in ("flat", "ivf"):
            raise ValidationError(f"config.retrieval.backend: must be 'flat' or 'ivf', got {self.retrieval.backend!r}")
        if self.gradcheck.batch_size < 2:
            raise ValidationError("config.gradcheck.batch_size: must be >= 2")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    obj = json.loads(json.dumps(obj))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--set {item!r}: expected KEY=VALUE")
        parts = key.split(".")
        target = obj
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ValidationError(f"--set {item!r}: {part} is not a section")
        target[parts[-1]] = _parse_value(value)
    return obj


def load_config(path, overrides: list[str] | None = None, seed: int | None = None, mode: str | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    obj = apply_overrides(obj, overrides or [])
    if seed is not None:
        obj["seed"] = seed
    if mode is not None:
        obj.setdefault("llm", {})["mode"] = mode
    return PipelineConfig.from_json(obj, base_dir=path.resolve().parent)


# --- fingerprints ------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def tree_sha256(root) -> str:
    """Hash of every file under ``root`` (relative path and content), sidecars excluded."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file() and not q.name.endswith(META_SUFFIX)):
        h.update(p.relative_to(root).as_posix().encode("utf-8") + b"\0")
        h.update(file_sha256(p).encode("ascii") + b"\n")
    return h.hexdigest()


def meta_path(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + META_SUFFIX)


def write_meta(artifact, stage: str, upstream: dict[str, str], extra: dict | None = None) -> str:
    digest = file_sha256(artifact)
    meta = {"stage": stage, "sha256": digest, "upstream": dict(sorted(upstream.items()))}
    if extra:
        meta.update(extra)
    meta_path(artifact).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def check_fresh(artifact, upstream: dict[str, str]) -> dict:
    """Return the sidecar of ``artifact`` after checking it against disk and ``upstream``."""
    artifact = Path(artifact)
    if not artifact.exists():
        raise ValidationError(f"{artifact}: missing; run the stage that builds it first")
    try:
        meta = json.loads(meta_path(artifact).read_text(encoding="utf-8"))
        recorded, recorded_up = meta["sha256"], meta["upstream"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError):
        raise StaleCacheError(f"{artifact}: fingerprint sidecar missing or unreadable") from None
    if file_sha256(artifact) != recorded:
        raise StaleCacheError(f"{artifact}: contents changed since it was built")
    for name, digest in upstream.items():
        if recorded_up.get(name) != digest:
            raise StaleCacheError(f"{artifact}: built from a different {name}")
    return meta


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{path}: {what} not found")
    return path


# --- stage helpers -----------------------------------------------------------


def _dataset(cfg: PipelineConfig):
    root = _require(cfg.path("dataset"), "dataset root")
    return load_dataset(root), tree_sha256(root)


def _fresh_index(cfg: PipelineConfig) -> tuple[str, str]:
    corpus_sha = file_sha256(_require(cfg.path("corpus"), "sentiment corpus"))
    meta = check_fresh(cfg.path("index"), {"corpus": corpus_sha})
    if meta.get("embedding") != cfg.retrieval.provider().name or meta.get("backend") != cfg.retrieval.backend_spec().describe():
        raise StaleCacheError(f"{cfg.path('index')}: built with different retrieval settings")
    return corpus_sha, meta["sha256"]


def _fresh_cache(cfg: PipelineConfig, dataset_sha: str) -> tuple[str, str, str]:
    corpus_sha, index_sha = _fresh_index(cfg)
    meta = check_fresh(cfg.path("cache"), {"index": index_sha, "dataset": dataset_sha})
    if meta.get("k") != cfg.retrieval.k:
        raise StaleCacheError(f"{cfg.path('cache')}: built with k={meta.get('k')}, config asks for {cfg.retrieval.k}")
    return corpus_sha, index_sha, meta["sha256"]


def _fresh_prompts(cfg: PipelineConfig, dataset_sha: str):
    corpus_sha, _, cache_sha = _fresh_cache(cfg, dataset_sha)
    meta = check_fresh(cfg.path("prompts"), {"cache": cache_sha, "corpus": corpus_sha, "dataset": dataset_sha})
    try:
        store = load_prompts(cfg.path("prompts"))
    except CorruptionError as exc:
        raise StaleCacheError(str(exc)) from None
    return store, meta["sha256"]


def _model_config(cfg: PipelineConfig, dataset, **changes) -> ModelConfig:
    d_a, d_v = dataset.manifest.feature_dims
    return replace(cfg.model, audio_dim=d_a, video_dim=d_v, **changes)


def _client(cfg: PipelineConfig):
    if cfg.llm.mode == "mock":
        return MockLLMClient()
    if not os.environ.get(TOKEN_ENV):
        raise ValidationError(f"live mode needs the {TOKEN_ENV} environment variable")
    return LiveLLMClient(
        cfg.llm.base_url,
        cfg.llm.model,
        timeout=cfg.llm.timeout,
        max_in_flight=cfg.llm.max_in_flight,
    )


def _write_report(report, run_dir: Path, record: RunRecord | None = None) -> None:
    report.write(run_dir)
    if record is not None:
        record.metrics[report.split] = {"n": report.n, "ccc": report.ccc, "mae": report.mae}


# --- commands ----------------------------------------------------------------


def cmd_fixture(cfg: PipelineConfig, force: bool = False) -> int:
    target = cfg.path("dataset")
    fx = generate_fixture(
        target,
        seed=cfg.seed,
        n_samples=cfg.fixture.n_samples,
        n_corpus=cfg.fixture.n_corpus,
        d_a=cfg.fixture.audio_dim,
        d_v=cfg.fixture.video_dim,
        force=force,
    )
    m = fx.manifest
    counts = ", ".join(f"{k} {v}" for k, v in m.split_counts.items())
    print(f"fixture {m.name} (seed {cfg.seed}) at {target}")
    print(f"samples: {counts}; corpus records: {len(fx.records)}; feature dims: audio {m.feature_dims[0]}, video {m.feature_dims[1]}")
    print(f"tree sha256: {tree_sha256(target)}")
    return 0


def cmd_index(cfg: PipelineConfig) -> int:
    corpus_path = _require(cfg.path("corpus"), "sentiment corpus")
    records = load_sentiment_corpus(corpus_path)
    provider = cfg.retrieval.provider()
    backend = cfg.retrieval.backend_spec()
    index = build_index(records, provider, backend, seed=cfg.seed)
    out = cfg.path("index")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out)
    write_meta(
        out,
        "index",
        {"corpus": file_sha256(corpus_path)},
        {"index_fingerprint": index.fingerprint(), "backend": backend.describe(), "embedding": provider.name},
    )
    print(f"indexed {len(records)} records ({backend.describe()}, dim {provider.dim}) -> {out}")
    print(f"index fingerprint: {index.fingerprint()}")
    return 0


def cmd_retrieve(cfg: PipelineConfig) -> int:
    dataset, dataset_sha = _dataset(cfg)
    _, index_sha = _fresh_index(cfg)
    index = load_index(cfg.path("index"))
    cache = precompute_cache(dataset.samples, index, cfg.retrieval.provider(), cfg.retrieval.k)
    out = cfg.path("cache")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(cache, out)
    write_meta(out, "retrieve", {"index": index_sha, "dataset": dataset_sha}, {"k": cfg.retrieval.k})
    print(f"retrieved top-{cfg.retrieval.k} for {len(cache.entries)} samples -> {out}")
    return 0


def cmd_prompt(cfg: PipelineConfig) -> int:
    dataset, dataset_sha = _dataset(cfg)
    corpus_sha, _, cache_sha = _fresh_cache(cfg, dataset_sha)
    cache = load_cache(cfg.path("cache"), index=load_index(cfg.path("index")))
    records = load_sentiment_corpus(cfg.path("corpus"))
    requests = requests_for_samples(dataset.samples, cache, records)
    client = _client(cfg)
    prompts = generate_batch(requests, client, [s.id for s in dataset.samples])
    for p, r in zip(prompts, requests):
        if not verify_provenance(p, r):
            raise ProtocolError(f"prompt for sample {p.sample_id} does not match its request")
    out = cfg.path("prompts")
    out.parent.mkdir(parents=True, exist_ok=True)
    persist_prompts(prompts, out)
    write_meta(
        out,
        "prompt",
        {"cache": cache_sha, "corpus": corpus_sha, "dataset": dataset_sha},
        {"source": client.source},
    )
    print(f"generated {len(prompts)} Emotion Prompts ({client.source}) -> {out}")
    return 0


def _train_arm(cfg, dataset, prompts, model_config, run_dir: Path, upstream: dict) -> tuple:
    params = init_params(model_config, seed=cfg.seed)
    best, record = train(dataset.samples, prompts, params, cfg.train, model_config)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / CHECKPOINT_NAME
    record.checkpoint_fingerprint = save_checkpoint(best, model_config, ckpt)
    record.upstream = dict(upstream)
    for split in ("train", "validation"):
        _write_report(evaluate(best, model_config, dataset.split(split), prompts, split), run_dir, record)
    record.save(run_dir / RUN_RECORD_NAME)
    write_meta(ckpt, "train", upstream)
    return best, record


def _prompt_inputs(cfg: PipelineConfig, dataset_sha: str, needed: bool):
    upstream = {"dataset": dataset_sha}
    if not needed:
        return None, upstream
    store, prompts_sha = _fresh_prompts(cfg, dataset_sha)
    upstream["prompts"] = prompts_sha
    return store, upstream


def cmd_train(cfg: PipelineConfig) -> int:
    dataset, dataset_sha = _dataset(cfg)
    model_config = _model_config(cfg, dataset)
    prompts, upstream = _prompt_inputs(cfg, dataset_sha, model_config.use_emotion_prompt)
    run_dir = cfg.path("run_dir")
    _, record = _train_arm(cfg, dataset, prompts, model_config, run_dir, upstream)
    val = record.metrics["validation"]
    print(f"trained {cfg.train.epochs} epochs; best epoch {record.best_epoch}")
    print(f"validation CCC {val['ccc']:.4f} MAE {val['mae']:.4f}")
    print(f"checkpoint {run_dir / CHECKPOINT_NAME} sha256 {record.checkpoint_fingerprint}")
    return 0


def format_ablation_table(rows: list[tuple[str, float, float]], split: str, n: int) -> str:
    lines = [f"Emotion Prompt ablation ({split} split, n={n})", f"{'setting':<16}{'CCC':>8}{'MAE':>8}"]
    lines += [f"{name:<16}{ccc:>8.3f}{mae:>8.2f}" for name, ccc, mae in rows]
    return "\n".join(lines)


def cmd_eval(cfg: PipelineConfig, split: str = "test", ablation: bool = False) -> int:
    dataset, dataset_sha = _dataset(cfg)
    samples = dataset.split(split)
    if not samples:
        raise ValidationError(f"{cfg.path('dataset')}: split {split!r} is empty")
    run_dir = cfg.path("run_dir")
    if ablation:
        prompts, upstream = _prompt_inputs(cfg, dataset_sha, True)
        rows = []
        for name, use in (("with prompt", True), ("without prompt", False)):
            arm_dir = run_dir / "ablation" / name.replace(" ", "_")
            mc = _model_config(cfg, dataset, use_emotion_prompt=use)
            arm_upstream = upstream if use else {"dataset": dataset_sha}
            best, record = _train_arm(cfg, dataset, prompts, mc, arm_dir, arm_upstream)
            report = evaluate(best, mc, samples, prompts, split)
            _write_report(report, arm_dir, record)
            record.save(arm_dir / RUN_RECORD_NAME)
            rows.append((name, report.ccc, report.mae))
        table = format_ablation_table(rows, split, len(samples))
        (run_dir / "ablation" / f"table_{split}.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
        return 0

    ckpt = run_dir / CHECKPOINT_NAME
    params, model_config = load_checkpoint(_require(ckpt, "checkpoint"))
    prompts, upstream = _prompt_inputs(cfg, dataset_sha, model_config.use_emotion_prompt)
    check_fresh(ckpt, upstream)
    report = evaluate(params, model_config, samples, prompts, split)
    record = RunRecord.load(run_dir / RUN_RECORD_NAME)
    _write_report(report, run_dir, record)
    record.save(run_dir / RUN_RECORD_NAME)
    print(f"{split} CCC {report.ccc:.4f} MAE {report.mae:.4f} (n={report.n})")
    return 0


def cmd_gradcheck(cfg: PipelineConfig) -> int:
    dataset, dataset_sha = _dataset(cfg)
    g = cfg.gradcheck
    batch = dataset.split("train")[: g.batch_size]
    if len(batch) < g.batch_size:
        raise ValidationError(f"training split has fewer than {g.batch_size} samples")
    store, _ = _prompt_inputs(cfg, dataset_sha, True)
    lookup = store.by_sample()
    prompts = [lookup[s.id] for s in batch]
    worst = 0.0
    for name, use in (("with prompt", True), ("without prompt", False)):
        mc = _model_config(
            cfg,
            dataset,
            d_model=g.d_model,
            n_heads=g.n_heads,
            text_vocab_hash_dim=g.text_vocab_hash_dim,
            max_frames=g.max_frames,
            use_emotion_prompt=use,
        )
        err = model_grad_check(batch, prompts, mc, seed=cfg.seed, h=g.h)
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e}")
    ok = worst < g.tolerance
    print(f"gradient check {'passed' if ok else 'FAILED'} (max {worst:.3e}, tolerance {g.tolerance:g})")
    return 0 if ok else 1


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emorag", description="Retrieval-augmented depression severity pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="pipeline JSON config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--force", action="store_true", help="fixture: overwrite a non-empty target")
    parser.add_argument("--ablation", action="store_true", help="eval: train and compare both prompt arms")
    parser.add_argument("--mode", choices=("live", "mock"), help="override llm.mode")
    parser.add_argument("--split", default="test", help="eval: split to score (default test)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=50")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, mode=args.mode)
        if args.command == "fixture":
            return cmd_fixture(cfg, force=args.force)
        if args.command == "eval":
            return cmd_eval(cfg, split=args.split, ablation=args.ablation)
        return {
            "index": cmd_index,
            "retrieve": cmd_retrieve,
            "prompt": cmd_prompt,
            "train": cmd_train,
            "gradcheck": cmd_gradcheck,
        }[args.command](cfg)
    except (StaleCacheError, CorruptionError) as exc:
        print(f"stale artifact: {exc}; rebuild upstream", file=sys.stderr)
        return 3
    except (EndpointError, ProtocolError) as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return 4
    except (TrainingError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except EmoragError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
