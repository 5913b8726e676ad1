"""Depression-dataset and sentiment-corpus records, loaders, and synthetic fixtures.

On-disk dataset layout::

    root/
      manifest.json            {name, split_counts, feature_dims, source}
      labels.csv               id,split,severity,gender
      transcripts/<id>.txt
      audio/<id>.csv           one row per MFCC frame, header f0..f{d_a-1}
      video/<id>.csv           one row per AU-pose frame, header f0..f{d_v-1}

The sentiment corpus is JSON lines: ``{"id": ..., "text": ..., "sentiment": ...}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from emorag.errors import FormatError, IngestionError, PreconditionError, ValidationError

SPLITS = ("train", "validation", "test")
SEVERITY_MIN, SEVERITY_MAX = 0, 24
SENTIMENT_MIN, SENTIMENT_MAX = -3.0, 3.0


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    split: str
    text: str
    audio_features: np.ndarray
    video_features: np.ndarray
    severity: int
    gender: str | None = None

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"sample {self.id}: unknown split {self.split!r}")
        if not SEVERITY_MIN <= self.severity <= SEVERITY_MAX:
            raise ValidationError(f"sample {self.id}: severity {self.severity} outside [0, 24]")
        if not self.text.strip():
            raise ValidationError(f"sample {self.id}: empty transcript")
        for name, feats in (("audio", self.audio_features), ("video", self.video_features)):
            if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
                raise ValidationError(f"sample {self.id}: {name} features must be a non-empty matrix")
            if not np.isfinite(feats).all():
                raise ValidationError(f"sample {self.id}: {name} features contain NaN/Inf")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            (self.id, self.split, self.text, self.severity, self.gender)
            == (other.id, other.split, other.text, other.severity, other.gender)
            and self.audio_features.shape == other.audio_features.shape
            and self.video_features.shape == other.video_features.shape
            and self.audio_features.tobytes() == other.audio_features.tobytes()
            and self.video_features.tobytes() == other.video_features.tobytes()
        )


@dataclass(frozen=True)
class SentimentRecord:
    id: str
    text: str
    sentiment: float

    def validate(self) -> None:
        if not self.text.strip():
            raise ValidationError(f"record {self.id}: empty text")
        if not (SENTIMENT_MIN <= self.sentiment <= SENTIMENT_MAX):
            raise ValidationError(f"record {self.id}: sentiment {self.sentiment} outside [-3, 3]")


@dataclass
class DatasetManifest:
    name: str
    split_counts: dict[str, int]
    feature_dims: tuple[int, int]
    source: str = "real"
    seed: int | None = None

    def to_json(self) -> dict:
        source = {"synthetic": self.seed} if self.source == "synthetic" else "real"
        return {
            "name": self.name,
            "split_counts": {s: self.split_counts.get(s, 0) for s in SPLITS},
            "feature_dims": list(self.feature_dims),
            "source": source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            source = obj["source"]
            if isinstance(source, dict):
                kind, seed = "synthetic", int(source["synthetic"])
            elif source == "real":
                kind, seed = "real", None
            else:
                raise FormatError(f"manifest source must be 'real' or {{'synthetic': seed}}, got {source!r}")
            d_a, d_v = obj["feature_dims"]
            return cls(
                name=str(obj["name"]),
                split_counts={str(k): int(v) for k, v in obj["split_counts"].items()},
                feature_dims=(int(d_a), int(d_v)),
                source=kind,
                seed=seed,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list[Sample]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


# --- depression dataset ------------------------------------------------------


def _read_feature_table(path: Path, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"sample {sample_id}: missing feature file {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"sample {sample_id}: {path.name} has no frames")
    width = len(rows[0])
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(
                f"sample {sample_id}: ragged row in {path} at line {lineno} ({len(row)} != {width} columns)"
            )
        try:
            values.append([float(x) for x in row])
        except ValueError:
            raise FormatError(f"sample {sample_id}: non-numeric value in {path} line {lineno}") from None
    return np.array(values, dtype=np.float64)


def load_depression_dataset(root) -> tuple[DatasetManifest, list[Sample]]:
    """Load and validate every sample under ``root``; fails without partial results."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    labels_path = root / "labels.csv"
    if not manifest_path.is_file():
        raise IngestionError(f"no manifest.json under {root}")
    if not labels_path.is_file():
        raise IngestionError(f"no labels.csv under {root}")
    try:
        manifest = DatasetManifest.from_json(json.loads(manifest_path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from None

    with labels_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "split", "severity"} <= set(reader.fieldnames):
            raise FormatError("labels.csv needs a header with id,split,severity[,gender]")
        rows = list(reader)

    samples: list[Sample] = []
    seen: set[str] = set()
    dims: tuple[int, int] | None = None
    for row in rows:
        sid = row["id"]
        if sid in seen:
            raise ValidationError(f"duplicate sample id {sid} in labels.csv")
        seen.add(sid)
        try:
            severity = int(row["severity"])
        except ValueError:
            raise ValidationError(f"sample {sid}: severity {row['severity']!r} is not an integer") from None
        transcript = root / "transcripts" / f"{sid}.txt"
        if not transcript.is_file():
            raise IngestionError(f"sample {sid}: missing transcript {transcript}")
        text = transcript.read_text(encoding="utf-8")
        audio = _read_feature_table(root / "audio" / f"{sid}.csv", sid)
        video = _read_feature_table(root / "video" / f"{sid}.csv", sid)
        sample = Sample(
            id=sid,
            split=row["split"],
            text=text,
            audio_features=audio,
            video_features=video,
            severity=severity,
            gender=(row.get("gender") or None),
        )
        sample.validate()
        sample_dims = (audio.shape[1], video.shape[1])
        if dims is None:
            dims = sample_dims
        elif sample_dims != dims:
            raise FormatError(f"sample {sid}: feature widths {sample_dims} differ from {dims}")
        samples.append(sample)

    if dims is not None and tuple(dims) != tuple(manifest.feature_dims):
        raise ValidationError(f"manifest feature_dims {manifest.feature_dims} but files have {dims}")
    counts = {s: 0 for s in SPLITS}
    for sample in samples:
        counts[sample.split] += 1
    declared = {s: manifest.split_counts.get(s, 0) for s in SPLITS}
    if counts != declared:
        raise ValidationError(f"manifest split_counts {declared} do not match labels.csv {counts}")
    return manifest, samples


def load_dataset(root) -> Dataset:
    manifest, samples = load_depression_dataset(root)
    return Dataset(manifest, samples)


# --- sentiment corpus --------------------------------------------------------


def load_sentiment_corpus(path) -> list[SentimentRecord]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"sentiment corpus not found: {path}")
    records: list[SentimentRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = SentimentRecord(id=str(obj["id"]), text=str(obj["text"]), sentiment=float(obj["sentiment"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not math.isfinite(record.sentiment):
                raise ValidationError(f"{path}:{lineno}: sentiment is not finite")
            try:
                record.validate()
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if record.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate record id {record.id}")
            seen.add(record.id)
            records.append(record)
    return records


def write_sentiment_corpus(records: Iterable[SentimentRecord], path) -> None:
    lines = [
        json.dumps({"id": r.id, "text": r.text, "sentiment": r.sentiment}, ensure_ascii=False)
        for r in records
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --- writing -----------------------------------------------------------------


def _feature_csv(feats: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{j}" for j in range(feats.shape[1])])
    for row in feats:
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def write_depression_dataset(root, manifest: DatasetManifest, samples: list[Sample]) -> None:
    root = Path(root)
    for sub in ("transcripts", "audio", "video"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "split", "severity", "gender"])
    for s in samples:
        writer.writerow([s.id, s.split, s.severity, s.gender or ""])
    (root / "labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    for s in samples:
        (root / "transcripts" / f"{s.id}.txt").write_text(s.text, encoding="utf-8")
        (root / "audio" / f"{s.id}.csv").write_text(_feature_csv(s.audio_features), encoding="utf-8")
        (root / "video" / f"{s.id}.csv").write_text(_feature_csv(s.video_features), encoding="utf-8")


# --- synthetic fixtures ------------------------------------------------------

# Each theme owns a set of keywords.  Corpus records mention one keyword plus
# theme context words and one sentiment-bearing word; sample transcripts mention the
# theme and two keywords wrapped in filler that never appears in the corpus,
# so lexical retrieval is driven by keyword overlap alone.
THEMES: dict[str, list[str]] = {
    "work": ["deadline", "manager", "promotion", "overtime", "layoff", "commute",
             "payroll", "interview", "coworker", "shift", "contract", "office"],
    "family": ["sister", "brother", "parents", "wedding", "divorce", "grandmother",
               "cousin", "inheritance", "reunion", "custody", "nephew", "holiday"],
    "sleep": ["insomnia", "nightmare", "nap", "alarm", "mattress", "snoring",
              "bedtime", "dream", "melatonin", "pillow", "sunrise", "midnight"],
    "health": ["diagnosis", "surgery", "therapy", "medication", "clinic", "injury",
               "checkup", "fever", "allergy", "recovery", "gym", "diet"],
    "money": ["rent", "debt", "savings", "loan", "bills", "salary",
              "mortgage", "budget", "taxes", "lottery", "invoice", "pension"],
    "friends": ["party", "roommate", "birthday", "breakup", "neighbor", "teammate",
                "concert", "texting", "girlfriend", "boyfriend", "bestfriend", "dinner"],
    "school": ["exam", "thesis", "homework", "professor", "grades", "scholarship",
               "lecture", "semester", "tuition", "graduation", "classmate", "library"],
    "home": ["apartment", "garden", "kitchen", "renovation", "landlord", "moving",
             "basement", "chores", "backyard", "furniture", "laundry", "balcony"],
}

_THEME_CONTEXT: dict[str, list[str]] = {
    "work": ["job", "career", "boss", "workplace"],
    "family": ["relatives", "household", "kin", "mom"],
    "sleep": ["bed", "night", "rest", "tired"],
    "health": ["doctor", "body", "hospital", "symptoms"],
    "money": ["finances", "cash", "bank", "spending"],
    "friends": ["social", "buddies", "pals", "hangout"],
    "school": ["college", "campus", "study", "course"],
    "home": ["house", "rooms", "place", "neighborhood"],
}

_POLAR_WORDS: list[tuple[float, list[str]]] = [
    (-3.0, ["miserable", "devastating", "hopeless", "awful"]),
    (-1.5, ["disappointing", "stressful", "annoying", "sad"]),
    (0.0, ["okay", "ordinary", "fine", "average"]),
    (1.5, ["pleasant", "nice", "good", "satisfying"]),
    (3.0, ["wonderful", "amazing", "fantastic", "joyful"]),
]

_CORPUS_FRAMES = [
    "{theme} {c1} {kw} {c2} {a}",
    "{kw} {theme} {c1} {c2} {a}",
    "{c1} {kw} {theme} {c2} {a}",
    "{theme} {kw} {c1} {c2} {a}",
]

_SAMPLE_FRAMES = [
    "lately {theme} stuff especially {k1} then {k2} um",
    "i guess {theme} you know {k1} plus {k2}",
    "mostly {theme} {k1} but {k2} too hmm",
    "um {theme} with {k1} happening plus {k2}",
]


def _polar_word(rng: np.random.Generator, sentiment: float) -> str:
    centres = np.array([c for c, _ in _POLAR_WORDS])
    words = _POLAR_WORDS[int(np.argmin(np.abs(centres - sentiment)))][1]
    return words[int(rng.integers(len(words)))]


@dataclass
class Fixture:
    manifest: DatasetManifest
    samples: list[Sample]
    records: list[SentimentRecord]
    truth: dict = field(default_factory=dict)


def build_fixture(
    seed: int,
    n_samples: int,
    n_corpus: int,
    d_a: int = 16,
    d_v: int = 12,
    severity_slope: float = -3.6,
    severity_noise: float = 1.5,
    feature_signal: float = 0.25,
) -> Fixture:
    """Generate a synthetic dataset and corpus in memory (see :func:`generate_fixture`)."""
    for name, value in (("n_samples", n_samples), ("n_corpus", n_corpus), ("d_a", d_a), ("d_v", d_v)):
        if int(value) < 1:
            raise PreconditionError(f"{name} must be positive, got {value}")
    rng = np.random.default_rng(seed)
    themes = list(THEMES)

    # interleave keywords across themes so small corpora still span themes
    ordered: list[tuple[str, str]] = []
    for i in range(max(len(v) for v in THEMES.values())):
        for theme in themes:
            ordered.append((theme, THEMES[theme][i]))
    n_keywords = max(1, min(len(ordered), math.ceil(n_corpus / 4)))
    active = ordered[:n_keywords]
    latent = {kw: float(rng.uniform(-2.6, 2.6)) for _, kw in active}

    # every active keyword gets one record before any gets a second
    record_kw = [active[i % n_keywords] for i in range(n_corpus)]
    records: list[SentimentRecord] = []
    width = len(str(n_corpus - 1))
    for i, (theme, kw) in enumerate(record_kw):
        sentiment = float(np.clip(latent[kw] + rng.normal(0.0, 0.3), -3.0, 3.0))
        sentiment = round(sentiment, 3)
        ctx = _THEME_CONTEXT[theme]
        c1, c2 = (ctx[int(j)] for j in rng.choice(len(ctx), size=2, replace=False))
        a = _polar_word(rng, sentiment)
        frame = _CORPUS_FRAMES[int(rng.integers(len(_CORPUS_FRAMES)))]
        text = frame.format(theme=theme, c1=c1, c2=c2, kw=kw, a=a)
        records.append(SentimentRecord(id=f"mosei_{i:0{width}d}", text=text, sentiment=sentiment))

    by_keyword: dict[str, list[SentimentRecord]] = {}
    for (_, kw), rec in zip(record_kw, records):
        by_keyword.setdefault(kw, []).append(rec)
    by_theme: dict[str, list[str]] = {}
    for theme, kw in active:
        by_theme.setdefault(theme, []).append(kw)

    n_train = max(1, round(0.6 * n_samples)) if n_samples >= 3 else n_samples
    n_val = round(0.2 * n_samples) if n_samples >= 3 else 0
    order = rng.permutation(n_samples)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")

    samples: list[Sample] = []
    planted: dict[str, dict] = {}
    width = len(str(n_samples - 1))
    theme_pool = sorted(by_theme)
    for i in range(n_samples):
        theme = theme_pool[int(rng.integers(len(theme_pool)))]
        kws = by_theme[theme]
        if len(kws) >= 2:
            pick = rng.choice(len(kws), size=2, replace=False)
            k1, k2 = kws[int(pick[0])], kws[int(pick[1])]
            chosen = [k1, k2]
        else:
            k1 = k2 = kws[0]
            chosen = [k1]
        matched = [r for kw in chosen for r in by_keyword[kw]]
        planted_score = float(np.mean([r.sentiment for r in matched]))
        raw = 12.0 + severity_slope * planted_score + rng.normal(0.0, severity_noise)
        severity = int(np.clip(round(raw), SEVERITY_MIN, SEVERITY_MAX))
        frame = _SAMPLE_FRAMES[int(rng.integers(len(_SAMPLE_FRAMES)))]
        text = frame.format(theme=theme, k1=k1, k2=k2)

        cue = feature_signal * (severity - 12.0) / 12.0
        t_a = int(rng.integers(24, 73))
        t_v = int(rng.integers(16, 49))
        audio = rng.normal(0.0, 1.0, size=(t_a, d_a))
        video = rng.normal(0.0, 1.0, size=(t_v, d_v))
        audio[:, 0] += cue
        video[:, 0] += cue
        sid = f"s{i:0{width}d}"
        gender = "female" if rng.random() < 0.5 else "male"
        samples.append(
            Sample(sid, split_of[i], text, audio, video, severity, gender)
        )
        planted[sid] = {
            "keywords": chosen,
            "matched_records": [r.id for r in matched],
            "planted_sentiment": planted_score,
            "severity": severity,
        }

    counts = {s: 0 for s in SPLITS}
    for s in samples:
        counts[s.split] += 1
    manifest = DatasetManifest(
        name=f"synthetic-avec-seed{seed}",
        split_counts=counts,
        feature_dims=(d_a, d_v),
        source="synthetic",
        seed=seed,
    )
    truth = {
        "seed": seed,
        "n_samples": n_samples,
        "n_corpus": n_corpus,
        "feature_dims": [d_a, d_v],
        "mapping": {
            "form": "severity = clip(round(12 + slope * planted_sentiment + noise), 0, 24)",
            "planted_sentiment": "mean sentiment of corpus records containing any of the sample's keywords",
            "slope": severity_slope,
            "noise_sd": severity_noise,
            "feature_signal": feature_signal,
        },
        "keyword_latent_sentiment": latent,
        "corpus_ids": [r.id for r in records],
        "samples": planted,
    }
    return Fixture(manifest, samples, records, truth)


def generate_fixture(
    target,
    seed: int,
    n_samples: int,
    n_corpus: int,
    d_a: int = 16,
    d_v: int = 12,
    force: bool = False,
) -> Fixture:
    """Write a seeded synthetic dataset, corpus and ``fixture_truth.json`` under ``target``.

    Output is a pure function of the arguments.  A non-empty ``target`` is
    refused unless ``force`` is set, in which case its previous contents are
    removed first.
    """
    fixture = build_fixture(seed, n_samples, n_corpus, d_a, d_v)
    target = Path(target)
    if target.exists() and any(target.iterdir()):
        if not force:
            raise PreconditionError(f"refusing to overwrite non-empty directory {target}")
        import shutil

        shutil.rmtree(target)
    target.mkdir(parents=True, exist_ok=True)
    write_depression_dataset(target, fixture.manifest, fixture.samples)
    write_sentiment_corpus(fixture.records, target / "corpus.jsonl")
    (target / "fixture_truth.json").write_text(json.dumps(fixture.truth, indent=2, sort_keys=True) + "\n")
    return fixture
