import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emorag.corpus import (
    SPLITS,
    DatasetManifest,
    Sample,
    SentimentRecord,
    build_fixture,
    generate_fixture,
    load_dataset,
    load_depression_dataset,
    load_sentiment_corpus,
    write_sentiment_corpus,
)
from emorag.errors import FormatError, IngestionError, PreconditionError, ValidationError


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixture_round_trip_is_bitwise(tmp_path):
    fx = generate_fixture(tmp_path / "fx", seed=7, n_samples=30, n_corpus=40)
    manifest, samples = load_depression_dataset(tmp_path / "fx")
    assert manifest == fx.manifest
    assert samples == fx.samples
    for s in samples:
        s.validate()


def test_same_seed_gives_identical_trees(tmp_path):
    generate_fixture(tmp_path / "a", seed=11, n_samples=20, n_corpus=24)
    generate_fixture(tmp_path / "b", seed=11, n_samples=20, n_corpus=24)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_different_seed_changes_the_tree(tmp_path):
    generate_fixture(tmp_path / "a", seed=1, n_samples=20, n_corpus=24)
    generate_fixture(tmp_path / "b", seed=2, n_samples=20, n_corpus=24)
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_generate_refuses_non_empty_target(tmp_path):
    generate_fixture(tmp_path, seed=1, n_samples=5, n_corpus=8)
    with pytest.raises(PreconditionError):
        generate_fixture(tmp_path, seed=1, n_samples=5, n_corpus=8)
    generate_fixture(tmp_path, seed=2, n_samples=5, n_corpus=8, force=True)
    assert json.loads((tmp_path / "fixture_truth.json").read_text())["seed"] == 2


@pytest.mark.parametrize("field", ["n_samples", "n_corpus"])
def test_zero_counts_rejected(field):
    kwargs = {"seed": 0, "n_samples": 10, "n_corpus": 10, field: 0}
    with pytest.raises(PreconditionError):
        build_fixture(**kwargs)


def test_severity_histogram_spans_ten_values():
    fx = build_fixture(7, 60, 200)
    severities = {s.severity for s in fx.samples}
    assert len(severities) >= 10
    assert all(0 <= v <= 24 for v in severities)


def test_planted_signal_correlates_with_severity(fixture7):
    planted = [fixture7.truth["samples"][s.id]["planted_sentiment"] for s in fixture7.samples]
    severity = [s.severity for s in fixture7.samples]
    r = np.corrcoef(planted, severity)[0, 1]
    # positive sentiment means milder symptoms, so the planted relation is negative
    assert abs(r) > 0.6
    assert r < 0


def test_split_sizes(fixture7):
    counts = {k: sum(s.split == k for s in fixture7.samples) for k in SPLITS}
    assert counts == {"train": 120, "validation": 40, "test": 40}
    assert fixture7.manifest.split_counts == counts


def test_corpus_ids_match_generator_log(tmp_path):
    fx = generate_fixture(tmp_path, seed=7, n_samples=10, n_corpus=200)
    records = load_sentiment_corpus(tmp_path / "corpus.jsonl")
    truth = json.loads((tmp_path / "fixture_truth.json").read_text())
    assert len(records) == 200
    assert [r.id for r in records] == truth["corpus_ids"]
    assert records == fx.records


def test_planted_scores_recomputable_from_sidecar(tmp_path):
    generate_fixture(tmp_path, seed=5, n_samples=15, n_corpus=30)
    truth = json.loads((tmp_path / "fixture_truth.json").read_text())
    by_id = {r.id: r for r in load_sentiment_corpus(tmp_path / "corpus.jsonl")}
    for entry in truth["samples"].values():
        scores = [by_id[i].sentiment for i in entry["matched_records"]]
        assert entry["planted_sentiment"] == pytest.approx(np.mean(scores), abs=1e-12)
        assert all(any(kw in by_id[i].text.split() for kw in entry["keywords"]) for i in entry["matched_records"])


# --- sentiment corpus --------------------------------------------------------


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def test_boundary_scores_accepted(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, [json.dumps({"id": str(i), "text": f"t{i}", "sentiment": v}) for i, v in enumerate([-3, 0, 3])])
    records = load_sentiment_corpus(path)
    assert [r.sentiment for r in records] == [-3.0, 0.0, 3.0]


def test_out_of_range_score_reports_line(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, [
        json.dumps({"id": "a", "text": "fine", "sentiment": 1.0}),
        json.dumps({"id": "b", "text": "too much", "sentiment": 3.5}),
    ])
    with pytest.raises(ValidationError, match=r":2:"):
        load_sentiment_corpus(path)


@pytest.mark.parametrize(
    "line, exc",
    [
        ("{not json", FormatError),
        (json.dumps({"id": "a", "text": "x"}), FormatError),
        (json.dumps({"id": "a", "text": "x", "sentiment": "high"}), FormatError),
        (json.dumps({"id": "a", "text": "  ", "sentiment": 0.0}), ValidationError),
        (json.dumps({"id": "a", "text": "x", "sentiment": float("nan")}), ValidationError),
    ],
)
def test_malformed_corpus_lines(tmp_path, line, exc):
    path = tmp_path / "c.jsonl"
    write_lines(path, [line])
    with pytest.raises(exc):
        load_sentiment_corpus(path)


def test_duplicate_record_ids_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    write_lines(path, [json.dumps({"id": "a", "text": "x", "sentiment": 0.0})] * 2)
    with pytest.raises(ValidationError, match="duplicate"):
        load_sentiment_corpus(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=1, max_size=12))
def test_corpus_round_trip(tmp_path_factory, scores):
    path = tmp_path_factory.mktemp("corpus") / "c.jsonl"
    records = [SentimentRecord(f"r{i}", f"text number {i} é", v) for i, v in enumerate(scores)]
    write_sentiment_corpus(records, path)
    assert load_sentiment_corpus(path) == records


# --- dataset loading failures ------------------------------------------------


def test_empty_root_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path)


@pytest.fixture()
def small_tree(tmp_path):
    generate_fixture(tmp_path, seed=3, n_samples=6, n_corpus=8, d_a=3, d_v=2)
    return tmp_path


def test_missing_transcript(small_tree):
    next((small_tree / "transcripts").iterdir()).unlink()
    with pytest.raises(IngestionError, match="transcript"):
        load_dataset(small_tree)


def test_ragged_feature_row_names_line(small_tree):
    path = sorted((small_tree / "audio").iterdir())[0]
    lines = path.read_text().splitlines()
    lines[3] = lines[3] + ",1.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="line 4"):
        load_dataset(small_tree)


def test_severity_out_of_range(small_tree):
    labels = small_tree / "labels.csv"
    rows = labels.read_text().splitlines()
    parts = rows[1].split(",")
    parts[2] = "25"
    rows[1] = ",".join(parts)
    labels.write_text("\n".join(rows) + "\n")
    with pytest.raises(ValidationError, match="severity"):
        load_dataset(small_tree)


def test_manifest_count_mismatch(small_tree):
    path = small_tree / "manifest.json"
    obj = json.loads(path.read_text())
    obj["split_counts"]["train"] += 1
    path.write_text(json.dumps(obj))
    with pytest.raises(ValidationError, match="split_counts"):
        load_dataset(small_tree)


def test_inconsistent_feature_widths(small_tree):
    path = sorted((small_tree / "video").iterdir())[1]
    rows = path.read_text().splitlines()
    path.write_text("\n".join(r + ",0.0" if i else r + ",f9" for i, r in enumerate(rows)) + "\n")
    with pytest.raises(FormatError, match="widths"):
        load_dataset(small_tree)


def test_manifest_source_forms():
    real = DatasetManifest.from_json({"name": "x", "split_counts": {}, "feature_dims": [1, 2], "source": "real"})
    assert real.to_json()["source"] == "real"
    synth = DatasetManifest.from_json({"name": "x", "split_counts": {}, "feature_dims": [1, 2], "source": {"synthetic": 4}})
    assert synth.seed == 4 and synth.to_json()["source"] == {"synthetic": 4}
    with pytest.raises(FormatError):
        DatasetManifest.from_json({"name": "x", "split_counts": {}, "feature_dims": [1, 2], "source": "fake"})


def test_sample_validate_rejects_nan_features():
    s = Sample("a", "train", "hi", np.array([[np.nan]]), np.ones((1, 1)), 3)
    with pytest.raises(ValidationError):
        s.validate()
