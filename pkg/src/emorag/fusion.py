"""Four-modality fusion model.

Text and Emotion Prompt share one hashed-bag text encoder; audio and video
each have a per-frame affine map, tanh, and temporal mean-pool.  The text
embedding queries each of the other three modalities through its own
multi-head cross-attention block, the three outputs are concatenated after
the text embedding, and a two-layer perceptron predicts the PHQ-8 score.

Two attention layouts exist.  ``"pooled"`` attends over the single pooled
modality vector (softmax over one position is identically 1).  ``"sequence"``
attends over per-frame / per-token encodings before pooling.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from emorag.corpus import SEVERITY_MAX, SEVERITY_MIN, Sample
from emorag.errors import FormatError, PreconditionError, ShapeError
from emorag.numkit import DiffTensor, concat, grad_check, matmul, mean, no_grad, softmax, tanh, tensor
from emorag.textproc import bucket_ids

ATTENTION_MODES = ("pooled", "sequence")
MODALITIES = ("audio", "video", "prompt")
CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    audio_dim: int = 16
    video_dim: int = 12
    d_model: int = 64
    n_heads: int = 4
    max_frames: int = 128
    text_vocab_hash_dim: int = 1024
    hash_seed: int = 0
    use_emotion_prompt: bool = True
    prediction_clamp: bool = True
    attention_mode: str = "pooled"
    # head output h maps to output_offset + output_scale * h (label midpoint and half-range)
    output_offset: float = (SEVERITY_MIN + SEVERITY_MAX) / 2
    output_scale: float = (SEVERITY_MAX - SEVERITY_MIN) / 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise PreconditionError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_frames < 1:
            raise PreconditionError("max_frames must be >= 1")
        if self.attention_mode not in ATTENTION_MODES:
            raise PreconditionError(f"attention_mode must be one of {ATTENTION_MODES}")
        if not self.output_scale > 0:
            raise PreconditionError("output_scale must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ModelParams:
    tensors: dict[str, DiffTensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> DiffTensor:
        return self.tensors[name]

    def named(self) -> list[tuple[str, DiffTensor]]:
        return list(self.tensors.items())

    def parameters(self) -> list[DiffTensor]:
        return list(self.tensors.values())

    def text_encoder(self) -> list[DiffTensor]:
        return [t for n, t in self.tensors.items() if n.startswith("text.")]

    def others(self) -> list[DiffTensor]:
        return [t for n, t in self.tensors.items() if not n.startswith("text.")]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.tensors[n].data = arr.copy()

    def copy(self) -> "ModelParams":
        return ModelParams({n: DiffTensor(t.data, requires_grad=True) for n, t in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.

    The embedding table is a lookup (one-hot input), so its fan-in is 1.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return DiffTensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    t: dict[str, DiffTensor] = {}
    t["text.embedding"] = uniform((config.text_vocab_hash_dim, d), 1)
    t["text.proj.weight"] = uniform((d, d), d)
    t["text.proj.bias"] = uniform((d,), d)
    t["audio.weight"] = uniform((config.audio_dim, d), config.audio_dim)
    t["audio.bias"] = uniform((d,), config.audio_dim)
    t["video.weight"] = uniform((config.video_dim, d), config.video_dim)
    t["video.bias"] = uniform((d,), config.video_dim)
    for m in MODALITIES:
        for w in ("w_q", "w_k", "w_v", "w_o"):
            t[f"attn_{m}.{w}"] = uniform((d, d), d)
    t["predictor.w1"] = uniform((4 * d, d), 4 * d)
    t["predictor.b1"] = uniform((d,), 4 * d)
    t["predictor.w2"] = uniform((d, 1), d)
    t["predictor.b2"] = uniform((1,), d)
    return ModelParams(t)


# --- encoders ----------------------------------------------------------------


def _bag_matrix(texts: Sequence[str], config: ModelConfig) -> np.ndarray:
    out = np.zeros((len(texts), config.text_vocab_hash_dim))
    for i, text in enumerate(texts):
        ids = bucket_ids(text, config.text_vocab_hash_dim, config.hash_seed)
        if not ids:
            raise PreconditionError(f"text has no tokens: {text!r}")
        np.add.at(out[i], ids, 1.0 / len(ids))
    return out


def _one_hot_tokens(text: str, config: ModelConfig) -> np.ndarray:
    ids = bucket_ids(text, config.text_vocab_hash_dim, config.hash_seed)
    if not ids:
        raise PreconditionError(f"text has no tokens: {text!r}")
    out = np.zeros((len(ids), config.text_vocab_hash_dim))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def encode_texts(texts: Sequence[str], params: ModelParams, config: ModelConfig) -> DiffTensor:
    """Batch of texts -> (B, d_model): mean of hashed-token embeddings, then affine projection."""
    for text in texts:
        if not text or not text.strip():
            raise PreconditionError("cannot encode empty text")
    bag = _bag_matrix(texts, config)
    pooled = matmul(bag, params["text.embedding"])
    return matmul(pooled, params["text.proj.weight"]) + params["text.proj.bias"]


def encode_text(text: str, params: ModelParams, config: ModelConfig) -> DiffTensor:
    return encode_texts([text], params, config).reshape(config.d_model)


def encode_text_tokens(text: str, params: ModelParams, config: ModelConfig) -> DiffTensor:
    """Per-token projected embeddings (T, d_model); their mean equals :func:`encode_text`."""
    one_hot = _one_hot_tokens(text, config)
    return matmul(matmul(one_hot, params["text.embedding"]), params["text.proj.weight"]) + params["text.proj.bias"]


def _modality_frames(frames: np.ndarray, modality: str, config: ModelConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    want = config.audio_dim if modality == "audio" else config.video_dim
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeError(f"{modality} frames must be a non-empty (T, d) matrix, got {frames.shape}")
    if frames.shape[1] != want:
        raise ShapeError(f"{modality} frames have width {frames.shape[1]}, model expects {want}")
    return frames[: config.max_frames]


def encode_frames(frames: np.ndarray, params: ModelParams, modality: str, config: ModelConfig) -> DiffTensor:
    """Per-frame encodings tanh(frames @ W + b), truncated to ``max_frames``: (T, d_model)."""
    frames = _modality_frames(frames, modality, config)
    return tanh(matmul(frames, params[f"{modality}.weight"]) + params[f"{modality}.bias"])


def encode_sequence(frames: np.ndarray, params: ModelParams, modality: str, config: ModelConfig) -> DiffTensor:
    """Temporal mean of :func:`encode_frames`: (d_model,)."""
    return mean(encode_frames(frames, params, modality, config), axis=0)


def encode_sequences(batch: Sequence[np.ndarray], params: ModelParams, modality: str, config: ModelConfig) -> DiffTensor:
    """Batched :func:`encode_sequence` via one stacked matmul and a pooling matrix: (B, d_model)."""
    chunks = [_modality_frames(f, modality, config) for f in batch]
    lengths = [len(c) for c in chunks]
    stacked = np.concatenate(chunks, axis=0)
    pool = np.zeros((len(chunks), len(stacked)))
    start = 0
    for i, n in enumerate(lengths):
        pool[i, start : start + n] = 1.0 / n
        start += n
    encoded = tanh(matmul(stacked, params[f"{modality}.weight"]) + params[f"{modality}.bias"])
    return matmul(pool, encoded)


# --- attention ---------------------------------------------------------------


def cross_attention_batch(q: DiffTensor, kv: DiffTensor, params: ModelParams, block: str, config: ModelConfig) -> DiffTensor:
    """Multi-head attention of queries (B, d) over key/value sequences (B, T, d) -> (B, d)."""
    d, h, dh = config.d_model, config.n_heads, config.head_dim
    if q.ndim != 2 or q.shape[1] != d or kv.ndim != 3 or kv.shape[2] != d or kv.shape[0] != q.shape[0]:
        raise ShapeError(f"cross-attention expects (B, {d}) and (B, T, {d}), got {q.shape} and {kv.shape}")
    b, t = kv.shape[0], kv.shape[1]
    p = f"attn_{block}"
    qh = matmul(q, params[f"{p}.w_q"]).reshape(b, 1, h, dh).transpose(0, 2, 1, 3)
    kh = matmul(kv, params[f"{p}.w_k"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    vh = matmul(kv, params[f"{p}.w_v"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    heads = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(b, d)
    return matmul(heads, params[f"{p}.w_o"])


def cross_attention(h_q, h_kv, params: ModelParams, block: str, config: ModelConfig) -> DiffTensor:
    """Single-query attention: ``h_q`` (d,), ``h_kv`` (d,) or (T, d) -> (d,)."""
    q = h_q if isinstance(h_q, DiffTensor) else tensor(h_q)
    kv = h_kv if isinstance(h_kv, DiffTensor) else tensor(h_kv)
    if kv.ndim == 1:
        kv = kv.reshape(1, kv.shape[0])
    out = cross_attention_batch(q.reshape(1, config.d_model), kv.reshape(1, kv.shape[0], kv.shape[1]), params, block, config)
    return out.reshape(config.d_model)


# --- forward -----------------------------------------------------------------


@dataclass
class BatchTrace:
    h_t: DiffTensor
    h_a: DiffTensor
    h_v: DiffTensor
    h_p: DiffTensor
    h_a_att: DiffTensor
    h_v_att: DiffTensor
    h_p_att: DiffTensor
    h_final: DiffTensor
    raw_prediction: DiffTensor  # (B,)


@dataclass
class ForwardTrace:
    h_t: np.ndarray
    h_a: np.ndarray
    h_v: np.ndarray
    h_p: np.ndarray
    h_a_att: np.ndarray
    h_v_att: np.ndarray
    h_p_att: np.ndarray
    h_final: np.ndarray
    raw_prediction: float
    prediction: float


def clamp_prediction(value: float, config: ModelConfig) -> float:
    if config.prediction_clamp:
        return float(min(max(value, SEVERITY_MIN), SEVERITY_MAX))
    return float(value)


def _prompt_texts(samples, prompts, config) -> list[str] | None:
    if not config.use_emotion_prompt:
        return None
    if prompts is None or len(prompts) != len(samples):
        raise PreconditionError("use_emotion_prompt is set but prompts are missing")
    texts = []
    for sample, prompt in zip(samples, prompts):
        if prompt is None:
            raise PreconditionError(f"sample {sample.id} has no Emotion Prompt")
        texts.append(prompt if isinstance(prompt, str) else prompt.text)
    return texts


def forward_batch(samples: Sequence[Sample], prompts, params: ModelParams, config: ModelConfig) -> BatchTrace:
    """Differentiable forward pass over a batch; predictions are unclamped."""
    prompt_texts = _prompt_texts(samples, prompts, config)
    b, d = len(samples), config.d_model
    h_t = encode_texts([s.text for s in samples], params, config)

    if config.attention_mode == "pooled":
        h_a = encode_sequences([s.audio_features for s in samples], params, "audio", config)
        h_v = encode_sequences([s.video_features for s in samples], params, "video", config)
        h_a_att = cross_attention_batch(h_t, h_a.reshape(b, 1, d), params, "audio", config)
        h_v_att = cross_attention_batch(h_t, h_v.reshape(b, 1, d), params, "video", config)
        if prompt_texts is not None:
            h_p = encode_texts(prompt_texts, params, config)
            h_p_att = cross_attention_batch(h_t, h_p.reshape(b, 1, d), params, "prompt", config)
    else:
        rows = {k: [] for k in ("h_a", "h_v", "h_p", "h_a_att", "h_v_att", "h_p_att")}
        for i, s in enumerate(samples):
            q = h_t if b == 1 else _row(h_t, i, b)
            seqs = {
                "a": encode_frames(s.audio_features, params, "audio", config),
                "v": encode_frames(s.video_features, params, "video", config),
            }
            if prompt_texts is not None:
                seqs["p"] = encode_text_tokens(prompt_texts[i], params, config)
            for key, block in (("a", "audio"), ("v", "video"), ("p", "prompt")):
                if key not in seqs:
                    continue
                seq = seqs[key]
                rows[f"h_{key}"].append(mean(seq, axis=0, keepdims=True))
                kv = seq.reshape(1, seq.shape[0], d)
                rows[f"h_{key}_att"].append(cross_attention_batch(q, kv, params, block, config))
        h_a, h_v = concat(rows["h_a"], axis=0), concat(rows["h_v"], axis=0)
        h_a_att, h_v_att = concat(rows["h_a_att"], axis=0), concat(rows["h_v_att"], axis=0)
        if prompt_texts is not None:
            h_p, h_p_att = concat(rows["h_p"], axis=0), concat(rows["h_p_att"], axis=0)

    if prompt_texts is None:
        h_p = tensor(np.zeros((b, d)))
        h_p_att = tensor(np.zeros((b, d)))

    h_final = concat([h_t, h_a_att, h_v_att, h_p_att], axis=1)
    hidden = tanh(matmul(h_final, params["predictor.w1"]) + params["predictor.b1"])
    head = matmul(hidden, params["predictor.w2"]) + params["predictor.b2"]
    raw = (head * config.output_scale + config.output_offset).reshape(b)
    return BatchTrace(h_t, h_a, h_v, h_p, h_a_att, h_v_att, h_p_att, h_final, raw)


def _row(x: DiffTensor, i: int, b: int) -> DiffTensor:
    select = np.zeros((1, b))
    select[0, i] = 1.0
    return matmul(select, x)


def forward(sample: Sample, prompt, params: ModelParams, config: ModelConfig) -> ForwardTrace:
    """Inference forward for one sample; ``prediction`` is clamped when configured."""
    with no_grad():
        trace = forward_batch([sample], [prompt] if config.use_emotion_prompt else None, params, config)
    raw = float(trace.raw_prediction.data[0])
    return ForwardTrace(
        h_t=trace.h_t.data[0].copy(),
        h_a=trace.h_a.data[0].copy(),
        h_v=trace.h_v.data[0].copy(),
        h_p=trace.h_p.data[0].copy(),
        h_a_att=trace.h_a_att.data[0].copy(),
        h_v_att=trace.h_v_att.data[0].copy(),
        h_p_att=trace.h_p_att.data[0].copy(),
        h_final=trace.h_final.data[0].copy(),
        raw_prediction=raw,
        prediction=clamp_prediction(raw, config),
    )


def predict(samples: Sequence[Sample], prompts, params: ModelParams, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Clamped (if configured) predictions for many samples, without recording a tape."""
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            chunk_prompts = prompts[start : start + batch_size] if config.use_emotion_prompt else None
            raw = forward_batch(chunk, chunk_prompts, params, config).raw_prediction.data
            out.extend(clamp_prediction(float(r), config) for r in raw)
    return np.array(out)


# --- loss --------------------------------------------------------------------


def ccc_loss(predictions, targets) -> DiffTensor:
    """1 - concordance correlation coefficient, population moments.

    Differentiable in whichever arguments are tensors.  When both inputs are
    constant with equal means the coefficient is taken as 0 (loss 1).
    """
    p = predictions if isinstance(predictions, DiffTensor) else tensor(np.asarray(predictions, dtype=np.float64))
    y = targets if isinstance(targets, DiffTensor) else tensor(np.asarray(targets, dtype=np.float64))
    if p.ndim != 1 or y.ndim != 1 or p.shape != y.shape:
        raise ShapeError(f"ccc_loss needs equal-length vectors, got {p.shape} and {y.shape}")
    if p.shape[0] < 2:
        raise PreconditionError("ccc_loss needs a batch of at least 2")
    mp, my = mean(p), mean(y)
    dp, dy = p - mp, y - my
    var_p, var_y = mean(dp * dp), mean(dy * dy)
    cov = mean(dp * dy)
    gap = mp - my
    denom = var_p + var_y + gap * gap
    if denom.item() == 0.0:
        return p.sum() * 0.0 + y.sum() * 0.0 + 1.0
    return 1.0 - 2.0 * cov / denom


def model_grad_check(
    samples: Sequence[Sample],
    prompts,
    config: ModelConfig,
    seed: int = 0,
    h: float = 1e-5,
) -> float:
    """Max relative error of ccc_loss(forward_batch(...)) gradients over all parameters."""
    samples = list(samples)
    params = init_params(config, seed)
    targets = np.array([float(s.severity) for s in samples])
    arm_prompts = prompts if config.use_emotion_prompt else None

    def loss():
        return ccc_loss(forward_batch(samples, arm_prompts, params, config).raw_prediction, targets)

    return grad_check(loss, params.parameters(), h)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> str:
    """Write ``EMCK | u16 version | u32 header length | JSON header | f64 tensors``; return sha256."""
    names = list(params.tensors)
    header = {
        "config": config.to_json(),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(params[n].data.astype("<f8").tobytes() for n in names)
    blob = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(head)) + head + body
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def checkpoint_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    try:
        version, head_len = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        start = 4 + struct.calcsize("<HI")
        header = json.loads(blob[start : start + head_len])
        pos = start + head_len
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            tensors[spec["name"]] = DiffTensor(arr, requires_grad=True)
        if pos != len(blob):
            raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
        config = ModelConfig.from_json(header["config"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return ModelParams(tensors), config
