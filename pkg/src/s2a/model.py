"""Transformer-encoder performance model.

Six per-feature embeddings are concatenated, projected to the model width,
combined with sinusoidal positions, and run through a bidirectional post-norm
encoder whose attention masks PAD keys. A performer embedding of the model
width is summed with the final hidden state at every real position, and
three linear heads emit categorical logits over the velocity, IOI, and
duration vocabularies.

Everything is numpy float64 with hand-written backpropagation: gradients are
exact enough to verify against central finite differences, and all
randomness flows through explicit generators, so training and decoding are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .midi_io import NoteSequence, resample_grid
from .tokenizer import (
    FEATURE_NAMES,
    N_SPECIALS,
    SEGMENT_LEN,
    TokenSegment,
    VocabSpec,
    detokenize,
    segment as segment_tokens,
    tokenize,
)

PREDICTED = ("velocity", "ioi", "duration")
HEAD_KEYS = {"velocity": "head_vel", "ioi": "head_ioi", "duration": "head_dur"}

ARGMAX_TEMPERATURE = 1e-6
NEG_MASK = -1e30
LN_EPS = 1e-5


@dataclass(frozen=True)
class M2MConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    n_performers: int = 4
    max_seq_len: int = SEGMENT_LEN
    d_embed: int = 0  # 0 means d_model // 4
    seed: int = 0
    vocab: VocabSpec = field(default_factory=VocabSpec)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.n_performers < 1:
            raise ValueError("need at least one performer")
        if self.d_embed == 0:
            object.__setattr__(self, "d_embed", self.d_model // 4)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class M2MModel:
    config: M2MConfig
    params: dict[str, np.ndarray]
    pos_encoding: np.ndarray  # [max_seq_len, d_model], fixed

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise FloatingPointError(f"non-finite values in parameter {name}")


@dataclass(frozen=True)
class OutputDistributions:
    vel_logits: np.ndarray  # [T, 68]
    ioi_logits: np.ndarray  # [T, 772]
    dur_logits: np.ndarray  # [T, 1156]

    def logits(self, feature: str) -> np.ndarray:
        return {"velocity": self.vel_logits, "ioi": self.ioi_logits,
                "duration": self.dur_logits}[feature]


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * dim / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def init_model(config: M2MConfig) -> M2MModel:
    """Seeded Gaussian init (scale 0.02), zero biases, identity layer norms."""
    rng = np.random.default_rng(config.seed)
    p: dict[str, np.ndarray] = {}

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    for name in FEATURE_NAMES:
        p[f"emb_{name}"] = normal(config.vocab.size(name), config.d_embed)
    p["proj_w"] = normal(6 * config.d_embed, config.d_model)
    p["proj_b"] = np.zeros(config.d_model)
    for layer in range(config.n_layers):
        pre = f"l{layer}."
        for mat in ("wq", "wk", "wv", "wo"):
            p[pre + mat] = normal(config.d_model, config.d_model)
            p[pre + mat.replace("w", "b")] = np.zeros(config.d_model)
        p[pre + "ln1_g"] = np.ones(config.d_model)
        p[pre + "ln1_b"] = np.zeros(config.d_model)
        p[pre + "ff_w1"] = normal(config.d_model, config.d_ff)
        p[pre + "ff_b1"] = np.zeros(config.d_ff)
        p[pre + "ff_w2"] = normal(config.d_ff, config.d_model)
        p[pre + "ff_b2"] = np.zeros(config.d_model)
        p[pre + "ln2_g"] = np.ones(config.d_model)
        p[pre + "ln2_b"] = np.zeros(config.d_model)
    p["perf_emb"] = normal(config.n_performers, config.d_model)
    for feature in PREDICTED:
        key = HEAD_KEYS[feature]
        p[key + "_w"] = normal(config.d_model, config.vocab.size(feature))
        p[key + "_b"] = np.zeros(config.vocab.size(feature))

    return M2MModel(config, p, sinusoidal_positions(config.max_seq_len, config.d_model))


# ---------------------------------------------------------------------------
# Numeric primitives

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def _layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layernorm_backward(dout, cache):
    xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=tuple(range(dout.ndim - 1)))
    dbeta = dout.sum(axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Forward / backward over batched id arrays

def prepare_batch(segments: list[TokenSegment], config: M2MConfig):
    """Stack segments into (ids [B,T,6], nonpad [B,T], performer [B])."""
    ids = np.zeros((len(segments), SEGMENT_LEN, 6), dtype=np.int64)
    nonpad = np.zeros((len(segments), SEGMENT_LEN), dtype=bool)
    performer = np.zeros(len(segments), dtype=np.int64)
    for i, seg in enumerate(segments):
        ids[i] = [t.as_tuple() for t in seg.tuples]
        nonpad[i] = seg.pad_mask
        performer[i] = seg.performer_id
    validate_inputs(ids, performer, config)
    return ids, nonpad, performer


def validate_inputs(ids: np.ndarray, performer: np.ndarray, config: M2MConfig) -> None:
    for k, name in enumerate(FEATURE_NAMES):
        size = config.vocab.size(name)
        worst = int(ids[:, :, k].max(initial=0))
        if worst >= size:
            raise ValueError(f"{name} token id {worst} >= vocabulary size {size}")
    if ids.min(initial=0) < 0:
        raise ValueError("negative token id")
    if performer.size and (performer.min() < 0 or performer.max() >= config.n_performers):
        raise ValueError(
            f"performer id outside 0..{config.n_performers - 1}: {performer.tolist()}"
        )


def forward_batch(
    model: M2MModel,
    ids: np.ndarray,
    nonpad: np.ndarray,
    performer: np.ndarray,
    train_rng: np.random.Generator | None = None,
):
    """Run the encoder; returns ({feature: logits [B,T,V]}, cache).

    Dropout fires only when train_rng is given; inference is deterministic.
    """
    cfg = model.config
    p = model.params
    B, T, _ = ids.shape
    if T != cfg.max_seq_len:
        raise ValueError(f"sequence length {T} != configured {cfg.max_seq_len}")
    validate_inputs(ids, performer, cfg)
    rate = cfg.dropout if train_rng is not None else 0.0

    embeds = [p[f"emb_{name}"][ids[:, :, k]] for k, name in enumerate(FEATURE_NAMES)]
    concat = np.concatenate(embeds, axis=-1)  # [B,T,6*d_e]
    h = concat @ p["proj_w"] + p["proj_b"]
    h += model.pos_encoding[None, :T]

    cache: dict = {"ids": ids, "nonpad": nonpad, "performer": performer,
                   "concat": concat, "rate": rate, "layers": []}
    if rate > 0.0:
        mask = _dropout_mask(train_rng, h.shape, rate)
        h *= mask
        cache["drop_in"] = mask

    # additive attention mask: PAD keys excluded everywhere
    key_mask = np.where(nonpad[:, None, None, :], 0.0, NEG_MASK)  # [B,1,1,T]
    scale = 1.0 / np.sqrt(cfg.d_head)

    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        x_in = h
        q = _split_heads(x_in @ p[pre + "wq"] + p[pre + "bq"], cfg.n_heads)
        k = _split_heads(x_in @ p[pre + "wk"] + p[pre + "bk"], cfg.n_heads)
        v = _split_heads(x_in @ p[pre + "wv"] + p[pre + "bv"], cfg.n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale + key_mask
        attn = softmax(scores)
        ctx = _merge_heads(attn @ v)
        out = ctx @ p[pre + "wo"] + p[pre + "bo"]
        lcache = {"x_in": x_in, "q": q, "k": k, "v": v, "attn": attn, "ctx": ctx}
        if rate > 0.0:
            mask = _dropout_mask(train_rng, out.shape, rate)
            out *= mask
            lcache["drop_attn"] = mask
        h, lcache["ln1"] = _layernorm_forward(x_in + out, p[pre + "ln1_g"], p[pre + "ln1_b"])

        ff_in = h
        pre_act = ff_in @ p[pre + "ff_w1"] + p[pre + "ff_b1"]
        act = np.maximum(pre_act, 0.0)
        ff_out = act @ p[pre + "ff_w2"] + p[pre + "ff_b2"]
        lcache.update({"ff_in": ff_in, "pre_act": pre_act, "act": act})
        if rate > 0.0:
            mask = _dropout_mask(train_rng, ff_out.shape, rate)
            ff_out *= mask
            lcache["drop_ff"] = mask
        h, lcache["ln2"] = _layernorm_forward(ff_in + ff_out, p[pre + "ln2_g"], p[pre + "ln2_b"])
        cache["layers"].append(lcache)

    h = h + p["perf_emb"][performer][:, None, :] * nonpad[:, :, None]
    cache["encoded"] = h

    logits = {}
    for feature in PREDICTED:
        key = HEAD_KEYS[feature]
        logits[feature] = h @ p[key + "_w"] + p[key + "_b"]
    return logits, cache


def backward_batch(
    model: M2MModel, cache: dict, dlogits: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(logits) per head.

    Heads absent from dlogits contribute nothing. Returns a dict with the
    same keys as model.params.
    """
    cfg = model.config
    p = model.params
    grads = {name: np.zeros_like(value) for name, value in p.items()}

    h = cache["encoded"]
    dh = np.zeros_like(h)
    for feature, dlog in dlogits.items():
        key = HEAD_KEYS[feature]
        flat_h = h.reshape(-1, cfg.d_model)
        flat_d = dlog.reshape(-1, dlog.shape[-1])
        grads[key + "_w"] += flat_h.T @ flat_d
        grads[key + "_b"] += flat_d.sum(axis=0)
        dh += (flat_d @ p[key + "_w"].T).reshape(h.shape)

    nonpad = cache["nonpad"]
    masked = dh * nonpad[:, :, None]
    np.add.at(grads["perf_emb"], cache["performer"], masked.sum(axis=1))

    scale = 1.0 / np.sqrt(cfg.d_head)
    for layer in reversed(range(cfg.n_layers)):
        pre = f"l{layer}."
        lc = cache["layers"][layer]

        dsum, dg, db = _layernorm_backward(dh, lc["ln2"])
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dff_out = dsum.copy()
        if "drop_ff" in lc:
            dff_out *= lc["drop_ff"]
        flat = dff_out.reshape(-1, cfg.d_model)
        grads[pre + "ff_w2"] += lc["act"].reshape(-1, cfg.d_ff).T @ flat
        grads[pre + "ff_b2"] += flat.sum(axis=0)
        dact = dff_out @ p[pre + "ff_w2"].T
        dpre = dact * (lc["pre_act"] > 0.0)
        flat = dpre.reshape(-1, cfg.d_ff)
        grads[pre + "ff_w1"] += lc["ff_in"].reshape(-1, cfg.d_model).T @ flat
        grads[pre + "ff_b1"] += flat.sum(axis=0)
        dh = dsum + dpre @ p[pre + "ff_w1"].T

        dsum, dg, db = _layernorm_backward(dh, lc["ln1"])
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        dout = dsum.copy()
        if "drop_attn" in lc:
            dout *= lc["drop_attn"]
        flat = dout.reshape(-1, cfg.d_model)
        grads[pre + "wo"] += lc["ctx"].reshape(-1, cfg.d_model).T @ flat
        grads[pre + "bo"] += flat.sum(axis=0)
        dctx = _split_heads(dout @ p[pre + "wo"].T, cfg.n_heads)

        attn, q, k, v = lc["attn"], lc["q"], lc["k"], lc["v"]
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = dscores @ k * scale
        dk = dscores.transpose(0, 1, 3, 2) @ q * scale

        x_in = lc["x_in"]
        dx = dsum  # residual branch
        flat_x = x_in.reshape(-1, cfg.d_model)
        for mat, dval in (("wq", dq), ("wk", dk), ("wv", dv)):
            dmerged = _merge_heads(dval).reshape(-1, cfg.d_model)
            grads[pre + mat] += flat_x.T @ dmerged
            grads[pre + mat.replace("w", "b")] += dmerged.sum(axis=0)
            dx = dx + (dmerged @ p[pre + mat].T).reshape(x_in.shape)
        dh = dx

    if "drop_in" in cache:
        dh *= cache["drop_in"]
    flat = dh.reshape(-1, cfg.d_model)
    grads["proj_w"] += cache["concat"].reshape(-1, 6 * cfg.d_embed).T @ flat
    grads["proj_b"] += flat.sum(axis=0)
    dconcat = (flat @ p["proj_w"].T).reshape(cache["concat"].shape)

    ids = cache["ids"]
    for idx, name in enumerate(FEATURE_NAMES):
        sl = dconcat[:, :, idx * cfg.d_embed:(idx + 1) * cfg.d_embed]
        np.add.at(grads[f"emb_{name}"], ids[:, :, idx].reshape(-1), sl.reshape(-1, cfg.d_embed))
    return grads


def forward(model: M2MModel, seg: TokenSegment) -> OutputDistributions:
    """Per-note categorical logits for one 256-note segment (inference)."""
    ids, nonpad, performer = prepare_batch([seg], model.config)
    logits, _ = forward_batch(model, ids, nonpad, performer)
    return OutputDistributions(
        vel_logits=logits["velocity"][0],
        ioi_logits=logits["ioi"][0],
        dur_logits=logits["duration"][0],
    )


# ---------------------------------------------------------------------------
# Decoding

def nucleus_sample_row(
    logits: np.ndarray,
    temperature: float,
    top_p: float,
    rng: np.random.Generator,
) -> int:
    """Temperature + nucleus sampling of one categorical row.

    The nucleus is the smallest prefix of probability-sorted tokens (ties
    broken by lower id) whose mass reaches top_p. Temperatures below 1e-6
    short-circuit to argmax.
    """
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must be in (0, 1]")
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    if temperature < ARGMAX_TEMPERATURE:
        return int(np.argmax(logits))
    probs = softmax(logits / temperature)
    order = np.argsort(-probs, kind="stable")
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, top_p, side="left"))
    cut = min(cut, len(order) - 1)
    nucleus = order[:cut + 1]
    weights = probs[nucleus]
    weights = weights / weights.sum()
    r = rng.random()
    pick = int(np.searchsorted(np.cumsum(weights), r, side="right"))
    return int(nucleus[min(pick, len(nucleus) - 1)])


def sample(
    dist: OutputDistributions,
    temperature: float,
    top_p: float,
    seed: int | np.random.Generator,
) -> tuple[list[int], list[int], list[int]]:
    """Draw (velocity, ioi, duration) token ids at every position.

    Special ids 0..3 are masked out before sampling; draws consume the
    generator feature by feature, positions in order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for feature in PREDICTED:
        logits = dist.logits(feature).copy()
        logits[:, :N_SPECIALS] = NEG_MASK
        out.append([nucleus_sample_row(row, temperature, top_p, rng) for row in logits])
    return out[0], out[1], out[2]


def predict_performance(
    model: M2MModel,
    score: NoteSequence,
    performer_id: int,
    temperature: float = 1.0,
    top_p: float = 0.9,
    seed: int = 0,
) -> NoteSequence:
    """Render an expressive performance of a score.

    The score is resampled to the 96-tick grid, tokenized with the constant
    score velocity, windowed into 256-note segments, and decoded with
    temperature/nucleus sampling. Pitches come verbatim from the score;
    velocity, IOI, and duration come only from the model. The score's tempo
    map is carried over so the result plays back at the notated tempo.
    """
    grid = resample_grid(score) if score.ppq != 96 else score
    tokens = tokenize(grid, is_score=True)
    if not tokens:
        return NoteSequence(ppq=96, tempi=grid.tempi, time_signatures=grid.time_signatures)
    rng = np.random.default_rng(seed)
    vel: list[int] = []
    ioi: list[int] = []
    dur: list[int] = []
    for seg in sorted(segment_tokens(tokens, performer_id), key=lambda s: s.source_offset):
        dist = forward(model, seg)
        v, i, d = sample(dist, temperature, top_p, rng)
        vel.extend(v[:seg.n_real])
        ioi.extend(i[:seg.n_real])
        dur.extend(d[:seg.n_real])
    pitches = [t.pitch_tok for t in tokens]
    performance = detokenize(pitches, vel, ioi, dur, grid.effective_time_signatures())
    return replace(performance, tempi=grid.tempi)
