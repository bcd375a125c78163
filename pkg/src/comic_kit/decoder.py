"""LSTM caption decoder with attention.

Parameter names are stable strings and double as checkpoint keys:

    decoder/W_I            (n, z)      image embedding -> initial hidden state
    decoder/input_ln_gain  (z,)        layer norm on the image embedding
    decoder/input_ln_bias  (z,)
    decoder/E_w            (m, V_e)    input embedding
    decoder/E_o            (V_e, n)    output embedding (absent when tied)
    decoder/tie_adapter    (n, m)      only when tied and m != n
    decoder/output_bias    (V_e,)
    decoder/lstm_kernel    (4n, m + c + n), gate rows ordered i, f, g, o
    decoder/lstm_bias      (4n,)       forget rows start at 1
    attention/...          see attention.attention_param_shapes
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionConfig,
    AttentionOutput,
    ProjectedFeatures,
    attend,
    attention_param_shapes,
    init_attention_params,
    precompute_projection,
)
from .autodiff import Parameter, ParameterSet, Rng, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .radix import CaptionCodec

EMBED_SOURCES = ("mean", "flatten")


@dataclass(frozen=True)
class DecoderConfig:
    state_size: int = 512
    word_size: int = 256
    image_embed_size: int = 1024
    vocab_size: int = 258
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    dropout_rate: float = 0.35
    tie_embeddings: bool = False
    embed_source: str = "mean"

    def __post_init__(self):
        for name in ("state_size", "word_size", "image_embed_size", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attention.state_size != self.state_size:
            raise ValueError(
                f"attention.state_size={self.attention.state_size} != state_size={self.state_size}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.embed_source not in EMBED_SOURCES:
            raise ValueError(f"embed_source must be one of {EMBED_SOURCES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


@dataclass
class DecoderState:
    h: Tensor  # (B, n)
    cell: Tensor  # (B, n)


def param_shapes(cfg: DecoderConfig) -> dict[str, tuple]:
    n, m, z, V = cfg.state_size, cfg.word_size, cfg.image_embed_size, cfg.vocab_size
    c = cfg.attention.context_size
    shapes = {
        "decoder/W_I": (n, z),
        "decoder/input_ln_gain": (z,),
        "decoder/input_ln_bias": (z,),
        "decoder/E_w": (m, V),
    }
    if not cfg.tie_embeddings:
        shapes["decoder/E_o"] = (V, n)
    elif m != n:
        shapes["decoder/tie_adapter"] = (n, m)
    shapes["decoder/output_bias"] = (V,)
    shapes["decoder/lstm_kernel"] = (4 * n, m + c + n)
    shapes["decoder/lstm_bias"] = (4 * n,)
    shapes.update(attention_param_shapes(cfg.attention))
    return shapes


def init_params(cfg: DecoderConfig, rng: Rng) -> ParameterSet:
    """Xavier-uniform weights, unit LN gains, zero biases except the forget gate (1)."""
    gen = rng.generator()
    params = ParameterSet()
    n = cfg.state_size
    for name, shape in param_shapes(cfg).items():
        if name.startswith("attention/"):
            continue
        if name.endswith("ln_gain"):
            params.add(Parameter(name, np.ones(shape), decay=False))
        elif name == "decoder/lstm_bias":
            bias = np.zeros(shape)
            bias[n : 2 * n] = 1.0
            params.add(Parameter(name, bias, decay=False))
        elif name.endswith(("ln_bias", "output_bias")):
            params.add(Parameter(name, np.zeros(shape), decay=False))
        else:
            params.add(Parameter(name, ad.xavier_init(shape, gen)))
    for p in init_attention_params(cfg.attention, gen):
        params.add(p)
    return params


def count_decoder_params(cfg: DecoderConfig) -> dict[str, int]:
    """Closed-form counts; the image-embedding layer norm is folded into ``init``."""
    from .accountant import ModelSpec, count

    rep = count(ModelSpec.from_decoder_config(cfg))
    return {
        "embeddings": rep.embeddings,
        "recurrent": rep.recurrent,
        "attention": rep.attention,
        "init": rep.init + rep.norms,
        "total": rep.total,
    }


def image_embedding(features: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    """Derive the z-vector that seeds the LSTM from a (B, |F|, r) feature batch."""
    features = np.asarray(features)
    if cfg.embed_source == "mean":
        emb = features.mean(axis=-2)
    else:
        emb = features.reshape(*features.shape[:-2], -1)
    if emb.shape[-1] != cfg.image_embed_size:
        raise ad.DimensionError(
            f"{cfg.embed_source}-pooled image embedding has size {emb.shape[-1]}, "
            f"config expects {cfg.image_embed_size}"
        )
    return emb


@dataclass
class _Prepared:
    """Transposed views shared by every step of one forward pass."""

    kernel_t: Tensor
    w_m1_t: Tensor
    embed_t: Tensor | None  # (n, V) for the untied output projection


def _prepare(params: ParameterSet, cfg: DecoderConfig) -> _Prepared:
    embed_t = None if cfg.tie_embeddings else ad.transpose(params["decoder/E_o"])
    return _Prepared(
        ad.transpose(params["decoder/lstm_kernel"]),
        ad.transpose(params["attention/W_M1"]),
        embed_t,
    )


def init_state(image_embed, params: ParameterSet, cfg: DecoderConfig) -> DecoderState:
    x = image_embed if isinstance(image_embed, Tensor) else Tensor(np.asarray(image_embed, dtype=params["decoder/W_I"].data.dtype))
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] != cfg.image_embed_size:
        raise ad.DimensionError(f"init_state: image embedding size {x.shape[-1]} != {cfg.image_embed_size}")
    normed = ad.layer_norm(x, params["decoder/input_ln_gain"], params["decoder/input_ln_bias"])
    h = ad.matmul(ad.tanh(normed), ad.transpose(params["decoder/W_I"]))
    return DecoderState(h, Tensor(np.zeros_like(h.data)))


def _advance(
    state: DecoderState,
    prev_ids: np.ndarray,
    projected: ProjectedFeatures,
    params: ParameterSet,
    cfg: DecoderConfig,
    prep: _Prepared,
    train: bool,
    rng: Rng | None,
) -> tuple[DecoderState, AttentionOutput]:
    n = cfg.state_size
    att = attend(projected, state.h, params, cfg.attention, w_m1_t=prep.w_m1_t)
    emb = ad.embedding_lookup(params["decoder/E_w"], prev_ids)
    x = ad.concat([emb, att.context], axis=-1)
    x = ad.dropout(x, cfg.dropout_rate, train, rng.split(0).generator() if train and rng else None)
    gates = ad.matmul(ad.concat([x, state.h], axis=-1), prep.kernel_t) + params["decoder/lstm_bias"]
    i, f, g, o = ad.split(gates, [n, n, n, n], axis=-1)
    cell = ad.sigmoid(f) * state.cell + ad.sigmoid(i) * ad.tanh(g)
    h = ad.sigmoid(o) * ad.tanh(cell)
    return DecoderState(h, cell), att


def _logits(h: Tensor, params: ParameterSet, cfg: DecoderConfig, prep: _Prepared) -> Tensor:
    if not cfg.tie_embeddings:
        out = ad.matmul(h, prep.embed_t)
    else:
        if "decoder/tie_adapter" in params:
            h = ad.matmul(h, params["decoder/tie_adapter"])
        out = ad.matmul(h, params["decoder/E_w"])
    return out + params["decoder/output_bias"]


def step(
    state: DecoderState,
    prev_ids,
    projected: ProjectedFeatures,
    params: ParameterSet,
    cfg: DecoderConfig,
    train: bool = False,
    rng: Rng | None = None,
) -> tuple[Tensor, DecoderState, AttentionOutput]:
    """One decoding step: attention read, LSTM update, logits over the V_e tokens."""
    prev_ids = np.atleast_1d(np.asarray(prev_ids))
    if prev_ids.min() < 0 or prev_ids.max() >= cfg.vocab_size:
        raise IndexError(f"previous token id out of range [0, {cfg.vocab_size})")
    prep = _prepare(params, cfg)
    new_state, att = _advance(state, prev_ids, projected, params, cfg, prep, train, rng)
    h = ad.dropout(new_state.h, cfg.dropout_rate, train, rng.split(1).generator() if train and rng else None)
    return _logits(h, params, cfg, prep), new_state, att


@dataclass
class Batch:
    features: np.ndarray  # (B, |F|, r)
    image_embed: np.ndarray  # (B, z)
    inputs: np.ndarray  # (B, T) token fed at each step, GO first
    targets: np.ndarray  # (B, T) token to predict
    mask: np.ndarray  # (B, T) 1 up to and including EOS

    def __len__(self):
        return self.inputs.shape[0]


def make_batch(features: np.ndarray, sequences: list[list[int]], cfg: DecoderConfig, pad_to: int | None = None) -> Batch:
    """Pad GO..EOS token sequences into teacher-forcing inputs/targets/mask."""
    if not sequences:
        raise ValueError("empty batch")
    T = max(len(s) for s in sequences) - 1
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(sequences)
    inputs = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, seq in enumerate(sequences):
        L = len(seq) - 1
        inputs[b, :L] = seq[:-1]
        targets[b, :L] = seq[1:]
        mask[b, :L] = 1.0
    features = np.asarray(features)
    return Batch(features, image_embedding(features, cfg), inputs, targets, mask)


@dataclass
class LossTerms:
    total: Tensor
    nll: Tensor
    attn_reg: Tensor
    l2: Tensor


def l2_penalty(params, weight_decay: float) -> Tensor:
    """``weight_decay * sum ||W||^2`` over weights flagged for decay (LN terms and biases are not)."""
    terms = [(p * p).sum() for p in params if getattr(p, "decay", True)]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * weight_decay


def doubly_stochastic_penalty(weights: Tensor, mask: np.ndarray) -> Tensor:
    """``(1/g) sum_heads sum_j (1 - sum_t alpha_tj)^2``, averaged over the batch.

    ``weights`` is (B, T, g, |F|); masked steps do not count towards the sums.
    """
    B, T, g, F = weights.shape
    m = np.asarray(mask, dtype=weights.data.dtype).reshape(B, T, 1, 1)
    coverage = (weights * m).sum(axis=1)
    gap = 1.0 - coverage
    return (gap * gap).sum() * (1.0 / (B * g))


def teacher_forced_loss(
    batch: Batch,
    params: ParameterSet,
    cfg: DecoderConfig,
    weight_decay: float = 0.0,
    train: bool = False,
    rng: Rng | None = None,
) -> LossTerms:
    """NLL of the target tokens + doubly stochastic attention penalty + L2 weight loss.

    NLL is summed over unmasked steps and averaged over the batch.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    dtype = params["decoder/W_I"].data.dtype
    B, T = batch.inputs.shape
    prep = _prepare(params, cfg)
    projected = precompute_projection(batch.features.astype(dtype, copy=False), params, cfg.attention)
    state = init_state(batch.image_embed.astype(dtype, copy=False), params, cfg)

    hs, alphas = [], []
    for t in range(T):
        step_rng = rng.split(t) if rng is not None else None
        state, att = _advance(state, batch.inputs[:, t], projected, params, cfg, prep, train, step_rng)
        hs.append(ad.dropout(state.h, cfg.dropout_rate, train, step_rng.split(1).generator() if train and step_rng else None))
        alphas.append(att.weights)

    logits = _logits(ad.stack(hs, axis=1), params, cfg, prep)  # (B, T, V)
    picked = ad.gather_last(ad.log_softmax(logits, axis=-1), batch.targets)
    mask = batch.mask.astype(dtype, copy=False)
    nll = -(picked * mask).sum() * (1.0 / B)
    attn_reg = doubly_stochastic_penalty(ad.stack(alphas, axis=1), mask)
    l2 = l2_penalty(params, weight_decay)
    return LossTerms(nll + attn_reg + l2, nll, attn_reg, l2)


@dataclass
class CaptionModel:
    """Decoder weights plus everything needed to turn tokens back into words."""

    cfg: DecoderConfig
    codec: CaptionCodec
    params: ParameterSet

    @classmethod
    def create(cls, cfg: DecoderConfig, codec: CaptionCodec, seed: int) -> "CaptionModel":
        if cfg.vocab_size != codec.encoded_vocab_size:
            raise ValueError(
                f"decoder vocab_size {cfg.vocab_size} != encoded vocabulary size {codec.encoded_vocab_size}"
            )
        return cls(cfg, codec, init_params(cfg, Rng(seed)))

    def config_dict(self) -> dict:
        return {"decoder": self.cfg.to_dict(), "codec": self.codec.to_dict()}

    def save(self, path, extra: dict | None = None) -> Path:
        cfg = self.config_dict()
        if extra:
            cfg.update(extra)
        return save_checkpoint(path, self.params.state_dict(), cfg)

    @classmethod
    def load(cls, path) -> "CaptionModel":
        tensors, cfg = load_checkpoint(path)
        if cfg is None:
            raise FileNotFoundError(f"{path}: missing JSON sidecar with the model configuration")
        dcfg = DecoderConfig.from_dict(cfg["decoder"])
        model = cls(dcfg, CaptionCodec.from_dict(cfg["codec"]), init_params(dcfg, Rng(0)))
        model.params.load_state_dict(tensors)
        return model
