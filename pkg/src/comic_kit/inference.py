"""Greedy and beam-search decoding, caption post-processing, attention dumps."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import precompute_projection
from .corpus import Vocabulary
from .decoder import CaptionModel, DecoderState, image_embedding, init_state, step

DEFAULT_MAX_WORDS = 20


@dataclass(frozen=True)
class InferenceConfig:
    beam_size: int = 3
    max_tokens: int | None = None  # GO and EOS included; None derives it from the codec
    length_normalization: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_tokens is not None and self.max_tokens < 2:
            raise ValueError(f"max_tokens must be >= 2, got {self.max_tokens}")
        if self.length_normalization:
            raise ValueError("length normalisation is not supported; scores are raw log probabilities")

    def resolve_max_tokens(self, model: CaptionModel, max_words: int = DEFAULT_MAX_WORDS) -> int:
        if self.max_tokens is not None:
            return self.max_tokens
        return model.codec.default_max_tokens(max_words)


@dataclass
class Hypothesis:
    tokens: list[int]  # GO first
    log_prob: float = 0.0
    finished: bool = False
    attention_trace: list[np.ndarray] = field(default_factory=list)  # one (g, |F|) per step

    def key(self) -> tuple:
        return (-self.log_prob, self.tokens)


# step_fn(state, last_tokens) -> (log_probs (H, V), new_state, attention (H, g, |F|) or None)
StepFn = Callable[[Any, np.ndarray], tuple[np.ndarray, Any, np.ndarray | None]]
SelectFn = Callable[[Any, np.ndarray], Any]


def search(
    step_fn: StepFn,
    init_state: Any,
    go: int,
    eos: int,
    beam_size: int,
    max_tokens: int,
    select: SelectFn | None = None,
) -> list[Hypothesis]:
    """Beam search over any scoring function, best first.

    Finished hypotheses stay in the pool and compete with the live ones at
    every step. Equal scores go to the lexicographically smaller token list,
    which makes the lower token id win. ``select(state, rows)`` gathers the
    state rows of surviving hypotheses; the default indexes arrays or
    tuples/lists of arrays along axis 0.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_tokens < 2:
        raise ValueError("max_tokens must be >= 2")
    select = select or _select_rows
    live = [Hypothesis([go])]
    done: list[Hypothesis] = []
    state = init_state

    while live and len(live[0].tokens) < max_tokens:
        logp, state, attn = step_fn(state, np.array([h.tokens[-1] for h in live]))
        logp = np.asarray(logp, dtype=np.float64)
        scores = np.array([h.log_prob for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        # everything scoring at least the beam_size-th best, so ties are resolved below
        pool_scores = np.concatenate([flat, [h.log_prob for h in done]])
        kth = np.partition(pool_scores, -min(beam_size, pool_scores.size))[-min(beam_size, pool_scores.size)]
        cands: list[tuple[tuple, int, int]] = []
        for flat_idx in np.flatnonzero(flat >= kth):
            row, tok = divmod(int(flat_idx), logp.shape[1])
            cands.append(((-float(flat[flat_idx]), live[row].tokens + [tok]), row, tok))
        for j, h in enumerate(done):
            if h.log_prob >= kth:
                cands.append((h.key(), -1, j))
        cands.sort(key=lambda c: c[0])

        new_live, new_done, rows = [], [], []
        for (neg, tokens), row, tok in cands[:beam_size]:
            if row < 0:
                new_done.append(done[tok])
                continue
            parent = live[row]
            trace = parent.attention_trace + ([np.asarray(attn[row])] if attn is not None else [])
            hyp = Hypothesis(tokens, -neg, tok == eos, trace)
            if hyp.finished:
                new_done.append(hyp)
            else:
                new_live.append(hyp)
                rows.append(row)
        live, done = new_live, new_done
        if live:
            state = select(state, np.array(rows))

    return sorted(done + live, key=Hypothesis.key)


def _select_rows(state, rows: np.ndarray):
    if isinstance(state, DecoderState):
        return DecoderState(ad.Tensor(state.h.data[rows]), ad.Tensor(state.cell.data[rows]))
    if isinstance(state, (tuple, list)):
        return type(state)(_select_rows(s, rows) for s in state)
    if state is None:
        return None
    return np.asarray(state)[rows]


def _features(model: CaptionModel, features) -> np.ndarray:
    dtype = model.params["decoder/W_I"].data.dtype
    f = np.asarray(features.data if hasattr(features, "data") else features, dtype=dtype)
    r = model.cfg.attention.feature_channels
    if f.ndim != 2 or f.shape[1] != r:
        raise ad.DimensionError(f"expected one (|F|, {r}) feature map, got shape {f.shape}")
    return f


def _model_step_fn(model: CaptionModel, f: np.ndarray) -> tuple[StepFn, DecoderState]:
    cfg, params = model.cfg, model.params
    with ad.no_grad():
        projected = precompute_projection(f[None], params, cfg.attention)
        state0 = init_state(image_embedding(f[None], cfg), params, cfg)
    cache: dict[int, Any] = {}

    def fn(state, tokens):
        H = len(tokens)
        if H not in cache:
            cache[H] = type(projected)(
                ad.Tensor(np.repeat(projected.scores.data, H, axis=0)),
                ad.Tensor(np.repeat(projected.values.data, H, axis=0)),
            )
        with ad.no_grad():
            logits, new_state, att = step(state, tokens, cache[H], params, cfg)
            logp = ad.log_softmax(logits, axis=-1).data
        return logp, new_state, att.weights.data

    return fn, state0


def beam_search(model: CaptionModel, features, cfg: InferenceConfig | None = None, max_words: int = DEFAULT_MAX_WORDS) -> list[Hypothesis]:
    """Ranked hypotheses for one ``(|F|, r)`` feature map."""
    cfg = cfg or InferenceConfig()
    fn, state0 = _model_step_fn(model, _features(model, features))
    return search(fn, state0, model.codec.go, model.codec.eos, cfg.beam_size, cfg.resolve_max_tokens(model, max_words))


def greedy(model: CaptionModel, features, max_tokens: int | None = None) -> list[Hypothesis]:
    """Argmax decoding for a ``(B, |F|, r)`` batch, all rows stepped together."""
    dtype = model.params["decoder/W_I"].data.dtype
    feats = np.asarray(features, dtype=dtype)
    if feats.ndim == 2:
        feats = feats[None]
    cfg, params, codec = model.cfg, model.params, model.codec
    max_tokens = max_tokens or codec.default_max_tokens(DEFAULT_MAX_WORDS)
    B = feats.shape[0]
    hyps = [Hypothesis([codec.go]) for _ in range(B)]
    with ad.no_grad():
        projected = precompute_projection(feats, params, cfg.attention)
        state = init_state(image_embedding(feats, cfg), params, cfg)
        for _ in range(max_tokens - 1):
            if all(h.finished for h in hyps):
                break
            prev = np.array([h.tokens[-1] for h in hyps])
            logits, state, att = step(state, prev, projected, params, cfg)
            logp = ad.log_softmax(logits, axis=-1).data.astype(np.float64)
            best = logp.argmax(axis=-1)
            for b, h in enumerate(hyps):
                if h.finished:
                    continue
                tok = int(best[b])
                h.tokens.append(tok)
                h.log_prob += float(logp[b, tok])
                h.attention_trace.append(att.weights.data[b].copy())
                h.finished = tok == codec.eos
    return hyps


def tokens_to_caption(tokens: Sequence[int], model_or_codec, vocab: Vocabulary) -> tuple[str, bool]:
    codec = getattr(model_or_codec, "codec", model_or_codec)
    words, valid = codec.decode(tokens)
    return " ".join(vocab.word(w) for w in words), valid


def caption(model: CaptionModel, features, vocab: Vocabulary, cfg: InferenceConfig | None = None) -> tuple[str, bool]:
    """Best beam decoded to words; malformed token groups come back as UNK, flagged invalid."""
    best = beam_search(model, features, cfg)[0]
    return tokens_to_caption(best.tokens, model, vocab)


def caption_many(
    model: CaptionModel,
    feature_maps: Sequence,
    vocab: Vocabulary,
    cfg: InferenceConfig | None = None,
    jobs: int = 1,
) -> list[tuple[str, bool]]:
    """Caption several images, optionally on a thread pool. Output order follows input order."""
    if jobs <= 1:
        return [caption(model, f, vocab, cfg) for f in feature_maps]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda f: caption(model, f, vocab, cfg), feature_maps))


# ---------------------------------------------------------------- attention maps


def dump_attention(model: CaptionModel, features, tokens: Sequence[int]) -> np.ndarray:
    """Re-run the decoder on forced ``tokens`` and return the (steps, g, |F|) weights.

    Row ``t`` is the attention used to emit ``tokens[t + 1]``.
    """
    f = _features(model, features)
    tokens = [int(t) for t in tokens]
    V = model.cfg.vocab_size
    if len(tokens) < 2 or tokens[0] != model.codec.go:
        raise ValueError("tokens must start with GO and contain at least one emitted token")
    if any(not 0 <= t < V for t in tokens):
        raise ValueError(f"token ids must lie in [0, {V})")
    cfg, params = model.cfg, model.params
    out = []
    with ad.no_grad():
        projected = precompute_projection(f[None], params, cfg.attention)
        state = init_state(image_embedding(f[None], cfg), params, cfg)
        for t in tokens[:-1]:
            _, state, att = step(state, [t], projected, params, cfg)
            out.append(att.weights.data[0])
    return np.stack(out)


def write_attention_dump(path, maps: np.ndarray, tokens: Sequence[int], grid: Sequence[int] | None = None) -> Path:
    """CSV ``step,head,loc_0..`` plus a JSON sidecar holding the grid and emitted tokens."""
    path = Path(path)
    steps, heads, F = maps.shape
    if grid is not None and int(np.prod(grid)) != F:
        raise ValueError(f"grid {tuple(grid)} does not have {F} cells")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "head"] + [f"loc_{j}" for j in range(F)])
        for s in range(steps):
            for h in range(heads):
                w.writerow([s, h] + [f"{x:.8g}" for x in maps[s, h]])
    side = {"grid": list(grid) if grid is not None else [F], "tokens": [int(t) for t in tokens[1 : steps + 1]]}
    path.with_suffix(".json").write_text(json.dumps(side) + "\n")
    return path
