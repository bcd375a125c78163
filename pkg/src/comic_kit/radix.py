"""Radix vocabulary encoding.

A word index ``i < base**digits`` is written as ``digits`` big-endian base-``base``
symbols, so a caption model only needs ``base + 2`` output symbols: the digits
``0..base-1`` plus GO (``base``) and EOS (``base + 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class RadixError(ValueError):
    """Raised for indices or digit groups the codec cannot represent."""


class CapacityError(RadixError):
    pass


@dataclass(frozen=True)
class RadixConfig:
    base: int
    digits: int = 2

    def __post_init__(self):
        if self.base < 2:
            raise RadixError(f"base must be >= 2, got {self.base}")
        if self.digits < 1:
            raise RadixError(f"digits must be >= 1, got {self.digits}")

    @property
    def go_index(self) -> int:
        return self.base

    @property
    def eos_index(self) -> int:
        return self.base + 1

    @property
    def encoded_vocab_size(self) -> int:
        return self.base + 2

    @property
    def capacity(self) -> int:
        return self.base**self.digits

    def check_capacity(self, vocab_size: int) -> None:
        if vocab_size > self.capacity:
            raise CapacityError(
                f"vocabulary of {vocab_size} words does not fit base {self.base} "
                f"with {self.digits} digits (capacity {self.capacity})"
            )

    @classmethod
    def for_vocab(cls, base: int, vocab_size: int) -> "RadixConfig":
        """Smallest digit count that covers ``vocab_size`` words."""
        digits = 1
        while base**digits < vocab_size:
            digits += 1
        return cls(base=base, digits=digits)


def encode_index(i: int, cfg: RadixConfig) -> list[int]:
    if not 0 <= i < cfg.capacity:
        raise RadixError(f"index {i} out of range [0, {cfg.capacity}) for base {cfg.base}^{cfg.digits}")
    out = [0] * cfg.digits
    for pos in range(cfg.digits - 1, -1, -1):
        i, out[pos] = divmod(i, cfg.base)
    return out


def decode_digits(digits: Sequence[int], cfg: RadixConfig) -> int:
    if len(digits) != cfg.digits:
        raise RadixError(f"expected {cfg.digits} digits, got {len(digits)}")
    value = 0
    for d in digits:
        if not 0 <= d < cfg.base:
            raise RadixError(f"malformed digit {d} for base {cfg.base}")
        value = value * cfg.base + d
    return value


def encode_caption(word_ids: Sequence[int], cfg: RadixConfig) -> list[int]:
    """Flatten each word id into its digits. GO/EOS are added by the caller."""
    out: list[int] = []
    for pos, w in enumerate(word_ids):
        try:
            out.extend(encode_index(w, cfg))
        except RadixError as exc:
            raise RadixError(f"word at position {pos}: {exc}") from None
    return out


def decode_caption(
    tokens: Sequence[int], cfg: RadixConfig, vocab_size: int, unk_id: int | None = None
) -> tuple[list[int], bool]:
    """Turn raw model output back into word ids.

    Never raises. A leading GO is dropped and decoding stops at the first EOS.
    Groups holding a special token, a trailing partial group, or an id outside
    the vocabulary become ``unk_id`` and clear the validity flag.
    """
    if unk_id is None:
        unk_id = vocab_size - 1
    toks = list(tokens)
    if toks and toks[0] == cfg.go_index:
        toks = toks[1:]
    if cfg.eos_index in toks:
        toks = toks[: toks.index(cfg.eos_index)]

    words: list[int] = []
    valid = True
    for start in range(0, len(toks), cfg.digits):
        group = toks[start : start + cfg.digits]
        if len(group) < cfg.digits or any(not 0 <= t < cfg.base for t in group):
            words.append(unk_id)
            valid = False
            continue
        w = decode_digits(group, cfg)
        if w >= vocab_size:
            words.append(unk_id)
            valid = False
        else:
            words.append(w)
    return words, valid


def build_decode_trie(words: Sequence[str], cfg: RadixConfig) -> dict:
    """Nested dict keyed by digit; after ``cfg.digits`` levels the value is the word."""
    cfg.check_capacity(len(words))
    root: dict = {}
    for idx, word in enumerate(words):
        node = root
        *head, last = encode_index(idx, cfg)
        for d in head:
            node = node.setdefault(d, {})
        node[last] = word
    return root


def trie_lookup(trie: dict, digits: Sequence[int]) -> str | None:
    node = trie
    for d in digits:
        if not isinstance(node, dict) or d not in node:
            return None
        node = node[d]
    return node if isinstance(node, str) else None


def trie_leaves(trie: dict) -> int:
    return sum(trie_leaves(v) if isinstance(v, dict) else 1 for v in trie.values())


def reduction_factor(word_vocab_size: int, cfg: RadixConfig) -> float:
    """How many times smaller the encoded embedding vocabulary is, to one decimal."""
    return round(word_vocab_size / cfg.encoded_vocab_size, 1)


@dataclass(frozen=True)
class CaptionCodec:
    """Maps word-id captions to the decoder's token stream and back.

    With ``radix`` set, tokens are radix digits and GO/EOS are ``base`` and
    ``base + 1``. Without it the decoder predicts words directly and GO/EOS
    follow the last word id.
    """

    vocab_size: int
    radix: RadixConfig | None = None

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.radix is not None:
            self.radix.check_capacity(self.vocab_size)

    @property
    def go(self) -> int:
        return self.radix.go_index if self.radix else self.vocab_size

    @property
    def eos(self) -> int:
        return self.radix.eos_index if self.radix else self.vocab_size + 1

    @property
    def encoded_vocab_size(self) -> int:
        return self.radix.encoded_vocab_size if self.radix else self.vocab_size + 2

    @property
    def tokens_per_word(self) -> int:
        return self.radix.digits if self.radix else 1

    def default_max_tokens(self, max_words: int) -> int:
        return self.tokens_per_word * max_words + 2

    def encode(self, word_ids: Sequence[int]) -> list[int]:
        if self.radix is not None:
            body = encode_caption(word_ids, self.radix)
        else:
            for pos, w in enumerate(word_ids):
                if not 0 <= w < self.vocab_size:
                    raise RadixError(f"word at position {pos}: id {w} outside vocabulary of {self.vocab_size}")
            body = list(word_ids)
        return [self.go] + body + [self.eos]

    def decode(self, tokens: Sequence[int]) -> tuple[list[int], bool]:
        if self.radix is not None:
            return decode_caption(tokens, self.radix, self.vocab_size)
        toks = list(tokens)
        if toks and toks[0] == self.go:
            toks = toks[1:]
        if self.eos in toks:
            toks = toks[: toks.index(self.eos)]
        unk = self.vocab_size - 1
        words = [t if 0 <= t < self.vocab_size else unk for t in toks]
        return words, all(0 <= t < self.vocab_size for t in toks)

    def to_dict(self) -> dict:
        d = {"vocab_size": self.vocab_size}
        if self.radix is not None:
            d.update(base=self.radix.base, digits=self.radix.digits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionCodec":
        radix = RadixConfig(d["base"], d.get("digits", 2)) if d.get("base") else None
        return cls(d["vocab_size"], radix)
