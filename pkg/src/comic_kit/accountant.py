"""Closed-form parameter counts for decoder + attention configurations.

The CNN encoder is never counted. ``reference_suite`` checks the algebra
against published model sizes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .attention import PROJECTIONS


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    vocab: int  # word vocabulary, or radix base when ``radix`` is set
    m: int = 256
    n: int = 512
    k: int = 512
    projection: str = "none"
    q: int | None = None
    g: int = 1
    r: int = 832
    z: int = 1024
    radix: bool = False
    specials_included: bool = False
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise SpecError(f"unknown projection {self.projection!r}")
        if self.projection == "untied" and not self.q:
            raise SpecError("untied projection needs q")
        for name in ("m", "n", "k", "g", "r", "z"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.vocab < 0:
            raise SpecError("vocab must be >= 0")
        if self.k % self.g:
            raise SpecError(f"g={self.g} must divide k={self.k}")
        if self.projection == "untied" and self.q % self.g:
            raise SpecError(f"g={self.g} must divide q={self.q}")
        if self.projection == "none" and self.r % self.g:
            raise SpecError(f"g={self.g} must divide r={self.r}")

    @property
    def encoded_vocab(self) -> int:
        """V_e: rows of the embedding tables, GO/EOS included."""
        if self.radix or not self.specials_included:
            return self.vocab + 2
        return self.vocab

    @property
    def context_dim(self) -> int:
        return {"none": self.r, "untied": self.q, "tied": self.k}[self.projection]

    @classmethod
    def from_decoder_config(cls, cfg) -> "ModelSpec":
        att = cfg.attention
        return cls(
            vocab=cfg.vocab_size,
            m=cfg.word_size,
            n=cfg.state_size,
            k=att.mlp_size,
            projection=att.projection,
            q=att.projected_size,
            g=att.heads,
            r=att.feature_channels,
            z=cfg.image_embed_size,
            specials_included=True,
            tie_embeddings=cfg.tie_embeddings,
        )


@dataclass
class CountReport:
    embeddings: int
    recurrent: int
    attention: int
    init: int
    norms: int
    reference: float | None = None

    @property
    def total(self) -> int:
        return self.embeddings + self.recurrent + self.attention + self.init + self.norms

    @property
    def rel_err(self) -> float | None:
        if self.reference is None:
            return None
        return (self.total - self.reference) / self.reference

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        d["rel_err"] = self.rel_err
        return d


def count(spec: ModelSpec, reference: float | None = None) -> CountReport:
    V, m, n, k, r, z = spec.encoded_vocab, spec.m, spec.n, spec.k, spec.r, spec.z
    if spec.tie_embeddings:
        embeddings = m * V + (n * m if m != n else 0) + V
    else:
        embeddings = m * V + V * n + V
    recurrent = 4 * n * (m + spec.context_dim + n) + 4 * n
    attention = k * r + k * n + k + 2 * k
    if spec.projection == "untied":
        attention += spec.q * r
    return CountReport(
        embeddings=embeddings,
        recurrent=recurrent,
        attention=attention,
        init=n * z,
        norms=2 * z,
        reference=reference,
    )


@dataclass
class SuiteRow:
    name: str
    quantity: str  # "total" or "embeddings"
    published: float
    computed: int
    tolerance: float
    gated: bool = True

    @property
    def rel_err(self) -> float:
        return (self.computed - self.published) / self.published

    @property
    def ok(self) -> bool:
        return abs(self.rel_err) <= self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(rel_err=self.rel_err, ok=self.ok)
        return d


COCO_WORDS = 9962
INSTAPIC_VOCAB = 25598  # as listed, GO/EOS/UNK already inside


def reference_suite(char_vocab: int = 40) -> list[SuiteRow]:
    """Published model sizes against the closed-form counts.

    ``char_vocab`` is the character-model vocabulary (GO/EOS added on top); it
    is not published, so that row carries a wider tolerance.
    """
    M = 1e6
    rows: list[SuiteRow] = []

    def add(name, spec, published, quantity="total", tol=0.02, gated=True):
        rep = count(spec)
        value = rep.total if quantity == "total" else rep.embeddings
        rows.append(SuiteRow(name, quantity, published * M, value, tol, gated))

    word = ModelSpec(COCO_WORDS)
    add("COCO word baseline", word, 12.2)
    add("COCO word baseline", word, 7.7, quantity="embeddings")
    tied_words = ModelSpec(COCO_WORDS, tie_embeddings=True)
    add("COCO word baseline, shared embeddings", tied_words, 7.3, gated=False)
    add("COCO word baseline, shared embeddings", tied_words, 2.6, quantity="embeddings", gated=False)

    add("vocab character", ModelSpec(char_vocab), 4.5, tol=0.03)
    add("vocab word", word, 12.2)
    add("vocab radix base-64", ModelSpec(64, radix=True), 4.5)
    add("vocab radix base-128", ModelSpec(128, radix=True), 4.6)

    table2 = {"none": (9.8, 4.2), "untied": (9.6, 3.9), "tied": (9.2, 3.5)}
    for proj, (w_size, r_size) in table2.items():
        q = 512 if proj == "untied" else None
        for g in (1, 4, 8):
            add(f"projection word {proj} g={g}", ModelSpec(COCO_WORDS, m=64, projection=proj, q=q, g=g), w_size)
        for g in (1, 4, 8):
            add(f"projection radix-128 {proj} g={g}", ModelSpec(128, m=64, projection=proj, q=q, g=g, radix=True), r_size)

    add("reference Baseline", word, 12.2)
    add("reference Baseline-8", ModelSpec(COCO_WORDS, g=8), 12.2)
    add("reference Baseline-SC", ModelSpec(COCO_WORDS, m=128, n=160, k=160), 3.9)
    add("reference Baseline-8-SC", ModelSpec(COCO_WORDS, m=128, n=160, k=160, g=8), 3.9)
    add("reference COMIC-128", ModelSpec(128, projection="tied", g=8, radix=True), 3.9)
    add("reference COMIC-256", ModelSpec(256, projection="tied", g=8, radix=True), 4.0)

    insta = ModelSpec(INSTAPIC_VOCAB, specials_included=True)
    add("InstaPIC Baseline", insta, 24.0)
    add("InstaPIC Baseline-8", ModelSpec(INSTAPIC_VOCAB, g=8, specials_included=True), 24.0)
    add("InstaPIC Baseline-SI", ModelSpec(INSTAPIC_VOCAB, m=64, n=80, k=80, specials_included=True), 4.2)
    add("InstaPIC COMIC-160", ModelSpec(160, projection="tied", g=8, radix=True), 4.0)
    add("InstaPIC COMIC-256", ModelSpec(256, projection="tied", g=8, radix=True), 4.0)
    return rows


def format_table(rows: list[SuiteRow]) -> str:
    header = f"{'configuration':<42} {'count':<10} {'published':>9} {'computed':>12} {'rel err':>8}  status"
    lines = [header, "-" * len(header)]
    for row in rows:
        status = "ok" if row.ok else "MISS"
        if not row.gated:
            status += " (info)"
        lines.append(
            f"{row.name:<42} {row.quantity:<10} {row.published / 1e6:>8.1f}M {row.computed:>12,d} "
            f"{row.rel_err * 100:>+7.2f}%  {status}"
        )
    return "\n".join(lines)


def suite_json(rows: list[SuiteRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2)
