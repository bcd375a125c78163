"""Vocabularies, caption preprocessing, dataset/feature-map files and the synthetic scene task."""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
FMAP_MAGIC = b"FMAP"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- text


_PUNCT = re.compile(r"[^\w\s']|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation (apostrophes survive only inside words), split on whitespace."""
    text = _PUNCT.sub(" ", text.lower())
    out = []
    for tok in text.split():
        tok = tok.strip("'")
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    """Frequency-ranked token table; a token's index is its position. UNK is always last."""

    entries: list[tuple[str, int]]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.entries or self.entries[-1][0] != UNK:
            self.entries = [e for e in self.entries if e[0] != UNK] + [(UNK, 0)]
        self._index = {}
        for i, (tok, _) in enumerate(self.entries):
            if tok in self._index:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self._index[tok] = i

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def unk_id(self) -> int:
        return self.size - 1

    @property
    def words(self) -> list[str]:
        return [t for t, _ in self.entries]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def word(self, idx: int) -> str:
        return self.entries[idx][0] if 0 <= idx < self.size else UNK

    def save(self, path) -> None:
        lines = [f"{tok}\t{freq}\n" for tok, freq in self.entries]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                tok, freq = line.split("\t")
                entries.append((tok, int(freq)))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'token<TAB>frequency'") from None
        return cls(entries)


def _ranked(counts: dict[str, int]) -> list[tuple[str, int]]:
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def build_vocab(captions: Iterable[Sequence[str]], min_freq: int = 5) -> Vocabulary:
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(tok for cap in captions for tok in cap if tok != UNK)
    kept = {t: c for t, c in counts.items() if c >= min_freq}
    return Vocabulary(_ranked(kept))


def truncate_and_index(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return [vocab.lookup(t) for t in tokens[:max_len]]


# ---------------------------------------------------------------- feature maps


@dataclass
class FeatureMap:
    """|F| x r grid of feature vectors, one row per image location."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or 0 in self.data.shape:
            raise ValueError(f"feature map must be a non-empty |F| x r matrix, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def locations(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def write_feature_map(fm: FeatureMap, path) -> None:
    header = FMAP_MAGIC + struct.pack("<II", fm.locations, fm.channels)
    Path(path).write_bytes(header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    if len(buf) < 12:
        raise FormatError(f"{path}: header truncated at byte offset {len(buf)}")
    n_loc, n_ch = struct.unpack_from("<II", buf, 4)
    need = 12 + 4 * n_loc * n_ch
    if len(buf) < need:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(buf)}, header declares "
            f"{n_loc}x{n_ch} floats ending at offset {need}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n_loc * n_ch, offset=12).reshape(n_loc, n_ch)
    bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
    if bad.size:
        raise FormatError(f"{path}: non-finite value at byte offset {12 + 4 * int(bad[0])}")
    return FeatureMap(data.astype(np.float32))


# ---------------------------------------------------------------- datasets


@dataclass
class CaptionRecord:
    id: str
    features: FeatureMap | Path
    captions: list[list[int]]
    meta: dict = field(default_factory=dict)

    def feature_map(self) -> FeatureMap:
        if not isinstance(self.features, FeatureMap):
            self.features = read_feature_map(self.features)
        return self.features


@dataclass
class Dataset:
    records: list[CaptionRecord]
    grid: tuple[int, int] | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, n_holdout: int) -> tuple["Dataset", "Dataset"]:
        if not 0 <= n_holdout < len(self.records):
            raise ValueError(f"holdout {n_holdout} must be in [0, {len(self.records)})")
        cut = len(self.records) - n_holdout
        return Dataset(self.records[:cut], self.grid), Dataset(self.records[cut:], self.grid)

    def pairs(self) -> list[tuple[int, int]]:
        """(record index, caption index) for every training caption."""
        return [(i, j) for i, rec in enumerate(self.records) for j in range(len(rec.captions))]


def write_dataset(ds: Dataset, vocab: Vocabulary, path) -> None:
    """JSON lines plus one ``.fmap`` per record under ``features/`` beside it."""
    path = Path(path)
    feat_dir = path.parent / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in ds.records:
        rel = Path("features") / f"{rec.id}.fmap"
        write_feature_map(rec.feature_map(), path.parent / rel)
        obj = {
            "id": rec.id,
            "features": rel.as_posix(),
            "captions": [" ".join(vocab.word(w) for w in cap) for cap in rec.captions],
        }
        obj.update(rec.meta)
        lines.append(json.dumps(obj, sort_keys=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if ds.grid is not None:
        (path.parent / "meta.json").write_text(json.dumps({"grid": list(ds.grid)}) + "\n")


def read_captions_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if "id" not in obj or "captions" not in obj:
            raise FormatError(f"{path}:{lineno}: record needs 'id' and 'captions'")
        out.append(obj)
    return out


def read_dataset(path, vocab: Vocabulary, max_len: int = 20) -> Dataset:
    """Load pre-tokenised captions (space separated); features load lazily."""
    path = Path(path)
    records = []
    for obj in read_captions_jsonl(path):
        caps = [truncate_and_index(c.split(), vocab, max_len) for c in obj["captions"]]
        meta = {k: v for k, v in obj.items() if k not in ("id", "features", "captions")}
        records.append(CaptionRecord(str(obj["id"]), path.parent / obj["features"], caps, meta))
    grid = None
    meta_path = path.parent / "meta.json"
    if meta_path.exists():
        grid = tuple(json.loads(meta_path.read_text())["grid"])
    return Dataset(records, grid)


# ---------------------------------------------------------------- synthetic scenes

SHAPES = ("circle", "square", "triangle", "star", "cross", "heart")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
GRID = (4, 4)
TABLE_SEED = 20190222


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[tuple[str, str, int], ...]

    def __post_init__(self):
        cells = [c for _, _, c in self.objects]
        if not 1 <= len(self.objects) <= 3:
            raise ValueError("a scene holds 1-3 objects")
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        object.__setattr__(self, "objects", tuple(sorted(self.objects, key=lambda o: o[2])))

    @property
    def caption(self) -> str:
        words: list[str] = []
        prev_row = None
        for shape, color, cell in self.objects:
            row = cell // GRID[1]
            if prev_row is not None:
                words.append("above" if row > prev_row else "beside")
            words += ["a", color, shape]
            prev_row = row
        return " ".join(words)


@dataclass(frozen=True)
class SignatureTable:
    """Orthonormal channel codes for shapes, colours, grid rows and grid columns.

    An occupied cell holds its object code plus a position code; empty cells
    hold only noise. Position codes are cumulative (row i sums the first i+1
    row vectors, likewise for columns), so grid order is a linear direction
    in feature space.
    """

    shape: np.ndarray
    color: np.ndarray
    row: np.ndarray
    col: np.ndarray
    position_scale: float = 1.0

    @classmethod
    def build(cls, channels: int, seed: int = TABLE_SEED) -> "SignatureTable":
        need = len(SHAPES) + len(COLORS) + sum(GRID)
        if channels < need:
            raise ValueError(f"need at least {need} channels, got {channels}")
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((channels, channels)))
        cols = q.T
        a, b = len(SHAPES), len(SHAPES) + len(COLORS)
        c = b + GRID[0]
        return cls(cols[:a], cols[a:b], cols[b:c], cols[c : c + GRID[1]])

    def object_code(self, shape: str, color: str) -> np.ndarray:
        return (self.shape[SHAPES.index(shape)] + self.color[COLORS.index(color)]) / np.sqrt(2.0)

    def position_code(self, cell: int) -> np.ndarray:
        r, c = divmod(cell, GRID[1])
        return self.position_scale * (self.row[: r + 1].sum(axis=0) + self.col[: c + 1].sum(axis=0))

    def render(self, scene: SyntheticScene, noise_sd: float, rng: np.random.Generator) -> np.ndarray:
        data = np.zeros((GRID[0] * GRID[1], self.shape.shape[1]))
        for shape, color, cell in scene.objects:
            data[cell] = self.object_code(shape, color) + self.position_code(cell)
        if noise_sd > 0:
            data = data + noise_sd * rng.standard_normal(data.shape)
        return data.astype(np.float32)

    def decode(self, data: np.ndarray) -> SyntheticScene:
        """Nearest-signature readout of a rendered feature map (empty cells map to nothing)."""
        pairs = [(s, c) for s in SHAPES for c in COLORS]
        objects = []
        for cell in range(data.shape[0]):
            codes = np.stack([np.zeros(self.shape.shape[1])] + [self.object_code(s, c) + self.position_code(cell) for s, c in pairs])
            best = int(np.argmin(((codes - data[cell]) ** 2).sum(axis=1)))
            if best:
                s, c = pairs[best - 1]
                objects.append((s, c, cell))
        return SyntheticScene(tuple(objects))


def sample_scene(rng: np.random.Generator) -> SyntheticScene:
    n = int(rng.integers(1, 4))
    cells = rng.choice(GRID[0] * GRID[1], size=n, replace=False)
    return SyntheticScene(
        tuple(
            (SHAPES[int(rng.integers(len(SHAPES)))], COLORS[int(rng.integers(len(COLORS)))], int(c))
            for c in cells
        )
    )


def distractor_words(count: int, seed: int = TABLE_SEED) -> list[str]:
    """Pronounceable filler tokens that never occur in synthetic captions."""
    rng = np.random.default_rng(seed + 1)
    onsets, vowels = "bdfgklmnprstvz", "aeiou"
    taken = set(SHAPES) | set(COLORS) | {"a", "above", "beside"}
    out: list[str] = []
    while len(out) < count:
        w = "".join(onsets[rng.integers(len(onsets))] + vowels[rng.integers(len(vowels))] for _ in range(3))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synth_generate(
    seed: int,
    count: int,
    feature_channels: int = 32,
    noise_sd: float = 0.05,
    min_vocab: int = 300,
) -> tuple[Dataset, Vocabulary]:
    """Deterministic set of rendered scenes and their vocabulary.

    Caption words are ranked by frequency; zero-frequency distractors pad the
    vocabulary to ``min_vocab`` entries (UNK included) so word ids need two
    radix digits at small bases.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if feature_channels < 32:
        raise ValueError(f"feature_channels must be >= 32, got {feature_channels}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    table = SignatureTable.build(feature_channels)
    rng = np.random.default_rng(seed)
    scenes = [sample_scene(rng) for _ in range(count)]
    maps = [table.render(s, noise_sd, rng) for s in scenes]

    counts = Counter(tok for s in scenes for tok in s.caption.split())
    ranked = _ranked(counts)
    pad = max(0, min_vocab - len(ranked) - 1)
    vocab = Vocabulary(ranked + sorted((w, 0) for w in distractor_words(pad)))

    records = [
        CaptionRecord(
            id=f"scene{i:05d}",
            features=FeatureMap(m),
            captions=[[vocab.lookup(t) for t in s.caption.split()]],
            meta={"objects": [list(o) for o in s.objects]},
        )
        for i, (s, m) in enumerate(zip(scenes, maps))
    ]
    return Dataset(records, GRID), vocab
