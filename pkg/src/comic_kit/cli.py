"""``comic-kit`` command line.

Every subcommand takes ``--config run.json``; keys are flag names with dashes
turned into underscores, and flags given on the command line win. The seed
comes from ``--seed``, then ``COMIC_KIT_SEED``, then 0. Failures print one
JSON line ``{"error": ..., "kind": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import ModelSpec, count, format_table, reference_suite, suite_json
from .attention import AttentionConfig
from .corpus import (
    Vocabulary,
    build_vocab,
    read_captions_jsonl,
    read_dataset,
    synth_generate,
    tokenize,
    write_dataset,
)
from .decoder import CaptionModel, DecoderConfig
from .inference import (
    InferenceConfig,
    beam_search,
    caption_many,
    dump_attention,
    tokens_to_caption,
    write_attention_dump,
)
from .metrics import caption_stats, evaluate, preprocess
from .radix import CaptionCodec, RadixConfig, decode_caption, encode_index
from .trainer import TrainConfig, train


class UsageError(Exception):
    """Bad flags or contradictory configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("COMIC_KIT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"COMIC_KIT_SEED={env!r} is not an integer") from None


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Model, training and radix settings for one run, checked before any work starts."""

    base: int = 32  # 0 trains a word-level model
    digits: int | None = None
    state_size: int = 512
    word_size: int = 256
    heads: int = 8
    mlp_size: int = 512
    projection: str = "tied"
    projected_size: int | None = None
    temperature: float = 1.0
    tie_embeddings: bool = False
    embed_source: str = "mean"
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def codec(self, vocab_size: int) -> CaptionCodec:
        if self.base == 0:
            return CaptionCodec(vocab_size)
        if self.base < 2:
            raise UsageError(f"--base must be 0 (word model) or >= 2, got {self.base}")
        radix = RadixConfig(self.base, self.digits) if self.digits else RadixConfig.for_vocab(self.base, vocab_size)
        if radix.capacity < vocab_size:
            raise UsageError(
                f"base {self.base} with {radix.digits} digits holds {radix.capacity} words but the vocabulary has "
                f"{vocab_size}; raise --digits or --base"
            )
        return CaptionCodec(vocab_size, radix)

    def decoder(self, codec: CaptionCodec, locations: int, channels: int) -> DecoderConfig:
        att = AttentionConfig(
            heads=self.heads,
            mlp_size=self.mlp_size,
            projection=self.projection,
            projected_size=self.projected_size,
            temperature=self.temperature,
            feature_channels=channels,
            state_size=self.state_size,
        )
        z = channels if self.embed_source == "mean" else channels * locations
        return DecoderConfig(
            state_size=self.state_size,
            word_size=self.word_size,
            image_embed_size=z,
            vocab_size=codec.encoded_vocab_size,
            attention=att,
            dropout_rate=self.train.dropout,
            tie_embeddings=self.tie_embeddings,
            embed_source=self.embed_source,
        )


# ---------------------------------------------------------------- subcommands


def cmd_vocab_build(args) -> int:
    captions = []
    for rec in read_captions_jsonl(args.captions):
        captions.extend(tokenize(c) for c in rec["captions"])
    vocab = build_vocab(captions, args.min_freq)
    vocab.save(args.out)
    print(f"wrote {vocab.size} entries to {args.out}")
    return 0


def cmd_encode(args) -> int:
    cfg = RadixConfig(args.base, args.digits)
    indices = list(args.index)
    if args.word:
        vocab = _need_vocab(args)
        indices += [vocab.lookup(w) for w in args.word]
    if not indices:
        raise UsageError("encode: give --index or --word")
    for i in indices:
        print(" ".join(str(d) for d in encode_index(i, cfg)))
    return 0


def cmd_decode(args) -> int:
    cfg = RadixConfig(args.base, args.digits)
    tokens = [int(t) for t in args.tokens]
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
        ids, valid = decode_caption(tokens, cfg, vocab.size, vocab.unk_id)
        print(" ".join(vocab.word(i) for i in ids))
    else:
        ids, valid = decode_caption(tokens, cfg, cfg.capacity, unk_id=-1)
        print(" ".join(str(i) for i in ids))
    if not valid:
        print("warning: malformed token groups decoded as unknown", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    ds, vocab = synth_generate(args.seed, args.count, args.channels, args.noise)
    train_ds, held = ds.split(args.holdout) if args.holdout else (ds, None)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(train_ds, vocab, out / "train.jsonl")
    if held is not None:
        write_dataset(held, vocab, out / "heldout.jsonl")
    vocab.save(out / "vocab.tsv")
    print(f"wrote {len(train_ds)} training and {len(held) if held else 0} held-out scenes to {out}")
    return 0


def _need_vocab(args) -> Vocabulary:
    if not getattr(args, "vocab", None):
        raise UsageError("--vocab is required")
    return Vocabulary.load(args.vocab)


def _default_vocab(args, data: Path) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    guess = data.parent / "vocab.tsv"
    if not guess.exists():
        raise UsageError(f"no --vocab given and {guess} does not exist")
    return Vocabulary.load(guess)


def cmd_train(args) -> int:
    data = Path(args.data)
    vocab = _default_vocab(args, data)
    ds = read_dataset(data, vocab, args.max_words)
    if len(ds) == 0:
        raise UsageError(f"{data} holds no records")
    fm = ds.records[0].feature_map()
    tcfg = TrainConfig(
        lr0=args.lr,
        lr_min=min(args.lr_min, args.lr),
        halve_every_epochs=args.halve_every,
        epochs=args.epochs,
        batch_size=args.batch_size,
        dropout=args.dropout,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    run = RunConfig(
        base=args.base,
        digits=args.digits,
        state_size=args.state_size,
        word_size=args.word_size,
        heads=args.heads,
        mlp_size=args.mlp_size,
        projection=args.projection,
        projected_size=args.projected_size,
        temperature=args.temperature,
        tie_embeddings=args.tie_embeddings,
        embed_source=args.embed_source,
        train=tcfg,
    )
    codec = run.codec(vocab.size)
    model = CaptionModel.create(run.decoder(codec, fm.locations, fm.channels), codec, args.seed)
    result = train(ds, model, tcfg, args.out, resume_from=args.resume)
    final = Path(args.out) / "model.ckpt"
    shutil.copyfile(result.checkpoint, final)
    shutil.copyfile(result.checkpoint.with_suffix(".json"), final.with_suffix(".json"))
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs, final loss {last.loss_total:.4f}; model at {final}")
    return 0


def cmd_caption(args) -> int:
    model = CaptionModel.load(args.model)
    data = Path(args.data)
    vocab = _default_vocab(args, data)
    ds = read_dataset(data, vocab)
    icfg = InferenceConfig(beam_size=args.beam, max_tokens=args.max_tokens)
    maps = [rec.feature_map().data for rec in ds.records]
    results = caption_many(model, maps, vocab, icfg, jobs=args.jobs)
    lines = [
        json.dumps({"id": rec.id, "caption": text, "valid": valid})
        for rec, (text, valid) in zip(ds.records, results)
    ]
    _write_or_print(args.out, "\n".join(lines) + "\n")
    return 0


def _read_generated(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                obj = json.loads(line)
                out[str(obj["id"])] = obj["caption"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: expected {{'id', 'caption'}} ({exc})") from None
    return out


def _training_corpus(path) -> list[str]:
    if not path:
        return []
    return [preprocess(c) for rec in read_captions_jsonl(path) for c in rec["captions"]]


def cmd_eval(args) -> int:
    generated = _read_generated(args.captions)
    refs_by_id = {str(r["id"]): r["captions"] for r in read_captions_jsonl(args.data)}
    missing = sorted(set(generated) - set(refs_by_id))
    if missing:
        raise ValueError(f"{len(missing)} captioned ids have no reference in {args.data}, e.g. {missing[0]}")
    ids = sorted(generated)
    report = evaluate([generated[i] for i in ids], [refs_by_id[i] for i in ids], _training_corpus(args.train_data))
    _write_or_print(args.out, report.to_json() + "\n")
    return 0


def cmd_stats(args) -> int:
    generated = _read_generated(args.captions)
    unique, avg = caption_stats([generated[i] for i in sorted(generated)], _training_corpus(args.train_data))
    print(json.dumps({"unique_pct": unique, "avg_len": avg, "n": len(generated)}))
    return 0


def cmd_params(args) -> int:
    if args.suite:
        rows = reference_suite(args.char_vocab)
        if args.json:
            print(suite_json(rows))
        else:
            print(format_table(rows))
        return 0 if all(r.ok for r in rows if r.gated) else 1
    if args.model:
        spec = ModelSpec.from_decoder_config(CaptionModel.load(args.model).cfg)
    else:
        if args.vocab is None:
            raise UsageError("params: give --suite, --model, or --vocab with the size flags")
        spec = ModelSpec(
            vocab=args.vocab, m=args.word_size, n=args.state_size, k=args.mlp_size,
            projection=args.projection, q=args.projected_size, g=args.heads,
            r=args.channels, z=args.image_embed_size, radix=args.radix,
            tie_embeddings=args.tie_embeddings,
        )
    print(json.dumps(count(spec).to_dict(), indent=2))
    return 0


def cmd_attn_dump(args) -> int:
    model = CaptionModel.load(args.model)
    data = Path(args.data)
    vocab = _default_vocab(args, data)
    ds = read_dataset(data, vocab)
    recs = [r for r in ds.records if r.id == args.id] if args.id else ds.records[:1]
    if not recs:
        raise UsageError(f"no record with id {args.id!r} in {data}")
    fm = recs[0].feature_map().data
    if args.tokens:
        tokens = [int(t) for t in args.tokens.split()]
    else:
        tokens = beam_search(model, fm, InferenceConfig(beam_size=args.beam))[0].tokens
    maps = dump_attention(model, fm, tokens)
    write_attention_dump(args.out, maps, tokens, ds.grid)
    text, _ = tokens_to_caption(tokens, model, vocab)
    print(f"{recs[0].id}: {text!r}; {maps.shape[0]} steps x {maps.shape[1]} heads written to {args.out}")
    return 0


def _write_or_print(path, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="comic-kit", description="Radix-encoded, multi-head attention caption models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON document of flag values; explicit flags override it")
        sp.add_argument("--seed", type=int, default=None, help="defaults to $COMIC_KIT_SEED, then 0")
        return sp

    vocab = sub.add_parser("vocab", help="vocabulary tools")
    vsub = vocab.add_subparsers(dest="vocab_command", required=True, parser_class=_Parser)
    vb = common(vsub.add_parser("build", help="count tokens in a captions JSONL file"))
    vb.add_argument("--captions", required=True)
    vb.add_argument("--min-freq", type=int, default=5)
    vb.add_argument("--out", required=True)
    vb.set_defaults(func=cmd_vocab_build)

    enc = common(sub.add_parser("encode", help="word index -> radix digits"))
    enc.add_argument("--base", type=int, required=True)
    enc.add_argument("--digits", type=int, default=2)
    enc.add_argument("--index", type=int, action="append", default=[])
    enc.add_argument("--word", action="append", default=[], help="look the word up in --vocab first")
    enc.add_argument("--vocab")
    enc.set_defaults(func=cmd_encode)

    dec = common(sub.add_parser("decode", help="radix digits -> word indices (or words with --vocab)"))
    dec.add_argument("--base", type=int, required=True)
    dec.add_argument("--digits", type=int, default=2)
    dec.add_argument("--vocab")
    dec.add_argument("tokens", nargs="+")
    dec.set_defaults(func=cmd_decode)

    syn = common(sub.add_parser("synth", help="generate the synthetic scene-captioning task"))
    syn.add_argument("--count", type=int, default=2200)
    syn.add_argument("--holdout", type=int, default=200)
    syn.add_argument("--channels", type=int, default=32)
    syn.add_argument("--noise", type=float, default=0.05)
    syn.add_argument("--out", required=True)
    syn.set_defaults(func=cmd_synth)

    tr = common(sub.add_parser("train", help="train a caption model"))
    tr.add_argument("--data", required=True, help="dataset JSONL")
    tr.add_argument("--vocab", help="defaults to vocab.tsv beside --data")
    tr.add_argument("--out", required=True, help="checkpoint directory")
    tr.add_argument("--resume", help="epoch_NNN.ckpt to continue from")
    tr.add_argument("--max-words", type=int, default=20)
    tr.add_argument("--base", type=int, default=32, help="radix base; 0 for a word-level model")
    tr.add_argument("--digits", type=int, default=None)
    tr.add_argument("--state-size", type=int, default=512)
    tr.add_argument("--word-size", type=int, default=256)
    tr.add_argument("--heads", type=int, default=8)
    tr.add_argument("--mlp-size", type=int, default=512)
    tr.add_argument("--projection", choices=("none", "untied", "tied"), default="tied")
    tr.add_argument("--projected-size", type=int, default=None)
    tr.add_argument("--temperature", type=float, default=1.0)
    tr.add_argument("--tie-embeddings", action="store_true")
    tr.add_argument("--embed-source", choices=("mean", "flatten"), default="mean")
    d = TrainConfig()
    tr.add_argument("--epochs", type=int, default=d.epochs)
    tr.add_argument("--batch-size", type=int, default=d.batch_size)
    tr.add_argument("--lr", type=float, default=d.lr0)
    tr.add_argument("--lr-min", type=float, default=d.lr_min)
    tr.add_argument("--halve-every", type=int, default=d.halve_every_epochs)
    tr.add_argument("--dropout", type=float, default=d.dropout)
    tr.add_argument("--weight-decay", type=float, default=d.weight_decay)
    tr.set_defaults(func=cmd_train)

    cap = common(sub.add_parser("caption", help="beam-search captions for a dataset"))
    cap.add_argument("--model", required=True)
    cap.add_argument("--data", required=True)
    cap.add_argument("--vocab")
    cap.add_argument("--beam", type=int, default=3)
    cap.add_argument("--max-tokens", type=int, default=None)
    cap.add_argument("--jobs", type=int, default=1)
    cap.add_argument("--out", help="JSONL output; stdout when omitted")
    cap.set_defaults(func=cmd_caption)

    ev = common(sub.add_parser("eval", help="BLEU-1..4 and caption statistics"))
    ev.add_argument("--captions", required=True, help="output of `caption`")
    ev.add_argument("--data", required=True, help="dataset JSONL with reference captions")
    ev.add_argument("--train-data", help="training JSONL, for the uniqueness statistic")
    ev.add_argument("--out", help="report JSON; stdout when omitted")
    ev.set_defaults(func=cmd_eval)

    st = common(sub.add_parser("stats", help="uniqueness and average length of generated captions"))
    st.add_argument("--captions", required=True)
    st.add_argument("--train-data")
    st.set_defaults(func=cmd_stats)

    pa = common(sub.add_parser("params", help="closed-form parameter counts"))
    pa.add_argument("--suite", action="store_true", help="check the published model sizes")
    pa.add_argument("--json", action="store_true")
    pa.add_argument("--char-vocab", type=int, default=40)
    pa.add_argument("--model", help="count a saved checkpoint's configuration")
    pa.add_argument("--vocab", type=int, help="word vocabulary size, or radix base with --radix")
    pa.add_argument("--radix", action="store_true")
    pa.add_argument("--word-size", type=int, default=256)
    pa.add_argument("--state-size", type=int, default=512)
    pa.add_argument("--mlp-size", type=int, default=512)
    pa.add_argument("--projection", choices=("none", "untied", "tied"), default="none")
    pa.add_argument("--projected-size", type=int, default=None)
    pa.add_argument("--heads", type=int, default=1)
    pa.add_argument("--channels", type=int, default=832)
    pa.add_argument("--image-embed-size", type=int, default=1024)
    pa.add_argument("--tie-embeddings", action="store_true")
    pa.set_defaults(func=cmd_params)

    ad_ = common(sub.add_parser("attn-dump", help="per-step, per-head attention maps as CSV"))
    ad_.add_argument("--model", required=True)
    ad_.add_argument("--data", required=True)
    ad_.add_argument("--vocab")
    ad_.add_argument("--id", help="record id; the first record when omitted")
    ad_.add_argument("--tokens", help="space-separated tokens to force; beam search when omitted")
    ad_.add_argument("--beam", type=int, default=3)
    ad_.add_argument("--out", required=True)
    ad_.set_defaults(func=cmd_attn_dump)
    return p


def _subparser(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.ArgumentParser:
    """Walk the subcommand chain named in ``argv`` down to the leaf parser."""
    node = parser
    for tok in argv:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions or tok not in actions[0].choices:
            continue
        node = actions[0].choices[tok]
    return node


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        path = Path(known.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        leaf = _subparser(parser, argv)
        dests = {a.dest for a in leaf._actions}
        unknown = sorted(set(doc) - dests)
        if unknown:
            raise UsageError(f"config file {path}: unknown keys {unknown}; valid keys are flag names with '_' for '-'")
        leaf.set_defaults(**doc)
        # required flags satisfied by the file
        for a in leaf._actions:
            if a.dest in doc:
                a.required = False
    args = parser.parse_args(argv)
    args.seed = resolve_seed(args.seed)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _report(exc, "usage")
        return 2
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _report(exc, "io")
        return 1
    except Exception as exc:  # noqa: BLE001  every failure becomes one parseable line
        _report(exc, "runtime")
        return 1


def _report(exc: Exception, kind: str) -> None:
    print(json.dumps({"error": type(exc).__name__, "kind": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
