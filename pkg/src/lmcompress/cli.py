"""Command-line entry point: ``lmcompress {build-vocab,train,compress,evaluate,info}``.

Exit codes: 0 success, 2 usage or input error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import compress as cmp
from . import store
from .data import Vocabulary, build_vocab, encode, read_corpus
from .errors import (
    CompatibilityError,
    FormatError,
    IngestionError,
    NumericError,
    RankError,
    ShapeError,
    StorageError,
    VocabError,
)
from .model import ModelConfig, count_params, init_model, model_size_bytes, perplexity
from .train import TrainConfig, train

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3


def _int_list(text):
    return tuple(int(x) for x in str(text).split(",") if x)


# key -> (type, default); file values and flags share these names
CONFIG_KEYS = {
    "layer_kind": (str, "dense-lstm"),
    "layers": (int, 2),
    "hidden": (int, 64),
    "embed_dim": (int, None),
    "rank": (int, None),
    "tt_dims": (int, None),
    "tt_ranks": (_int_list, None),
    "init_scale": (float, 0.08),
    "max_vocab": (int, 10000),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "clip": (float, 5.0),
    "batch_size": (int, 20),
    "unroll": (int, 35),
    "epochs": (int, 10),
    "seed": (int, 0),
    "eval_batch_size": (int, None),
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = val
    return out


def resolve_config(file_values: dict, flag_values: dict) -> dict:
    """Defaults, then file values, then command-line flags."""
    eff = {}
    for key, (typ, default) in CONFIG_KEYS.items():
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None or raw == "" or raw == "none":
            eff[key] = default
            continue
        try:
            eff[key] = typ(raw)
        except ValueError:
            raise UsageError(f"bad value {raw!r} for {key}") from None
    if eff["embed_dim"] is None:
        eff["embed_dim"] = eff["hidden"]
    return eff


def model_config(eff: dict, n_vocab: int) -> ModelConfig:
    ranks = eff["tt_ranks"]
    if ranks is not None and len(ranks) == 1:
        ranks = ranks[0]
    return ModelConfig(
        n_layers=eff["layers"], hidden=eff["hidden"], embed_dim=eff["embed_dim"], n_vocab=n_vocab,
        layer_kind=eff["layer_kind"], rank=eff["rank"], tt_dims=eff["tt_dims"], tt_ranks=ranks,
        unroll=eff["unroll"], init_scale=eff["init_scale"],
    )


def train_config(eff: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in eff.items() if k in names})


def _print(*args):
    print(*args, flush=True)


def _encode_file(vocab, path):
    return encode(vocab, read_corpus(path))


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args):
    vocab = build_vocab(read_corpus(args.corpus), args.max_size)
    vocab.save(args.out)
    _print(f"vocab_size={len(vocab)}")
    return EXIT_OK


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k) for k in CONFIG_KEYS}
    eff = resolve_config(file_values, flag_values)
    for key in CONFIG_KEYS:
        _print(f"config {key}={eff[key]}")
    if args.init:
        model = store.load(args.init)
        vocab = model.vocab
    else:
        vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(read_corpus(args.corpus), eff["max_vocab"])
        model = init_model(model_config(eff, len(vocab)), vocab, seed=eff["seed"])
    if args.vocab and args.init and Vocabulary.load(args.vocab) != vocab:
        raise CompatibilityError("--vocab differs from the vocabulary of --init")
    masks = store.load_masks(args.mask).masks if args.mask else None
    train_ids = _encode_file(vocab, args.corpus)
    valid_ids = _encode_file(vocab, args.valid)
    report_path = Path(args.report or str(args.out) + ".report")
    lines = []

    def on_epoch(rec):
        lines.append(rec.line())
        _print(rec.line())

    try:
        train(model, train_ids, valid_ids, train_config(eff), masks=masks, on_epoch=on_epoch)
    finally:
        if lines:
            report_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    written = store.save(model, args.out)
    _print(f"params={count_params(model)} bytes={written} model={args.out}")
    return EXIT_OK


def _load_eval(model, args):
    if not args.eval:
        return None
    return _encode_file(model.vocab, args.eval)


def cmd_compress(args):
    model = store.load(args.model)
    try:
        if args.pass_name == "prune":
            groups = [g.strip() for g in args.layers.split(",") if g.strip()]
            out, mask = cmp.prune_model(model, args.sparsity, groups)
            if args.mask_out:
                store.save_masks(mask, args.mask_out)
        elif args.pass_name == "quantize":
            out = cmp.quantize_model(model)
        elif args.pass_name == "lowrank":
            out = cmp.lowrank_factorize(model, args.rank)
        else:
            if (args.tt_ranks is None) == (args.tt_eps is None):
                raise UsageError("give exactly one of --tt-ranks and --tt-eps")
            ranks = None
            if args.tt_ranks is not None:
                ranks = _int_list(args.tt_ranks)
                ranks = ranks[0] if len(ranks) == 1 else ranks
            out = cmp.tt_compress(model, args.tt_dims, max_ranks=ranks, eps=args.tt_eps)
    except (ValueError, RankError) as exc:
        raise UsageError(str(exc)) from None
    stream = _load_eval(model, args)
    report = cmp.compression_report(model, out, stream, args.batch, args.steps)
    store.save(out, args.out)
    sys.stdout.write(report.text())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args):
    model = store.load(args.model)
    if args.vocab and Vocabulary.load(args.vocab) != model.vocab:
        raise CompatibilityError(f"vocabulary {args.vocab} does not match the model")
    if model.vocab is None:
        raise CompatibilityError("model file carries no vocabulary")
    stream = _encode_file(model.vocab, args.eval)
    pp = perplexity(model, stream, args.batch, args.steps)
    _print(f"perplexity={pp:.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps({"perplexity": pp, "tokens": int(len(stream))}) + "\n")
    return EXIT_OK


def cmd_info(args):
    model = store.load(args.model)
    cfg = model.config
    _print(f"layer_kind={cfg.layer_kind} layers={cfg.n_layers} hidden={cfg.hidden} n_vocab={model.n_vocab}")
    _print(f"params={count_params(model)} bytes={model_size_bytes(model)} file_bytes={Path(args.model).stat().st_size}")
    for name, arr in model.named_params().items():
        nz = int(np.count_nonzero(arr))
        q = " quant8" if name in model.quantized else ""
        _print(f"tensor {name} shape={'x'.join(map(str, arr.shape))} params={arr.size} "
               f"nonzeros={nz} sparsity={1 - nz / arr.size:.4f}{q}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmcompress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, default=10000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", help="prune mask file; masked weights stay zero")
    p.add_argument("--init", help="start from this model file instead of a fresh one")
    p.add_argument("--vocab", help="vocabulary file to use instead of building one")
    p.add_argument("--report", help="report path (default: OUT.report)")
    for key in CONFIG_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="apply a compression pass")
    passes = p.add_subparsers(dest="pass_name", required=True)
    for name in ("prune", "quantize", "lowrank", "tt"):
        q = passes.add_parser(name)
        q.add_argument("--model", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--eval")
        q.add_argument("--batch", type=int, default=1)
        q.add_argument("--steps", type=int, default=35)
        q.add_argument("--json")
        if name == "prune":
            q.add_argument("--sparsity", type=float, required=True)
            q.add_argument("--layers", default="output")
            q.add_argument("--mask-out")
        elif name == "lowrank":
            q.add_argument("--rank", type=int, required=True)
        elif name == "tt":
            q.add_argument("--tt-dims", type=int, default=4)
            q.add_argument("--tt-ranks")
            q.add_argument("--tt-eps", type=float)
        q.set_defaults(func=cmd_compress)

    p = sub.add_parser("evaluate", help="report perplexity on a text file")
    p.add_argument("--model", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--vocab")
    p.add_argument("--json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("info", help="describe a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, IngestionError, VocabError, CompatibilityError, ShapeError,
            FormatError, StorageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
