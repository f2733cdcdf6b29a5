"""Command-line entry points: train, evaluate, retrieve, gen-synthetic.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import (
    ManifestError,
    RetrievalSplit,
    SyntheticSpec,
    build_vocab,
    generate_synthetic,
    load_manifest,
)
from .encoders import EmptyInputError, Vocab, tokenize
from .evaluation import compute_embeddings, evaluate_split
from .training import Checkpoint, CheckpointError, train

log = logging.getLogger("textreid")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _print_config(title: str, text: str) -> None:
    print(f"# effective config ({title})")
    print(text, end="")
    print("# end config", flush=True)


def _manifest_path(args, cfg) -> str:
    path = args.manifest or cfg.data.manifest
    if not path:
        raise UsageError("no dataset manifest: pass --manifest or set data.manifest")
    return path


def _load_checkpoint(path: str | None) -> Checkpoint:
    if not path:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"checkpoint directory not found: {p}")
    return Checkpoint.load(p)


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.manifest:
        overrides.append(f"data.manifest={args.manifest}")
    cfg = load_config(args.config, overrides)
    manifest = load_manifest(_manifest_path(args, cfg), root=cfg.data.root or None, check_images=True)
    split_name = args.split or cfg.data.train_split
    vocab = build_vocab(manifest, split_name)
    cfg.model.vocab_size = len(vocab)
    split = RetrievalSplit(manifest, split_name, vocab, cfg.model.image_size, cfg.model.max_len)
    _print_config("train", cfg.dumps())
    out = Path(args.out)
    history: list[dict] = []

    def report(epoch, _model):
        if history and (epoch + 1) % max(cfg.train.log_every, 1) == 0:
            last = history[-1]
            log.info("epoch %d/%d total %.4f cm1 %.4f cm2 %.4f id1 %.4f id2 %.4f l2 %.4f",
                     epoch + 1, cfg.train.epochs, last["total"], last["cm1"], last["cm2"],
                     last["id1"], last["id2"], last["l2"])

    train(split, cfg, vocab, out_dir=out, history=history, on_epoch_end=report)
    print(f"final checkpoint: {out / 'final'}")
    return EXIT_OK


def _split_for(ckpt: Checkpoint, args):
    cfg = ckpt.train_config()
    manifest = load_manifest(_manifest_path(args, cfg), root=cfg.data.root or None)
    split_name = args.split or cfg.data.eval_split
    split = RetrievalSplit(manifest, split_name, Vocab(ckpt.vocab), cfg.model.image_size, cfg.model.max_len)
    return cfg, split


def cmd_evaluate(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg, split = _split_for(ckpt, args)
    _print_config("evaluate", cfg.dumps())
    model = ckpt.build_model()
    metrics = evaluate_split(model, split).metrics()
    metrics["split"] = split.split
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "metrics.json"
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    if args.query is None:
        raise UsageError("--query is required")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    ckpt = _load_checkpoint(args.checkpoint)
    cfg, split = _split_for(ckpt, args)
    _print_config("retrieve", cfg.dumps())
    gallery = len(split.image_paths)
    if gallery == 0:
        raise UsageError("empty gallery")
    k = args.topk
    if k > gallery:
        log.warning("topk %d exceeds gallery size %d; returning %d results", k, gallery, gallery)
        k = gallery
    model = ckpt.build_model()
    ids = np.array([tokenize(args.query, Vocab(ckpt.vocab), cfg.model.max_len).token_ids])
    q = compute_embeddings(model, token_ids=ids)[0].astype(np.float64)
    g = compute_embeddings(model, images=split.images).astype(np.float64)
    scores = g @ q
    order = np.argsort(-scores, kind="stable")[:k]
    print(f"query: {args.query}")
    for rank, j in enumerate(order, 1):
        rec = split.records[j]
        mark = ""
        if args.query_id is not None:
            mark = "  [match]" if rec.orig_id == args.query_id else "  [miss]"
        print(f"{rank:3d}  {scores[j]: .4f}  id={rec.orig_id}  {split.image_paths[j]}{mark}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        identities=args.identities,
        images_per_id=args.images_per_id,
        test_identities=args.test_identities,
        image_size=args.image_size,
        seed=args.seed if args.seed is not None else 0,
    )
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not args.out:
        raise UsageError("--out is required")
    try:
        manifest = generate_synthetic(spec, args.out, overwrite=args.overwrite)
    except FileExistsError as e:
        raise UsageError(str(e)) from None
    print(json.dumps(manifest.counts(), sort_keys=True))
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textreid", description="Text-to-image person retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat 'section.key = value' config file")
            p.add_argument("--set", action="extend", nargs="+", metavar="KEY=VALUE",
                           help="config override (repeatable)")
        p.add_argument("--manifest", help="JSONL dataset manifest (default: data.manifest)")
        p.add_argument("--split", help="manifest split to use")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True, help="output directory for logs and checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="CMC / mAP on a split")
    common(p, config=False)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--out", help="metrics JSON file or directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve", help="rank gallery images for a text query")
    common(p, config=False)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--query", help="query description")
    p.add_argument("--query-id", type=int, help="identity of the query, to mark matches")
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("gen-synthetic", help="write the synthetic pedestrian dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--images-per-id", type=int, default=4)
    p.add_argument("--test-identities", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, CheckpointError, EmptyInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
