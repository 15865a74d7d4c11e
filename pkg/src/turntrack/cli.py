"""Command-line interface.

Subcommands cover the corpus utilities (stats, validate, augment, split),
model work (train, eval, track) and an interactive repl.  Paths that do not
exist are also tried under $TURNTRACK_DATA_DIR.  Exit codes: 0 on success,
1 on data or model errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .corpus import (augment_names, compute_stats, load_corpus, parse_corpus,
                     save_corpus, serialize_conversation, split_corpus)
from .encoding import Encoder, FeatureLayout, load_first_names
from .errors import TurntrackError
from .evaluation import (EvaluationResult, error_propagation_study, evaluate,
                         metrics_to_obj, per_token_report, render_metrics,
                         render_propagation)
from .inference import serialize_predictions, track_conversation, track_turn
from .network import (ModelConfig, TransformerModel, load_checkpoint,
                      save_checkpoint)
from .repository import seed_repository, serialize_repository
from .training import TrainConfig, train


def resolve_path(path: str) -> Path:
    candidate = Path(path)
    if candidate.exists():
        return candidate
    data_dir = os.environ.get("TURNTRACK_DATA_DIR")
    if data_dir:
        fallback = Path(data_dir) / path
        if fallback.exists():
            return fallback
    return candidate


def _load(path: str, strict: bool):
    return load_corpus(resolve_path(path), strict=strict)


def cmd_stats(args) -> int:
    corpus = _load(args.corpus, not args.lenient)
    stats = compute_stats(corpus)
    if args.format == "records":
        obj = {
            "num_conversations": stats.num_conversations,
            "num_turns": stats.num_turns,
            "total_tokens": stats.total_tokens,
            "mean_tokens_per_turn": stats.mean_tokens_per_turn,
            "turns_per_conversation": dict(stats.turns_per_conversation_histogram),
            "entities_per_turn": dict(stats.entities_per_turn_histogram),
            "top_reference_spans": stats.top_reference_spans(args.top),
        }
        print(json.dumps(obj, indent=2, sort_keys=True))
        return 0
    print(f"conversations:        {stats.num_conversations}")
    print(f"turns:                {stats.num_turns}")
    print(f"tokens:               {stats.total_tokens}")
    print(f"mean tokens per turn: {stats.mean_tokens_per_turn:.2f}")
    print("turns per conversation:")
    for k in sorted(stats.turns_per_conversation_histogram):
        print(f"  {k:>3}: {stats.turns_per_conversation_histogram[k]}")
    print("entities per turn:")
    for k in sorted(stats.entities_per_turn_histogram):
        print(f"  {k:>3}: {stats.entities_per_turn_histogram[k]}")
    print(f"top {args.top} reference spans:")
    for text, count in stats.top_reference_spans(args.top):
        print(f"  {count:>6}  {text}")
    return 0


def cmd_validate(args) -> int:
    corpus = _load(args.corpus, not args.lenient)
    print(f"ok: {len(corpus)} conversations")
    return 0


def cmd_augment(args) -> int:
    corpus = _load(args.corpus, not args.lenient)
    if args.names:
        text = Path(resolve_path(args.names)).read_text()
        pool = [line.strip() for line in text.splitlines() if line.strip()]
    else:
        pool = sorted(load_first_names())
    augmented = augment_names(corpus, pool, seed=args.seed)
    save_corpus(augmented, args.output)
    print(f"wrote {len(augmented)} conversations to {args.output}")
    return 0


def cmd_split(args) -> int:
    corpus = _load(args.corpus, not args.lenient)
    train_part, eval_part = split_corpus(corpus, args.eval_fraction, args.seed)
    train_path = f"{args.output_prefix}.train.jsonl"
    eval_path = f"{args.output_prefix}.eval.jsonl"
    save_corpus(train_part, train_path)
    save_corpus(eval_part, eval_path)
    print(f"wrote {len(train_part)} conversations to {train_path}")
    print(f"wrote {len(eval_part)} conversations to {eval_path}")
    return 0


def _layout_from_args(args) -> FeatureLayout:
    return FeatureLayout(
        capacity=args.capacity, history=args.history,
        word_dim=args.word_dim, context_dim=args.word_dim)


def cmd_train(args) -> int:
    corpus = _load(args.corpus, not args.lenient)
    layout = _layout_from_args(args)
    model_cfg = ModelConfig(
        layout=layout, d_model=args.d_model, num_heads=args.heads,
        ffn_hidden=args.ffn_hidden, head_hidden=args.head_hidden,
        seed=args.seed)
    train_cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, seed=args.seed,
        id_randomization=not args.no_id_randomization,
        holdout_fraction=args.holdout,
        checkpoint_every=args.ckpt_every, checkpoint_dir=args.ckpt_dir)
    model = TransformerModel(model_cfg)
    result = train(corpus, model, train_cfg, encoder=Encoder(layout))
    save_checkpoint(args.output, model)
    last = result.history[-1] if result.history else {}
    status = "diverged" if result.diverged else "done"
    print(f"{status}: {result.epochs_run} epochs, "
          f"final loss {last.get('loss', float('nan')):.5f}, "
          f"saved {args.output}")
    return 1 if result.diverged else 0


def _eval_worker(ckpt: str, lines: list[str], teacher_forcing: bool,
                 strict: bool) -> dict:
    model = load_checkpoint(ckpt)
    encoder = Encoder(model.config.layout)
    corpus = parse_corpus(lines, strict=strict)
    return metrics_to_obj(evaluate(model, encoder, corpus,
                                   teacher_forcing=teacher_forcing,
                                   strict=strict))


def cmd_eval(args) -> int:
    strict = not args.lenient
    corpus = _load(args.corpus, strict)
    model = load_checkpoint(resolve_path(args.model))
    encoder = Encoder(model.config.layout)
    if args.jobs > 1 and len(corpus) > 1:
        chunks = [corpus[i::args.jobs] for i in range(args.jobs)]
        chunks = [c for c in chunks if c]
        ckpt = str(resolve_path(args.model))
        result = EvaluationResult()
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(_eval_worker, ckpt,
                            [serialize_conversation(c) for c in chunk],
                            args.teacher_forcing, strict)
                for chunk in chunks]
            for future in futures:
                obj = future.result()
                part = EvaluationResult()
                part.num_conversations = obj["num_conversations"]
                part.num_turns = obj["num_turns"]
                for name, m in obj["endpoints"].items():
                    part.endpoints[name].add(m["tp"], m["fp"], m["fn"])
                result.merge(part)
    else:
        result = evaluate(model, encoder, corpus,
                          teacher_forcing=args.teacher_forcing, strict=strict)
    if args.format == "records":
        obj = metrics_to_obj(result)
        if args.propagation:
            obj["propagation"] = error_propagation_study(
                model, encoder, corpus, strict=strict)
        print(json.dumps(obj, indent=2, sort_keys=True))
        return 0
    print(render_metrics(result))
    if args.propagation:
        print()
        print(render_propagation(error_propagation_study(
            model, encoder, corpus, strict=strict)))
    return 0


def cmd_track(args) -> int:
    strict = not args.lenient
    corpus = _load(args.corpus, strict)
    model = load_checkpoint(resolve_path(args.model))
    encoder = Encoder(model.config.layout)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for conv in corpus:
            predictions = track_conversation(
                model, encoder, conv, teacher_forcing=args.teacher_forcing,
                strict=strict)
            if args.per_token:
                print(per_token_report(conv, predictions), file=out)
            else:
                print(serialize_predictions(conv.id, predictions), file=out)
    finally:
        if args.output:
            out.close()
    return 0


def cmd_repl(args) -> int:
    model = load_checkpoint(resolve_path(args.model))
    encoder = Encoder(model.config.layout)
    participants = tuple(h.strip().lower() for h in args.participants.split(","))
    if len(participants) != 2 or participants[0] == participants[1]:
        print("error: --participants needs two distinct handles", file=sys.stderr)
        return 2
    repo = seed_repository(participants, encoder.layout.capacity)
    sender = 0
    turn_index = 0
    print(f"tracking {participants[0]} and {participants[1]}; "
          ":repo shows state, :quit exits")
    while True:
        try:
            line = input(f"{participants[sender]}> ")
        except EOFError:
            print()
            return 0
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            return 0
        if line == ":repo":
            print(serialize_repository(repo))
            continue
        tokens = line.lower().split()
        pred, repo = track_turn(
            model, encoder, repo, tokens, turn_index, sender,
            strict=False, teacher_forcing=False, gold_refs=None)
        for ref in pred.refs:
            text = " ".join(tokens[ref.span[0]:ref.span[1]])
            mark = "new" if ref.is_new else "old"
            members = (" members=" + str(sorted(ref.members))
                       if ref.members else "")
            print(f"  [{text}] {mark}#{ref.entity_id} "
                  f"{ref.entity_type}/{ref.gender}/{ref.number}{members}")
        if pred.dropped_spans:
            print(f"  dropped spans (capacity): {list(pred.dropped_spans)}")
        turn_index += 1
        sender = 1 - sender
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="turntrack",
        description="Online entity tracking for two-party conversations.")
    parser.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--lenient", action="store_true",
                       help="log corpus issues instead of failing")

    p = sub.add_parser("stats", help="summarize a corpus")
    p.add_argument("corpus")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--format", choices=("text", "records"), default="text")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check corpus invariants")
    p.add_argument("corpus")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("augment", help="rename people from a name pool")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--names", help="name pool file (default: bundled list)")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", help="scenario-grouped train/eval split")
    p.add_argument("corpus")
    p.add_argument("-o", "--output-prefix", required=True)
    p.add_argument("--eval-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a tracker")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity", type=int, default=20)
    p.add_argument("--history", type=int, default=10)
    p.add_argument("--word-dim", type=int, default=64)
    p.add_argument("--d-model", type=int, default=288)
    p.add_argument("--heads", type=int, default=9)
    p.add_argument("--ffn-hidden", type=int, default=800)
    p.add_argument("--head-hidden", type=int, default=800)
    p.add_argument("--holdout", type=float, default=0.0,
                   help="holdout fraction for early stopping")
    p.add_argument("--no-id-randomization", action="store_true")
    p.add_argument("--ckpt-every", type=int, default=10)
    p.add_argument("--ckpt-dir")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a tracker on a corpus")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("--teacher-forcing", action="store_true")
    p.add_argument("--propagation", action="store_true",
                   help="include the per-turn propagation table")
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="emit per-turn predictions")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("-o", "--output")
    p.add_argument("--teacher-forcing", action="store_true")
    p.add_argument("--per-token", action="store_true",
                   help="human-readable per-token report")
    common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("repl", help="interactive tracking session")
    p.add_argument("model")
    p.add_argument("--participants", required=True,
                   help="two handles, comma separated")
    p.set_defaults(func=cmd_repl)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TurntrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
