"""Command-line surface: synth-data, train, eval, predict, inspect-map,
grad-check.

Exit codes: 0 success, 1 usage problems, 2 data/format problems,
3 verification failure (grad-check above tolerance).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dio
from . import evaluation, training
from .config import load_configs
from .errors import MomentGridError, ValidationError
from .model import MomentRetrievalModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser():
    parser = _Parser(prog="momentgrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a planted-span dataset")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--test-samples", type=int, default=0,
                   help="also split off this many samples into <out>/test")
    p.add_argument("--tv", type=int, default=16, help="clips per video")
    p.add_argument("--dv", type=int, default=64, help="feature dimension")
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--query-len", type=int, nargs=2, default=(3, 8))
    p.add_argument("--span-frac", type=float, nargs=2, default=(0.2, 0.5))
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="dotted-key config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. --set model.T=16")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--glove", help="optional word-vector file for the embedding")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="prediction dump path")
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("predict", help="top-k spans for one video + query")
    p.add_argument("--features", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--nms", type=float, default=0.49)

    p = sub.add_parser("inspect-map", help="print the validity mask or a map channel")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--scheme", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--features")
    p.add_argument("--query")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--map", choices=("content", "boundary", "scores"))
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--duration", type=float)

    p = sub.add_parser("grad-check", help="finite-difference gradient certification")
    p.add_argument("--epsilon", type=float, default=5e-5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--c", type=int, default=32)
    p.add_argument("--l", type=int, default=3)
    p.add_argument("--groups", type=int, default=4)
    return parser


def cmd_synth_data(args):
    try:
        spec = dio.SyntheticSpec(
            num_samples=args.samples + args.test_samples,
            T_V=args.tv,
            D_v=args.dv,
            vocab_size=args.vocab,
            query_len_range=tuple(args.query_len),
            span_len_range=tuple(args.span_frac),
            noise_std=args.noise,
            seed=args.seed,
        ).validate()
    except ValidationError as exc:
        print(f"momentgrid synth-data: invalid spec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    annotations, features, vocab = dio.gen_synthetic(spec)
    if args.test_samples:
        n = args.samples
        dio.write_dataset(os.path.join(args.out, "train"),
                          annotations[:n], {a.video_id: features[a.video_id]
                                            for a in annotations[:n]}, vocab)
        dio.write_dataset(os.path.join(args.out, "test"),
                          annotations[n:], {a.video_id: features[a.video_id]
                                            for a in annotations[n:]}, vocab)
        print(f"wrote {n} train + {args.test_samples} test samples to {args.out}")
    else:
        dio.write_dataset(args.out, annotations, features, vocab)
        print(f"wrote {len(annotations)} samples to {args.out}")
    return EXIT_OK


def _train_overrides(args):
    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        if not _ or not key:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.lr is not None:
        overrides["train.lr"] = repr(args.lr)
    if args.batch_size is not None:
        overrides["train.batch_size"] = str(args.batch_size)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return overrides


def cmd_train(args):
    dataset = dio.load_dataset(args.data)
    annotations, features, vocab = dataset
    overrides = _train_overrides(args)
    # dataset-derived dimensions always win over file defaults
    overrides["model.D_v"] = str(next(iter(features.values())).shape[1])
    overrides["model.vocab_size"] = str(len(vocab))
    model_cfg, train_cfg, eval_cfg = load_configs(args.config, overrides)

    from .config import format_configs

    for line in format_configs(model_cfg, train_cfg, eval_cfg).splitlines():
        print(f"config {line}")

    embedding_init = dio.load_word_vectors(
        args.glove, vocab, dim=model_cfg.word_dim, seed=train_cfg.seed
    )
    model = MomentRetrievalModel(model_cfg, seed=train_cfg.seed,
                                 embedding_init=embedding_init)
    os.makedirs(args.out, exist_ok=True)
    log_lines = []

    def log(line):
        print(line)
        log_lines.append(line)

    training.train(model, dataset, train_cfg, log_fn=log)
    with open(os.path.join(args.out, "train_log.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_lines) + "\n")
    ckpt = os.path.join(args.out, "checkpoint.mgpc")
    training.save_checkpoint(ckpt, model, train_cfg, eval_cfg,
                             epoch=train_cfg.epochs)
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    model, _, eval_cfg, _ = training.load_model(args.checkpoint)
    dataset = dio.load_dataset(args.data)
    table, seconds = evaluation.evaluate(
        model, dataset, eval_cfg, batch_size=args.batch_size, dump_path=args.out
    )
    print(evaluation.format_metric_table(table))
    n = len(dataset[0])
    print(f"# evaluated {n} samples in {seconds:.2f}s ({n / seconds:.1f}/s)")
    return EXIT_OK


def _forward_single(model, feats, query, vocab, want_maps=False):
    ids = dio.tokenize(query, vocab, model.config.L_max)
    ids, mask, batch = dio.make_batch([ids], [np.asarray(feats, dtype=np.float64)])
    return model.forward(batch, ids, mask, training=False, want_maps=want_maps)


def cmd_predict(args):
    model, _, _, _ = training.load_model(args.checkpoint)
    feats = dio.load_features(args.features).feats
    vocab = dio.load_vocab(args.vocab)
    scores = _forward_single(model, feats, args.query, vocab).data[0]
    grid = model.grid_for(args.duration)
    preds = evaluation.topk_predictions(scores, grid, args.k, args.nms)
    for rank, (score, span) in enumerate(preds, 1):
        print(f"{rank} {score:.6f} {span.start_s:.6f} {span.end_s:.6f}")
    return EXIT_OK


def cmd_inspect_map(args):
    from .grid import build_grid

    grid = build_grid(args.t, float(args.duration or args.t), args.scheme)
    for i in range(args.t):
        print("".join("#" if grid.valid[i, j] else "." for j in range(args.t)))
    print(f"N_A={grid.n_valid}")
    if args.map is None:
        return EXIT_OK
    if not (args.features and args.query and args.vocab and args.checkpoint):
        print("inspect-map: --map needs --features, --query, --vocab and "
              "--checkpoint", file=sys.stderr)
        return EXIT_USAGE
    model, _, _, _ = training.load_model(args.checkpoint)
    if model.config.T != args.t or model.config.scheme != args.scheme:
        print("inspect-map: checkpoint grid does not match --t/--scheme",
              file=sys.stderr)
        return EXIT_DATA
    feats = dio.load_features(args.features).feats
    vocab = dio.load_vocab(args.vocab)
    _, maps = _forward_single(model, feats, args.query, vocab, want_maps=True)
    chosen = maps[args.map].data[0]
    channel = chosen if chosen.ndim == 2 else chosen[:, :, args.channel]
    print(f"map {args.map} channel {args.channel}")
    for row in channel:
        print(" ".join(f"{v: .4f}" for v in row))
    return EXIT_OK


def cmd_grad_check(args):
    from .config import ModelConfig

    cfg = ModelConfig(
        T=args.t, C=args.c, L_max=args.l, D_v=8, vocab_size=8, word_dim=12,
        groups=args.groups,
    )
    model = MomentRetrievalModel(cfg, seed=args.seed)
    err = training.grad_check(model, epsilon=args.epsilon,
                              n_coords=args.coords, seed=args.seed)
    print(f"max relative error {err:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if err <= args.tolerance else EXIT_VERIFY


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth-data": cmd_synth_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "inspect-map": cmd_inspect_map,
        "grad-check": cmd_grad_check,
    }
    try:
        return handlers[args.command](args)
    except MomentGridError as exc:
        print(f"momentgrid {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"momentgrid {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
