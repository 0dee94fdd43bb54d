"""Command-line entry points: train, eval, gen-synth, audit-sampler,
gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ContractError, DimensionError, DomainError, NumericError
from .proposals import load_manifest, save_manifest
from .synthetic import generate_synthetic_dataset

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def cmd_train(args) -> int:
    from .engine import train

    config = _load_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    manifest = load_manifest(args.manifest)
    result = train(config, manifest, checkpoint_path=args.out, log_stream=sys.stdout)
    print(f"finished {len(result.log)} steps; "
          f"loss {result.first_total():.4f} -> {result.last_total():.4f}")
    if args.out:
        print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .engine import evaluate, load_model

    manifest = load_manifest(args.manifest)
    model, config = load_model(args.checkpoint, manifest)
    report = evaluate(
        model, manifest, args.mode,
        ks=tuple(config.eval.ks), iou_thresh=config.eval.iou_thresh,
        decode_mode=config.eval.decode_mode)
    print(report.table())
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.synthetic.seed = args.seed
    manifest = generate_synthetic_dataset(config.synthetic)
    save_manifest(manifest, args.out)
    n_triplets = sum(len(img.gt_triplets) for img in manifest.images)
    print(f"wrote {len(manifest.images)} images, {n_triplets} triplets to {args.out}")
    return EXIT_OK


def cmd_audit_sampler(args) -> int:
    from .engine import audit_sampler

    config = _load_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    manifest = load_manifest(args.manifest)
    report = audit_sampler(config, manifest, n_epochs=args.epochs)
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"audit written to {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .engine import gradcheck

    config = _load_config(args.config)
    if args.seed is not None:
        config.gradcheck.seed = args.seed
    result = gradcheck(config.gradcheck, loss_weights=config.loss,
                       inject_gradient_bug=args.inject_gradient_bug)
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def cmd_inspect(args) -> int:
    arrays, snapshot, step = load_checkpoint(args.checkpoint)
    print(f"step {step}, {len(arrays)} arrays")
    for name, arr in arrays.items():
        print(f"  {name}: {list(arr.shape)}")
    if args.show_config:
        print(json.dumps(snapshot, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bgnn",
        description="Confidence-aware bipartite graph network for scene graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True, choices=["predcls", "sgcls", "sggen"])
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-synth", help="generate a synthetic manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("audit-sampler", help="Monte-Carlo sampler statistics")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_audit_sampler)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--inject-gradient-bug", action="store_true",
                   help="negative control: corrupt one gradient on purpose")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="list the contents of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--show-config", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ContractError, DomainError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
