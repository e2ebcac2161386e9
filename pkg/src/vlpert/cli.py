"""Command-line entry point.

Subcommands: gen-data, perturb, train, eval-structure, eval-retrieval,
probe, gradcheck. Every option has a config-file equivalent (JSON with
flat dotted keys); flags override file values, and each run writes a
manifest next to its outputs with the fully resolved configuration.
Passing a manifest back through --config reproduces the run.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import EncoderConfig, load_checkpoint
from .evaluation import image_embeddings, linear_probe, retrieval_eval, structure_eval
from .gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, run_gradcheck
from .losses import LossWeights
from .perturb import generate_set
from .rng import derive_seed
from .synthetic import FINDINGS, generate_corpus, load_corpus, save_corpus
from .text import pos_tag, tokenize
from .training import TrainConfig, load_state, train

DATA_DIR_ENV = "ARTIFACT_DATA_DIR"


class UsageError(Exception):
    """Bad arguments or unusable inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route through UsageError
        raise UsageError(f"{self.prog}: {message}")


# -- config resolution -------------------------------------------------------

_TRAIN_DEFAULTS = {
    "train.epochs": 150,
    "train.batch_size": 64,
    "train.lr": 0.0015,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.checkpoint_every": 0,
    "train.detach_pert_negatives": False,
    "loss.alpha": 0.1,
    "loss.beta": 0.1,
    "loss.tau": 0.07,
    "loss.tau_local": 1.0,
    "encoder.embed_dim": 32,
    "encoder.num_regions": 16,
    "encoder.subword_dim": 32,
    "encoder.image_side": 32,
    "encoder.image_channels": 1,
    "encoder.conv_channels": [8, 16, 32],
    "encoder.local_layer": 3,
    "encoder.position_scale": 1.0,
    "seeds.data": 1,
    "seeds.init": 2,
    "seeds.pert": 3,
    "data.corpus": "",
    "train.resume": "",
}


def _load_config_file(path: str) -> dict:
    file_path = Path(path)
    if not file_path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    if "subcommand" in doc and isinstance(doc.get("config"), dict):
        return doc["config"]  # a manifest: reuse its resolved configuration
    return doc


def _resolve(defaults: dict, config_path: str | None, overrides: dict) -> dict:
    resolved = dict(defaults)
    if config_path:
        for key, value in _load_config_file(config_path).items():
            if key not in resolved:
                raise UsageError(f"unknown config key {key!r}")
            resolved[key] = value
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _train_config(resolved: dict) -> TrainConfig:
    weights = LossWeights(
        alpha=float(resolved["loss.alpha"]),
        beta=float(resolved["loss.beta"]),
        tau=float(resolved["loss.tau"]),
        tau_local=float(resolved["loss.tau_local"]),
    )
    encoder = EncoderConfig(
        embed_dim=int(resolved["encoder.embed_dim"]),
        num_regions=int(resolved["encoder.num_regions"]),
        subword_dim=int(resolved["encoder.subword_dim"]),
        image_side=int(resolved["encoder.image_side"]),
        image_channels=int(resolved["encoder.image_channels"]),
        conv_channels=tuple(int(c) for c in resolved["encoder.conv_channels"]),
        local_layer=int(resolved["encoder.local_layer"]),
        position_scale=float(resolved["encoder.position_scale"]),
    )
    return TrainConfig(
        epochs=int(resolved["train.epochs"]),
        batch_size=int(resolved["train.batch_size"]),
        lr=float(resolved["train.lr"]),
        momentum=float(resolved["train.momentum"]),
        weight_decay=float(resolved["train.weight_decay"]),
        weights=weights,
        data_seed=int(resolved["seeds.data"]),
        init_seed=int(resolved["seeds.init"]),
        pert_seed=int(resolved["seeds.pert"]),
        checkpoint_every=int(resolved["train.checkpoint_every"]),
        detach_pert_negatives=bool(resolved["train.detach_pert_negatives"]),
        encoder=encoder,
    )


def _write_manifest(out_dir: Path, subcommand: str, resolved: dict, paths: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": resolved,
        "seeds": {k: v for k, v in resolved.items() if k.startswith("seeds.") or k == "seed"},
        "paths": paths,
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _corpus_dir(resolved_or_flag: str | None) -> Path:
    path = resolved_or_flag or os.environ.get(DATA_DIR_ENV, "")
    if not path:
        raise UsageError(f"no corpus directory given (use --data or ${DATA_DIR_ENV})")
    directory = Path(path)
    if not (directory / "corpus.jsonl").is_file():
        raise UsageError(f"no corpus.jsonl under {directory}")
    return directory


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow(row)


# -- subcommands --------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    resolved = _resolve(
        {"data.n": 512, "data.side": 32, "seed": 0},
        args.config,
        {"data.n": args.n, "data.side": args.side, "seed": args.seed},
    )
    out_dir = Path(args.out)
    pairs = generate_corpus(int(resolved["data.n"]), int(resolved["data.side"]), int(resolved["seed"]))
    save_corpus(pairs, out_dir)
    _write_manifest(out_dir, "gen-data", resolved, {"out": str(out_dir)})
    print(f"wrote {len(pairs)} pairs to {out_dir}")
    return 0


def _cmd_perturb(args) -> int:
    resolved = _resolve({"seed": 0, "in": ""}, args.config, {"seed": args.seed, "in": args.infile})
    infile = Path(str(resolved["in"]))
    if not str(resolved["in"]) or not infile.is_file():
        raise UsageError(f"input file not found: {resolved['in']!r}")
    seed = int(resolved["seed"])

    lines_out = []
    with open(infile, encoding="utf-8") as fh:
        index = 0
        for line in fh:
            if not line.strip():
                continue
            report = pos_tag(tokenize(line))
            pset = generate_set(report, derive_seed(seed, index))
            lines_out.append(
                json.dumps(
                    {
                        "original": report.text(),
                        "variants": [
                            {"rule": v.rule, "text": v.text(), "degenerate": v.degenerate}
                            for v in pset.variants
                        ],
                    }
                )
            )
            index += 1

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "perturbations.jsonl").write_text("\n".join(lines_out) + "\n", encoding="utf-8")
        _write_manifest(out_dir, "perturb", resolved, {"in": str(infile), "out": str(out_dir)})
    else:
        for line in lines_out:
            print(line)
    return 0


def _cmd_train(args) -> int:
    overrides = {
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "loss.alpha": args.alpha,
        "loss.beta": args.beta,
        "loss.tau": args.tau,
        "data.corpus": args.data,
        "train.resume": args.resume,
    }
    if args.seed is not None:
        overrides.update({"seeds.data": args.seed, "seeds.init": args.seed, "seeds.pert": args.seed})
    resolved = _resolve(_TRAIN_DEFAULTS, args.config, overrides)
    cfg = _train_config(resolved)
    corpus = load_corpus(_corpus_dir(str(resolved["data.corpus"]) or None))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume_from = None
    resume_model = None
    if resolved["train.resume"]:
        resume_model, resume_from = load_state(str(resolved["train.resume"]))

    _write_manifest(out_dir, "train", resolved, {"out": str(out_dir), "data": str(resolved["data.corpus"])})
    result = train(
        cfg,
        corpus,
        metrics_path=out_dir / "metrics.jsonl",
        checkpoint_dir=out_dir / "checkpoints",
        resume_from=resume_from,
        resume_model=resume_model,
    )
    final = result.metrics[-1]
    print(
        f"trained {cfg.epochs} epochs; final losses: total={final['total']:.4f} "
        f"global={final['global']:.4f} local={final['local']:.4f} pert={final['pert']:.4f}"
    )
    return 0


def _load_model(checkpoint: str | None):
    if not checkpoint:
        raise UsageError("a --checkpoint file is required")
    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    model, _ = load_checkpoint(path)
    return model


def _cmd_eval_structure(args) -> int:
    resolved = _resolve(
        {"seed": 0, "data.corpus": "", "checkpoint": ""},
        args.config,
        {"seed": args.seed, "data.corpus": args.data, "checkpoint": args.checkpoint},
    )
    model = _load_model(str(resolved["checkpoint"]) or None)
    pairs = load_corpus(_corpus_dir(str(resolved["data.corpus"]) or None))
    result = structure_eval(pairs, model, int(resolved["seed"]))

    print(f"structure accuracy: {result.accuracy:.4f} ({result.n_correct}/{result.n_samples})")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(
            json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        rows = [
            ("metric", "value"),
            ("accuracy", result.accuracy),
            ("n_samples", result.n_samples),
            ("n_correct", result.n_correct),
            ("n_skipped", result.n_skipped),
        ] + [(f"confusion_{rule}", count) for rule, count in result.rule_confusions.items()]
        _write_csv(out_dir / "results.csv", rows)
        _write_manifest(out_dir, "eval-structure", resolved, {"out": str(out_dir)})
    return 0


def _cmd_eval_retrieval(args) -> int:
    resolved = _resolve(
        {"data.corpus": "", "checkpoint": "", "k": "1,5,10"},
        args.config,
        {"data.corpus": args.data, "checkpoint": args.checkpoint, "k": args.k},
    )
    model = _load_model(str(resolved["checkpoint"]) or None)
    pairs = load_corpus(_corpus_dir(str(resolved["data.corpus"]) or None))
    try:
        k_values = tuple(int(k) for k in str(resolved["k"]).split(","))
    except ValueError as exc:
        raise UsageError(f"bad --k list: {resolved['k']!r}") from exc
    result = retrieval_eval(pairs, model, k_values)

    for direction, recalls in result.items():
        summary = " ".join(f"R@{k}={v:.4f}" for k, v in recalls.items())
        print(f"{direction}: {summary}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
        rows = [("direction", "k", "recall")] + [
            (direction, k, v) for direction, recalls in result.items() for k, v in recalls.items()
        ]
        _write_csv(out_dir / "results.csv", rows)
        _write_manifest(out_dir, "eval-retrieval", resolved, {"out": str(out_dir)})
    return 0


def _cmd_probe(args) -> int:
    resolved = _resolve(
        {"seed": 0, "data.corpus": "", "checkpoint": ""},
        args.config,
        {"seed": args.seed, "data.corpus": args.data, "checkpoint": args.checkpoint},
    )
    model = _load_model(str(resolved["checkpoint"]) or None)
    pairs = load_corpus(_corpus_dir(str(resolved["data.corpus"]) or None))
    embeds = image_embeddings(pairs, model)
    labels = np.array([pair.labels for pair in pairs], dtype=np.float64)
    result = linear_probe(
        embeds,
        labels,
        split_seed=int(resolved["seed"]),
        finding_names=[f.name for f in FINDINGS],
    )
    for name, acc in result.finding_accuracy.items():
        print(f"{name}: accuracy {acc:.4f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(
            json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        rows = [("finding", "accuracy")] + list(result.finding_accuracy.items())
        _write_csv(out_dir / "results.csv", rows)
        _write_manifest(out_dir, "probe", resolved, {"out": str(out_dir)})
    return 0


def _cmd_gradcheck(args) -> int:
    resolved = _resolve(
        {"seeds": 50, "seed": 0, "h": DEFAULT_STEP, "tol": DEFAULT_TOLERANCE},
        args.config,
        {"seeds": args.seeds, "seed": args.seed, "h": args.h, "tol": args.tol},
    )
    report = run_gradcheck(
        instances=int(resolved["seeds"]),
        seed=int(resolved["seed"]),
        h=float(resolved["h"]),
        tolerance=float(resolved["tol"]),
    )
    for name, err in report.worst_errors.items():
        status = "ok" if err < report.tolerance else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        _write_manifest(out_dir, "gradcheck", resolved, {"out": str(out_dir)})
    if not report.passed:
        raise RuntimeError("gradient check exceeded tolerance")
    return 0


# -- parser -------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="vlpert", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="subcommand")

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON config file with flat dotted keys (a manifest also works)")
        p.add_argument("--out", required=out_required, help="output directory (manifest is written here)")
        p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")

    p = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    common(p, out_required=True)
    p.add_argument("--n", type=int, default=None, help="number of pairs (default 512)")
    p.add_argument("--side", type=int, default=None, help="image side in pixels (default 32)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("perturb", help="emit the nine perturbations of each report")
    common(p)
    p.add_argument("--in", dest="infile", default=None, help="newline-delimited report file")
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("train", help="run contrastive pre-training")
    common(p, out_required=True)
    p.add_argument("--data", default=None, help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 150)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 64)")
    p.add_argument("--lr", type=float, default=None, help="SGD learning rate (default 0.0015; momentum 0.9, weight decay 5e-4)")
    p.add_argument("--alpha", type=float, default=None, help="local loss weight (default 0.1)")
    p.add_argument("--beta", type=float, default=None, help="perturbation loss weight (default 0.1)")
    p.add_argument("--tau", type=float, default=None, help="contrastive temperature (default 0.07)")
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-structure", help="rank originals against their perturbations")
    common(p)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint file")
    p.add_argument("--data", default=None, help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.set_defaults(func=_cmd_eval_structure)

    p = sub.add_parser("eval-retrieval", help="recall@k over image-text cosine ranking")
    common(p)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint file")
    p.add_argument("--data", default=None, help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.add_argument("--k", default=None, help="comma-separated recall cutoffs (default 1,5,10)")
    p.set_defaults(func=_cmd_eval_retrieval)

    p = sub.add_parser("probe", help="linear probe on frozen image embeddings")
    common(p)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint file")
    p.add_argument("--data", default=None, help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    common(p)
    p.add_argument("--seeds", type=int, default=None, help="random instances per loss (default 50)")
    p.add_argument("--h", type=float, default=None, help=f"finite-difference step (default {DEFAULT_STEP})")
    p.add_argument("--tol", type=float, default=None, help=f"tolerance on max relative error (default {DEFAULT_TOLERANCE})")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def dispatch(argv) -> int:
    """Run one subcommand; 0 on success, 1 on usage error, 2 on runtime error."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "subcommand", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
