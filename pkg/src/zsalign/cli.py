"""Command-line entry point: ``zsalign {synth,train,eval,gradcheck,score,ablate}``.

Exit codes: 0 success, 1 computation failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DataValidationError, SplitSpec, SyntheticWorldConfig, directory_checksums,
                   env_output_root, file_sha256, gen_synthetic_world, load_codebook,
                   load_embedding_set, make_tri_splits, save_world)
from .evaluation import (AMBIGUOUS_WORLD, PRESET_VARIANTS, AblationSetup, EvalReport,
                         ambiguous_worlds, evaluate_fold, run_ablation, tri_split_evaluate)
from .gradcheck import run_suite
from .losses import LOSS_KINDS, LossConfig
from .mla import (CheckpointError, KScheduleError, MlaModel, load_checkpoint, parse_k_schedule,
                  save_checkpoint, training_free_predict)
from .trainer import InsufficientNegativesError, TrainConfig, TrainingError, train, write_report

log = logging.getLogger("zsalign")

EXIT_OK, EXIT_COMPUTE, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


VALIDATION_ERRORS = (UsageError, DataValidationError, KScheduleError, CheckpointError,
                     InsufficientNegativesError, FileNotFoundError, json.JSONDecodeError)


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs) -> Path:
    """Record everything needed to rerun; written before any computation, never rewritten."""
    checksums = {}
    for root in inputs:
        root = Path(root)
        if root.is_dir():
            checksums.update({f"{root.name}/{k}": v for k, v in directory_checksums(root).items()})
        elif root.exists():
            checksums[root.name] = file_sha256(root)
    manifest = {
        "command": command,
        "engine_version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": _config_hash(config),
        "inputs": checksums,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _load_splits(args, data_dir: Path) -> SplitSpec:
    path = Path(args.splits) if args.splits else data_dir / "splits.json"
    if not path.exists():
        raise UsageError(f"split file not found: {path} (pass --splits)")
    with open(path) as fh:
        return SplitSpec.from_json(json.load(fh))


def _fold_index(splits: SplitSpec, fold: int) -> int:
    if not 0 <= fold < len(splits):
        raise UsageError(f"fold {fold} out of range (splits have {len(splits)} folds)")
    return fold


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SyntheticWorldConfig(
        n_classes=args.classes, n_unseen=args.unseen, D=args.D, C_e=args.ce, N_d=args.nd,
        samples_per_class=args.samples, visual_noise=args.visual_noise,
        description_spread=args.spread, ambiguity_pairs=args.ambiguity_pairs, seed=args.seed,
        latent_dim=args.latent_dim, ambiguity_offset=args.ambiguity_offset,
        distractor_fraction=args.distractors, distractor_kind=args.distractor_kind,
        modes_per_class=args.modes, mode_spread=args.mode_spread, with_motion=args.motion)
    try:
        cfg.validate()
    except DataValidationError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else env_output_root() / "world"
    write_run_manifest(out, "synth", vars(cfg), cfg.seed, [])
    data, codebook, oracle = gen_synthetic_world(cfg)
    save_world(out, data, codebook, dtype=args.dtype)
    splits = make_tri_splits(codebook.class_ids, cfg.n_unseen, cfg.seed)
    with open(out / "splits.json", "w") as fh:
        json.dump(splits.to_json(), fh, indent=2, sort_keys=True)
    with open(out / "oracle.json", "w") as fh:
        json.dump(oracle.to_json(), fh, indent=2, sort_keys=True)
    print(f"oracle nearest-mean accuracy: {oracle.accuracy:.4f}")
    print(f"world written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

MODEL_KEYS = ("k_schedule", "hidden", "aggregation")


def effective_train_config(args) -> dict:
    """Config file merged with command-line overrides (flags win)."""
    cfg = {"k_schedule": "1_15_5", "hidden": [1024, 512], "aggregation": "topk"}
    cfg.update(TrainConfig().to_json(), n_ep=None)  # None: follow warmup_epochs
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        loss = dict(cfg["loss"])
        loss.update(file_cfg.pop("loss", {}) or {})
        cfg.update(file_cfg)
        cfg["loss"] = loss
    flags = {"k_schedule": args.k_schedule, "epochs": args.epochs, "batch_size": args.batch_size,
             "lr_max": args.lr, "warmup_epochs": args.warmup, "a_inv": args.a_inv,
             "n_ep": args.n_ep, "seed": args.seed, "aggregation": args.aggregation}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.hidden:
        cfg["hidden"] = [int(x) for x in args.hidden.split(",")]
    if args.loss:
        cfg["loss"]["kind"] = args.loss
    if args.n_neg is not None:
        cfg["loss"]["n_neg"] = args.n_neg
    if args.temperature is not None:
        cfg["loss"]["temperature"] = args.temperature
    if args.checkpoint_every_epoch:
        cfg["checkpoint_every_epoch"] = True
    return cfg


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    cfg = effective_train_config(args)
    try:
        tcfg = TrainConfig.from_json({k: v for k, v in cfg.items() if k not in MODEL_KEYS})
        ks = parse_k_schedule(cfg["k_schedule"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if len(cfg["hidden"]) != 2:
        raise UsageError("hidden must list two widths, e.g. 1024,512")
    codebook = load_codebook(data_dir)
    data = load_embedding_set(data_dir, codebook)
    splits = _load_splits(args, data_dir)
    splits.validate_against(codebook.class_ids)
    fold = splits.fold(_fold_index(splits, args.fold))
    out = Path(args.out) if args.out else env_output_root() / f"train_fold{args.fold}"
    inputs = [data_dir] + ([Path(args.splits)] if args.splits else [])
    write_run_manifest(out, "train", dict(cfg, fold=args.fold), tcfg.seed, inputs)

    model = MlaModel.build(data.visual_dim, codebook.semantic_dim, ks, tuple(cfg["hidden"]),
                           seed=tcfg.seed, aggregation=cfg["aggregation"])
    print(f"training {len(ks)} branch(es) k={ks} on {len(fold.seen)} seen classes, fold {args.fold}")
    t0 = time.perf_counter()
    trained, report = train(model, data, codebook, fold, tcfg, checkpoint_dir=out / "checkpoint")
    write_report(report, out)
    with open(out / "timing.json", "w") as fh:
        json.dump({"wall_time_s": time.perf_counter() - t0}, fh)
    print(f"final epoch loss {report.epochs[-1].loss:.6f}; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _checkpoint_path(p: Path) -> Path:
    return p / "checkpoint" if (p / "checkpoint" / "manifest.json").exists() else p


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    codebook = load_codebook(data_dir)
    data = load_embedding_set(data_dir, codebook)
    splits = _load_splits(args, data_dir)
    splits.validate_against(codebook.class_ids)
    models = [load_checkpoint(_checkpoint_path(Path(m))) for m in args.model]
    for path, m in zip(args.model, models):
        if m.D != data.visual_dim or m.C_e != codebook.semantic_dim:
            raise UsageError(f"dimension mismatch: checkpoint {path} has D={m.D}, C_e={m.C_e}; "
                             f"data has D={data.visual_dim}, C_e={codebook.semantic_dim}")
    out = Path(args.out) if args.out else env_output_root() / "eval"
    inputs = [data_dir] + [_checkpoint_path(Path(m)) for m in args.model]
    write_run_manifest(out, "eval", {"tri_split": args.tri_split, "fold": args.fold,
                                     "models": [str(m) for m in args.model]}, 0, inputs)
    if args.tri_split:
        if len(models) != len(splits):
            raise UsageError(f"--tri-split needs one --model per fold ({len(splits)}), got {len(models)}")
        report = tri_split_evaluate(models, data, splits, codebook)
    else:
        if len(models) != 1:
            raise UsageError("pass exactly one --model without --tri-split")
        fold = splits.fold(_fold_index(splits, args.fold))
        report = EvalReport([evaluate_fold(models[0], data, fold, codebook)])
    report.write(out)
    for i, acc in enumerate(report.fold_accuracies):
        print(f"fold {i if args.tri_split else args.fold}: accuracy {acc:.4f}")
    print(f"mean accuracy: {report.mean_accuracy:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / score / ablate
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    errors = run_suite(args.seeds, h=args.h, first_seed=args.first_seed, loss=args.loss,
                       n_branches=args.branches)
    worst = max(errors)
    ok = worst < args.tol
    print(f"checked {len(errors)} instances in {time.perf_counter() - t0:.1f}s; "
          f"max relative error {worst:.3e} (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_COMPUTE


def _read_queries(path: Path, dim: int) -> np.ndarray:
    if path.suffix == ".csv":
        q = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    else:
        raw = np.fromfile(path, dtype="<f4").astype(np.float64)
        if raw.size % dim:
            raise UsageError(f"{path}: {raw.size} values is not a multiple of dim {dim}")
        q = raw.reshape(-1, dim)
    if q.shape[1] != dim:
        raise UsageError(f"{path}: query dim {q.shape[1]} != prompt feature dim {dim}")
    return q


def cmd_score(args) -> int:
    codebook = load_codebook(Path(args.prompts))
    queries = _read_queries(Path(args.queries), codebook.semantic_dim)
    k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    if not k_list or any(k < 1 for k in k_list):
        raise UsageError("--k-list needs positive integers")
    pred, scores = training_free_predict(codebook, queries, k_list)
    ids = sorted(codebook.class_ids)
    lines = ["query,predicted," + ",".join(f"score_{c}" for c in ids)]
    for i, (p, row) in enumerate(zip(pred, scores)):
        lines.append(f"{i},{int(p)}," + ",".join(repr(float(s)) for s in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"scored {len(pred)} queries against {len(ids)} classes -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in PRESET_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; known: {sorted(PRESET_VARIANTS)}")
    worlds = ambiguous_worlds(range(args.first_seed, args.first_seed + args.seeds),
                              n_classes=args.classes, n_unseen=args.unseen, N_d=args.nd,
                              ambiguity_pairs=args.ambiguity_pairs, visual_noise=args.visual_noise,
                              distractor_fraction=args.distractors, modes_per_class=args.modes)
    setup = AblationSetup(k_schedule=args.k_schedule, train=TrainConfig(
        epochs=args.epochs, lr_max=args.lr, warmup_epochs=args.warmup))
    table = run_ablation(worlds, variants, setup)
    csv_text = table.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic world")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--unseen", type=int, default=2)
    s.add_argument("--nd", type=int, default=20, help="descriptions per class")
    s.add_argument("--D", type=int, default=16, help="visual dim")
    s.add_argument("--ce", type=int, default=32, help="semantic dim")
    s.add_argument("--samples", type=int, default=40, help="samples per class")
    s.add_argument("--visual-noise", type=float, default=0.03)
    s.add_argument("--spread", type=float, default=0.1)
    s.add_argument("--ambiguity-pairs", type=int, default=0)
    s.add_argument("--ambiguity-offset", type=float, default=0.15)
    s.add_argument("--distractors", type=float, default=0.0)
    s.add_argument("--distractor-kind", choices=("independent", "shared"), default="independent")
    s.add_argument("--modes", type=int, default=1, help="mixture modes per class")
    s.add_argument("--mode-spread", type=float, default=0.6)
    s.add_argument("--latent-dim", type=int, default=4)
    s.add_argument("--motion", action="store_true")
    s.add_argument("--dtype", choices=("f32le", "csv"), default="f32le")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on one fold's seen classes")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--splits")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out")
    t.add_argument("--k-schedule")
    t.add_argument("--hidden", help="two widths, e.g. 1024,512")
    t.add_argument("--aggregation", choices=("topk", "avg"))
    t.add_argument("--loss", choices=LOSS_KINDS)
    t.add_argument("--n-neg", type=int)
    t.add_argument("--temperature", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--n-ep", type=int)
    t.add_argument("--a-inv", dest="a_inv", action="store_true", default=None)
    t.add_argument("--no-a-inv", dest="a_inv", action="store_false")
    t.add_argument("--checkpoint-every-epoch", action="store_true")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation on unseen classes")
    e.add_argument("--model", action="append", required=True,
                   help="train output or checkpoint dir; repeat once per fold with --tri-split")
    e.add_argument("--data", required=True)
    e.add_argument("--splits")
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--tri-split", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--seeds", type=int, default=100)
    g.add_argument("--first-seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--loss", choices=("xsample", "jsd", "softmax_ce"), default="xsample")
    g.add_argument("--branches", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)

    sc = sub.add_parser("score", help="training-free prompt-ensemble scoring")
    sc.add_argument("--prompts", required=True, help="codebook manifest (dir or file)")
    sc.add_argument("--queries", required=True, help=".csv rows or raw f32le blob")
    sc.add_argument("--k-list", default="4,16,32,42,46")
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_score)

    a = sub.add_parser("ablate", help="compare variants over seeded ambiguous synthetic worlds")
    a.add_argument("--variants", default="xsample,ysample,single_avg,ainv_off")
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--first-seed", type=int, default=0)
    a.add_argument("--classes", type=int, default=AMBIGUOUS_WORLD["n_classes"])
    a.add_argument("--unseen", type=int, default=AMBIGUOUS_WORLD["n_unseen"])
    a.add_argument("--nd", type=int, default=AMBIGUOUS_WORLD["N_d"])
    a.add_argument("--ambiguity-pairs", type=int, default=AMBIGUOUS_WORLD["ambiguity_pairs"])
    a.add_argument("--visual-noise", type=float, default=AMBIGUOUS_WORLD["visual_noise"])
    a.add_argument("--distractors", type=float, default=0.0)
    a.add_argument("--modes", type=int, default=1)
    a.add_argument("--k-schedule", default="1,5,10")
    a.add_argument("--epochs", type=int, default=100)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--warmup", type=int, default=15)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
