"""Command-line surface: corpus synthesis, training, sampling, evaluation,
mask fusion, and the ablation harness.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import staple
from .network import ModelConfig, TOY_PRESETS
from .sampler import SamplerConfig, sample_ensemble, write_ensemble
from .schedule import build_schedule
from .synthdata import CorpusSpec, SHAPE_FAMILIES, generate_corpus, load_corpus
from .trainer import (NumericalError, TrainConfig, evaluate_checkpointable,
                      load_checkpoint, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ROOT_ENV = "DIFFSEG_DATA_ROOT"

DEFAULT_VARIANTS = [("vanilla", False, False), ("dycond", True, False), ("full", True, True)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path) -> dict:
    """Flat JSON key-value config; CLI flags override file values."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a flat JSON object")
    return cfg


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out: Path, args: argparse.Namespace, resolved: dict) -> None:
    record = {"argv": sys.argv[1:], "resolved": resolved}
    (out / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


def _data_root(args) -> str:
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"--data not given and {DATA_ROOT_ENV} unset")
    return root


def _model_config(args, use_dycond=None, use_ffparser=None) -> ModelConfig:
    preset = dict(TOY_PRESETS.get(args.preset, {}))
    if args.base_channels:
        preset["base_channels"] = args.base_channels
    return ModelConfig(image_size=args.size,
                       use_dycond=args.dycond if use_dycond is None else use_dycond,
                       use_ffparser=args.ffparser if use_ffparser is None else use_ffparser,
                       T=args.T, **preset)


def _train_config(args, model_cfg, seed=None, data_seed=None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, max_steps=args.max_steps,
                       batch_size=args.batch_size, learning_rate=args.lr,
                       seed=args.seed if seed is None else seed,
                       data_seed=data_seed, model=model_cfg,
                       schedule_kind=args.schedule, T=args.T,
                       lr_schedule=args.lr_schedule,
                       checkpoint_every=args.checkpoint_every,
                       eval_every=args.eval_every)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = _prepare_out(args.out, args.force)
    spec = CorpusSpec(counts={"train": args.count, "val": args.val_count, "test": args.test_count},
                      image_size=args.size, contrast=args.contrast, noise_std=args.noise_std,
                      blur_radius=args.blur, shape_family=args.shapes, seed=args.seed)
    generate_corpus(spec, out)
    _write_run_record(out, args, asdict(spec))
    print(f"wrote corpus to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _prepare_out(args.out, args.force)
    cfg = _train_config(args, _model_config(args))
    _write_run_record(out, args, _jsonable(cfg))
    result = train(cfg, _data_root(args), out, quiet=args.quiet)
    print(f"trained {len(result.losses)} steps; final loss "
          f"{np.mean(result.losses[-20:]):.4f}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    out = _prepare_out(args.out, args.force)
    model, manifest = load_checkpoint(args.checkpoint)
    schedule = build_schedule(model.cfg.T, manifest.get("schedule_kind") or "linear")
    cfg = SamplerConfig(steps=args.steps, ensemble_size=args.ensemble, seed=args.seed,
                        fusion_method=args.fusion)
    samples = list(load_corpus(_data_root(args), args.split, image_size=model.cfg.image_size))
    wanted = [s for s in samples if args.id in (None, s.id)]
    if not wanted:
        raise FileNotFoundError(f"no sample {args.id!r} in split {args.split}")
    _write_run_record(out, args, asdict(cfg))
    for s in wanted[:args.limit]:
        result = sample_ensemble(s.image, model, schedule, cfg)
        write_ensemble(result, out / s.id)
        print(f"{s.id}: wrote {len(result.samples)} samples + fused mask")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _prepare_out(args.out, args.force)
    model, manifest = load_checkpoint(args.checkpoint)
    schedule = build_schedule(model.cfg.T, manifest.get("schedule_kind") or "linear")
    samples = list(load_corpus(_data_root(args), args.split, image_size=model.cfg.image_size))
    if args.limit:
        samples = samples[:args.limit]
    report = evaluate_checkpointable(model, schedule, samples, chains=args.chains,
                                     steps=args.steps, seed=args.seed,
                                     fusion=args.fusion, oracle_gt=args.oracle_gt)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    _write_run_record(out, args, {"checkpoint": str(args.checkpoint), "split": args.split,
                                  "chains": args.chains, "steps": args.steps,
                                  "seed": args.seed, "oracle_gt": args.oracle_gt})
    print(f"mean dice {report.mean_dice:.4f}  mean iou {report.mean_iou:.4f} "
          f"over {report.count} samples")
    return EXIT_OK


def cmd_fuse(args) -> int:
    from PIL import Image
    out = _prepare_out(args.out, args.force)
    paths = sorted(Path(args.masks).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG masks under {args.masks}")
    masks = [np.asarray(Image.open(p).convert("L")) > 127 for p in paths]
    est = staple.staple_fuse(staple.stack_from_masks(masks))
    fused = est.fused.reshape(masks[0].shape)
    Image.fromarray((fused * 255).astype(np.uint8)).save(out / "fused.png")
    (out / "report.json").write_text(json.dumps({
        "raters": [p.name for p in paths],
        "sensitivities": est.sensitivities.tolist(),
        "specificities": est.specificities.tolist(),
        "iterations": est.iterations,
        "converged": est.converged,
        "backend": staple.backend(),
    }, indent=2))
    _write_run_record(out, args, {"masks": str(args.masks), "count": len(paths)})
    print(f"fused {len(paths)} masks in {est.iterations} iterations "
          f"(converged={est.converged})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _prepare_out(args.out, args.force)
    variants = DEFAULT_VARIANTS if args.variants is None else [
        (v, "dycond" in v or v == "full", v == "full") for v in args.variants]
    seeds = args.seeds
    data_root = _data_root(args)
    _write_run_record(out, args, {"variants": variants, "seeds": seeds})
    rows = []
    rows_path = out / "ablation.csv"
    try:
        for name, dycond, ffparser in variants:
            for seed in seeds:
                run_dir = out / f"{name}_seed{seed}"
                cfg = _train_config(args, _model_config(args, dycond, ffparser),
                                    seed=seed, data_seed=args.data_seed)
                result = train(cfg, data_root, run_dir, quiet=args.quiet)
                schedule = build_schedule(cfg.T, cfg.schedule_kind)
                samples = list(load_corpus(data_root, "test",
                                           image_size=cfg.model.image_size))
                if args.eval_limit:
                    samples = samples[:args.eval_limit]
                report = evaluate_checkpointable(result.model, schedule, samples,
                                                 chains=args.chains, steps=args.steps,
                                                 seed=seed)
                rows.append({"variant": name, "seed": seed, "dice": report.mean_dice,
                             "iou": report.mean_iou})
                print(f"{name} seed={seed}: dice {report.mean_dice:.4f}", flush=True)
                _write_ablation_rows(rows_path, rows)
    except Exception:
        _write_ablation_rows(rows_path, rows)  # preserve partial results
        raise
    _write_ablation_rows(rows_path, rows)
    table = _ablation_table(variants, rows)
    (out / "ablation.txt").write_text(table)
    print(table)
    return EXIT_OK


def _write_ablation_rows(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["variant", "seed", "dice", "iou"])
        w.writeheader()
        w.writerows(rows)


def _ablation_table(variants, rows) -> str:
    lines = [f"{'Dy-Cond':8} {'FF-Parser':10} {'Dice (mean ± std)':20}"]
    for name, dycond, ffparser in variants:
        d = [r["dice"] for r in rows if r["variant"] == name]
        if not d:
            continue
        mark = lambda b: "x" if b else " "
        lines.append(f"{mark(dycond):8} {mark(ffparser):10} "
                     f"{100 * np.mean(d):.1f} ± {100 * np.std(d):.1f}   ({name})")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------

def _jsonable(cfg) -> dict:
    def fix(o):
        if isinstance(o, frozenset):
            return sorted(o)
        if isinstance(o, dict):
            return {k: fix(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [fix(v) for v in o]
        return o
    return fix(asdict(cfg))


def _add_common(p, out_required=True):
    p.add_argument("--config", help="flat JSON config file; flags override")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    p.add_argument("--jobs", type=int, default=1, help="reserved for parallel runs")


def _add_model_flags(p):
    p.add_argument("--data", help=f"corpus root (default ${DATA_ROOT_ENV})")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--preset", default="S-toy", choices=sorted(TOY_PRESETS))
    p.add_argument("--base-channels", dest="base_channels", type=int, default=0)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--schedule", default="linear", choices=["linear", "cosine"])
    p.add_argument("--dycond", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--ffparser", action=argparse.BooleanOptionalAction, default=True)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-schedule", dest="lr_schedule", default="constant",
                   choices=["constant", "cosine"])
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=0)
    p.add_argument("--quiet", action=argparse.BooleanOptionalAction, default=False)


def build_parser() -> _Parser:
    parser = _Parser(prog="diffseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--val-count", dest="val_count", type=int, default=20)
    p.add_argument("--test-count", dest="test_count", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--contrast", type=float, default=0.15)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=0.1)
    p.add_argument("--blur", type=float, default=2.0)
    p.add_argument("--shapes", default="blob", choices=SHAPE_FAMILIES)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample ensemble masks from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--id", default=None, help="sample id; default: all (up to --limit)")
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--ensemble", type=int, default=25)
    p.add_argument("--fusion", default="staple", choices=["staple", "mean-vote"])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--chains", type=int, default=5)
    p.add_argument("--fusion", default="staple", choices=["staple", "mean-vote"])
    p.add_argument("--oracle-gt", dest="oracle_gt", action="store_true",
                   help="pipeline self-check: use ground truth as the prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="STAPLE-fuse a directory of binary mask PNGs")
    _add_common(p)
    p.add_argument("--masks", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("ablate", help="train and compare conditioning variants")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data-seed", dest="data_seed", type=int, default=1234)
    p.add_argument("--variants", nargs="+", default=None,
                   help="subset of: vanilla dycond full")
    p.add_argument("--steps", type=int, default=100, help="inference steps for eval")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--eval-limit", dest="eval_limit", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    return parser


def _apply_config_file(args, argv):
    if not args.config:
        return args
    file_cfg = _load_config_file(args.config)
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                for a in argv if a.startswith("--")}
    for key, value in file_cfg.items():
        if not hasattr(args, key):
            raise UsageError(f"config key {key!r} is not a flag of {args.command!r}")
        if key not in explicit:
            setattr(args, key, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IOError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}\nsnapshot: {json.dumps(e.snapshot)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
