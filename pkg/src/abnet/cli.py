"""``abnet`` command line: synth-data, extract-patches, train, eval, gradcheck.

Exit codes: 0 success, 1 invalid configuration or failed check, 2 input I/O,
3 corrupt artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import engine, gradsuite
from .checkpoint import CheckpointError
from .config import ABLATION_PRESETS, ConfigError, TrainConfig, load_config, write_config
from .data import DatasetError, load_image_dataset, write_image_dataset
from .nn import inject_fault
from .saliency import PatchCacheError, read_patch_cache, write_patch_cache

log = logging.getLogger("abnet")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CORRUPT = 0, 1, 2, 3
PATCH_FILE = "patches.tsv"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> TrainConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config and not Path(args.config).is_file():
        raise CliError(f"config file {args.config} not found", EXIT_IO)
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: TrainConfig, root: Optional[str] = None):
    if root is not None:
        return load_image_dataset(root, image_size=cfg.image_size)
    return engine.load_dataset(cfg)


def _patches(cfg: TrainConfig):
    if not cfg.salient_patches:
        return None
    if not cfg.patch_cache:
        raise CliError(
            "salient patches are enabled but no patch cache is configured; "
            "run 'abnet extract-patches' and pass --override patch_cache=<out>/patches.tsv",
            EXIT_INVALID,
        )
    path = Path(cfg.patch_cache)
    if not path.is_file():
        raise CliError(
            f"patch cache {path} does not exist; run 'abnet extract-patches' first", EXIT_INVALID
        )
    return read_patch_cache(path)


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    dataset = engine.load_dataset(cfg.replace(dataset="synthetic"))
    manifest = write_image_dataset(dataset, out)
    print(f"wrote {len(dataset)} images and {manifest}")
    return EXIT_OK


def cmd_extract_patches(args) -> int:
    cfg = _config(args)
    dataset = _dataset(cfg, args.dataset_root)
    out = _out_dir(args)
    ids = dataset.all_ids()
    patches = engine.extract_dataset_patches(dataset, engine.patch_config(cfg), ids)
    path = out / PATCH_FILE
    write_patch_cache(path, ((i, patches[i]) for i in ids))
    print(f"wrote {len(ids)} patch records to {path}")
    return EXIT_OK


def _train_one(cfg: TrainConfig, out: Path, resume: bool) -> None:
    dataset = engine.load_dataset(cfg)
    patches = _patches(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    model = optimizer = None
    start = 0
    ckpt = out / "checkpoint.txt"
    if resume and ckpt.exists():
        model, optimizer, meta = engine.load_model(ckpt, cfg, with_optimizer=True)
        if meta.get("config_hash") != cfg.config_hash:
            raise CliError(f"{ckpt} was written with a different configuration", EXIT_INVALID)
        start = int(meta.get("episode", 0))
        log.info("resuming %s from episode %d", out, start)
    engine.train(dataset, cfg, patches, out, model=model, optimizer=optimizer, start_episode=start)
    print(f"trained {cfg.episodes} episodes; checkpoint {ckpt}")


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if not args.ablation_suite:
        _train_one(cfg, out, args.resume)
        return EXIT_OK
    for name, switches in ABLATION_PRESETS.items():
        log.info("ablation configuration %s", name)
        _train_one(cfg.replace(**switches), out / name, args.resume)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found", EXIT_IO)
    model, _meta = engine.load_model(ckpt, cfg)
    dataset = engine.load_dataset(cfg)
    rasters = engine.RasterCache(dataset, cfg, _patches(cfg))
    report = engine.evaluate(dataset, cfg, engine.model_scorer(model, rasters), episodes=args.episodes)
    out = _out_dir(args)
    engine.write_eval_report(out, report)
    print(f"accuracy {report.mean:.4f} +- {report.ci95:.4f} over {report.episodes} episodes")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    failed = []
    with contextlib.ExitStack() as stack:
        if args.inject_fault:
            stack.enter_context(inject_fault(args.inject_fault, args.fault_scale))
        for name, err in gradsuite.check_ops(seed).items():
            ok = err <= gradsuite.TOLERANCE
            print(f"op    {name:24s} max_rel_err {err:.3e} {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(name)
        for name, (err, checked, skipped) in gradsuite.check_model(seed).items():
            ok = err <= gradsuite.TOLERANCE and checked > 0
            print(f"group {name:24s} max_rel_err {err:.3e} checked {checked} skipped {skipped} {'ok' if ok else 'FAIL'}")
            if not ok:
                failed.append(name)
    if failed:
        print("gradcheck FAILED: " + ", ".join(failed))
        return EXIT_INVALID
    print("gradcheck passed")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abnet", description="Augmented bi-path few-shot classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=out_required, help="output directory (created if absent)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        return p

    p = common(sub.add_parser("synth-data", help="write the synthetic benchmark as PNGs plus manifest"))
    p.set_defaults(func=cmd_synth_data)

    p = common(sub.add_parser("extract-patches", help="compute the salient patch cache"))
    p.add_argument("--dataset-root", help="class-folder dataset (default: the configured dataset)")
    p.set_defaults(func=cmd_extract_patches)

    p = common(sub.add_parser("train", help="episodic training"))
    p.add_argument("--ablation-suite", action="store_true",
                   help="train baseline, la, la_sp and la_sp_lr in subdirectories")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.txt")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="episodic evaluation of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="default: eval_episodes from the config")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), out_required=False)
    p.add_argument("--inject-fault", metavar="OP", help="scale OP's backward rule (test hook)")
    p.add_argument("--fault-scale", type=float, default=2.0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        for message in exc.errors:
            print(f"config error: {message}", file=sys.stderr)
        return EXIT_INVALID
    except CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except PatchCacheError as exc:
        print(f"corrupt patch cache: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
