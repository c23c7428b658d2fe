"""Command line interface.

Only standard-library modules load at import time; the numeric stack is
imported after ``--threads`` has pinned the BLAS thread pools, so the
setting actually takes effect.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numerical failure, 1 any other package error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import (ConfigError, MissingArtifactError, NumericalError,
                     VoximageError)

_STAGE_NAMES = ("synth", "pretrain", "xtune", "train-latent-ae",
                "pretrain-ldm", "finetune-ldm", "generate", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voximage",
        description="Voxel-conditioned image reconstruction on synthetic data.")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread count (default 1, set before numpy loads)")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--preset", default=None, help="named preset applied before the file")
    p.add_argument("--run-dir", default=None, help="run directory (overrides run.out)")
    p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   dest="assignments", help="override one config value")
    sub = p.add_subparsers(dest="command", required=True)

    for stage in ("synth", "pretrain", "xtune", "train-latent-ae",
                  "pretrain-ldm", "finetune-ldm"):
        sub.add_parser(stage, help=f"run the {stage} stage")

    gen = sub.add_parser("generate", help="sample images from voxel vectors")
    gen.add_argument("--fmri", default=None,
                     help="voxel source: .npy of [M, n_voxels] or a dataset "
                          "directory (test split); default is the run dataset")
    gen.add_argument("--n", type=int, default=None, help="number of samples")
    gen.add_argument("--sampler", choices=("ddpm", "plms"), default=None)
    gen.add_argument("--steps", type=int, default=None)
    gen.add_argument("--seed", type=int, default=None, dest="gen_seed")
    gen.add_argument("--out", default=None, help="output image directory")

    ev = sub.add_parser("evaluate", help="score generated images")
    ev.add_argument("--gen-dir", default=None, help="generated image directory")
    ev.add_argument("--gt-dir", default=None, help="ground-truth image directory")
    ev.add_argument("--classifier", default=None, help="classifier checkpoint base")
    ev.add_argument("--n", type=int, default=None)
    ev.add_argument("--k", type=int, default=None)
    ev.add_argument("--trials", type=int, default=None)
    ev.add_argument("--seed", type=int, default=None, dest="eval_seed")
    ev.add_argument("--report", default=None, help="also write the JSON report here")

    run = sub.add_parser("run", help="run the full pipeline")
    run.add_argument("--from", dest="from_stage", choices=_STAGE_NAMES, default=None,
                     help="start at this stage, reusing earlier artifacts")

    gc = sub.add_parser("gradcheck", help="finite-difference check of model blocks")
    gc.add_argument("--tol", type=float, default=None,
                    help="max relative error allowed (default 1e-4)")
    gc.add_argument("--gradcheck-seed", type=int, default=0)

    sub.add_parser("dump-config", help="print the resolved config")
    return p


def _parse_assignments(pairs: list[str]) -> dict[tuple[str, str], str]:
    overrides: dict[tuple[str, str], str] = {}
    for raw in pairs:
        key, sep, value = raw.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {raw!r}")
        overrides[(section.strip(), name.strip())] = value.strip()
    return overrides


def _resolve_config(args):
    from .config import load_config

    overrides = _parse_assignments(args.assignments)
    if args.seed is not None:
        overrides[("run", "seed")] = args.seed
    if args.run_dir is not None:
        overrides[("run", "out")] = args.run_dir
    return load_config(path=args.config, preset=args.preset, overrides=overrides)


def _cmd_stage(args, cfg) -> int:
    from . import pipeline

    result = pipeline.run_stage(args.command, cfg, cfg.run.out)
    if args.command == "evaluate" and result is not None:
        print(f"mean success rate: {result.mean_sr:.4f} "
              f"({result.n}-way top-{result.k}, {result.trials} trials)")
    print(f"stage {args.command}: done")
    return 0


def _cmd_generate(args, cfg) -> int:
    import numpy as np

    from . import pipeline
    from .imageio import save_image_dir
    from .synth import load_dataset
    from .training.latent import load_latent_ae
    from .training.ldm import generate_images, load_finetuned

    if args.sampler is not None:
        cfg.generate.sampler = args.sampler
    if args.steps is not None:
        cfg.generate.steps = args.steps
    if args.n is not None:
        cfg.generate.count = args.n
    if args.gen_seed is not None:
        cfg.run.seed = args.gen_seed
    if args.fmri is None and args.out is None:
        pipeline.run_stage("generate", cfg, cfg.run.out)
        print("stage generate: done")
        return 0

    paths = pipeline.RunPaths(cfg.run.out)
    pipeline.require_artifact(paths.ldm, "finetune-ldm", "tuned decoding model")
    pipeline.require_artifact(paths.latent_ae, "train-latent-ae", "latent autoencoder")
    model, encoder, _ = load_finetuned(paths.ldm)
    latent_ae, _ = load_latent_ae(paths.latent_ae)

    labels = None
    if args.fmri is None:
        ds = pipeline.load_run_dataset(paths)
        voxels, _, labels = ds.split("test")
    elif os.path.isdir(args.fmri):
        ds = load_dataset(args.fmri)
        voxels, _, labels = ds.split("test")
    else:
        if not os.path.exists(args.fmri):
            raise MissingArtifactError(f"voxel file not found: {args.fmri}")
        voxels = np.load(args.fmri)
        if voxels.ndim != 2:
            raise ConfigError(f"expected [M, n_voxels] array, got shape {voxels.shape}")

    count = cfg.generate.count
    if count and count < len(voxels):
        voxels = voxels[:count]
        labels = None if labels is None else labels[:count]
    gen = generate_images(voxels, encoder, model, latent_ae, cfg.ldm,
                          sampler=cfg.generate.sampler,
                          steps=cfg.generate.steps, seed=cfg.run.seed)
    out = args.out or paths.generated_dir
    save_image_dir(out, gen, "gen", labels=labels)
    print(f"wrote {len(gen)} images to {out}")
    return 0


def _cmd_evaluate(args, cfg) -> int:
    from . import pipeline
    from .evalmetric import evaluate_probs
    from .imageio import load_image_dir, load_labels
    from .training.classifier import load_classifier

    if args.n is not None:
        cfg.evaluate.n = args.n
    if args.k is not None:
        cfg.evaluate.k = args.k
    if args.trials is not None:
        cfg.evaluate.trials = args.trials
    if args.eval_seed is not None:
        cfg.run.seed = args.eval_seed

    if args.gen_dir is None:
        report = pipeline.run_stage("evaluate", cfg, cfg.run.out)
    else:
        gen = load_image_dir(args.gen_dir, "gen")
        base = args.classifier or pipeline.RunPaths(cfg.run.out).classifier
        if not os.path.exists(base + ".json"):
            raise MissingArtifactError(
                f"missing classifier at {base}; run stage 'evaluate' in a "
                "full run or pass --classifier")
        classifier = load_classifier(base)
        if args.gt_dir is not None and not cfg.evaluate.dataset_labels:
            gt = load_image_dir(args.gt_dir, "gt")
            labels = classifier.probs(gt).argmax(axis=1)
        else:
            labels = load_labels(args.gen_dir)
            if labels is None and args.gt_dir is not None:
                labels = load_labels(args.gt_dir)
            if labels is None:
                raise MissingArtifactError(
                    "no labels.json found in --gen-dir or --gt-dir")
        report = evaluate_probs(classifier.probs(gen), labels, cfg.evaluate.n,
                                cfg.evaluate.k, cfg.evaluate.trials, cfg.run.seed)
    if args.report is not None:
        report.to_json(args.report)
    import dataclasses

    summary = {k: v for k, v in dataclasses.asdict(report).items()
               if k != "per_image"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_run(args, cfg) -> int:
    from . import pipeline

    report = pipeline.run_pipeline(cfg, cfg.run.out, from_stage=args.from_stage,
                                   progress=print)
    if report is not None:
        print(f"mean success rate: {report.mean_sr:.4f} "
              f"({report.n}-way top-{report.k}, {report.trials} trials)")
    return 0


def _cmd_gradcheck(args) -> int:
    from .diagnostics import DEFAULT_TOL, gradient_battery
    from .errors import GradCheckError

    tol = args.tol if args.tol is not None else DEFAULT_TOL
    results = gradient_battery(args.gradcheck_seed)
    failed = []
    for name, err in results:
        status = "ok" if err <= tol else "FAIL"
        print(f"{name:<24s} max_rel_err={err:.3e}  {status}")
        if err > tol:
            failed.append(name)
    if failed:
        raise GradCheckError(
            f"gradient check failed for: {', '.join(failed)} (tol {tol:g})")
    print(f"all {len(results)} blocks within tol {tol:g}")
    return 0


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        return _cmd_gradcheck(args)
    cfg = _resolve_config(args)
    if args.command == "dump-config":
        from .config import dump_config

        sys.stdout.write(dump_config(cfg))
        return 0
    if args.command == "run":
        return _cmd_run(args, cfg)
    if args.command == "generate":
        return _cmd_generate(args, cfg)
    if args.command == "evaluate":
        return _cmd_evaluate(args, cfg)
    return _cmd_stage(args, cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    threads = str(max(1, args.threads))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = threads
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except VoximageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
