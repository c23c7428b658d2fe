"""End-to-end pipeline: ordered stages over a shared run directory.

Every stage reads its inputs from fixed artifact paths under the run
directory and writes its outputs to fixed paths, so stages can be run
one at a time, resumed after a crash, or re-run from any point with
``--from``.  A missing input names the stage that produces it.

Stage order::

    synth -> pretrain -> xtune -> train-latent-ae -> pretrain-ldm
          -> finetune-ldm -> generate -> evaluate
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from .config import RunConfig, dump_config
from .errors import ConfigError, MissingArtifactError
from .evalmetric import EvalReport, evaluate_probs
from .imageio import load_image_dir, load_labels, save_image_dir
from .rng import child_rng
from .synth import PairedDataset, generate, load_dataset, save_dataset
from .training.classifier import load_classifier, train_classifier
from .training.latent import load_latent_ae, train_latent_ae
from .training.ldm import (conditioning_gap, finetune_ldm, generate_images,
                           load_denoiser, load_finetuned, pretrain_ldm,
                           save_finetuned)
from .training.phase1 import train_phase1
from .training.phase2 import load_encoder, train_phase2

STAGES = ("synth", "pretrain", "xtune", "train-latent-ae", "pretrain-ldm",
          "finetune-ldm", "generate", "evaluate")


class RunPaths:
    """Fixed artifact layout of a run directory."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self.resolved_config = os.path.join(run_dir, "resolved_config.ini")
        self.dataset_dir = os.path.join(run_dir, "dataset")
        self.phase1 = os.path.join(run_dir, "phase1")
        self.phase1_log = os.path.join(run_dir, "phase1_log.csv")
        self.xmodal = os.path.join(run_dir, "xmodal")
        self.encoder = os.path.join(run_dir, "frl_encoder")
        self.phase2_log = os.path.join(run_dir, "phase2_log.csv")
        self.image_mae_log = os.path.join(run_dir, "image_mae_log.csv")
        self.latent_ae = os.path.join(run_dir, "latent_ae")
        self.latent_ae_log = os.path.join(run_dir, "latent_ae_log.csv")
        self.ldm_pretrained = os.path.join(run_dir, "ldm_pretrained")
        self.ldm_pretrain_log = os.path.join(run_dir, "ldm_pretrain_log.csv")
        self.ldm = os.path.join(run_dir, "ldm")
        self.ldm_finetune_log = os.path.join(run_dir, "ldm_finetune_log.csv")
        self.generated_dir = os.path.join(run_dir, "generated")
        self.gt_dir = os.path.join(run_dir, "gt")
        self.classifier = os.path.join(run_dir, "classifier")
        self.classifier_log = os.path.join(run_dir, "classifier_log.csv")
        self.eval_report = os.path.join(run_dir, "eval_report.json")
        self.eval_per_image = os.path.join(run_dir, "eval_per_image.csv")


def require_artifact(path: str, producer: str, what: str) -> None:
    probe = path if os.path.exists(path) else path + ".json"
    if not os.path.exists(probe):
        raise MissingArtifactError(
            f"missing {what} at {path}; run stage '{producer}' first")


def load_run_dataset(paths: RunPaths) -> PairedDataset:
    require_artifact(paths.dataset_dir, "synth", "dataset")
    return load_dataset(paths.dataset_dir)


def _encode_latents(latent_ae, images: np.ndarray) -> np.ndarray:
    """Images to unit-variance latents (the denoiser's working space)."""
    return latent_ae.encode_np(images) / latent_ae.latent_scale


def stage_synth(cfg: RunConfig, paths: RunPaths) -> None:
    ds = generate(cfg.synth, cfg.run.seed)
    save_dataset(paths.dataset_dir, ds)


def stage_pretrain(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    voxels, _, _ = ds.split("train")
    train_phase1(voxels, cfg.phase1, cfg.run.seed, out_base=paths.phase1,
                 log_path=paths.phase1_log)


def stage_xtune(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    require_artifact(paths.phase1, "pretrain", "pretrained voxel autoencoder")
    voxels, images, _ = ds.split("train")
    train_phase2(voxels, images, paths.phase1, cfg.phase2, cfg.run.seed,
                 out_base=paths.xmodal, encoder_out_base=paths.encoder,
                 log_path=paths.phase2_log, image_log_path=paths.image_mae_log)


def stage_train_latent_ae(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    _, images, _ = ds.split("train")
    train_latent_ae(images, cfg.latent_ae, cfg.run.seed,
                    out_base=paths.latent_ae, log_path=paths.latent_ae_log)


def stage_pretrain_ldm(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    require_artifact(paths.latent_ae, "train-latent-ae", "latent autoencoder")
    latent_ae, _ = load_latent_ae(paths.latent_ae)
    _, images, labels = ds.split("train")
    latents = _encode_latents(latent_ae, images)
    # Condition token width must match the voxel encoder that takes over at
    # fine-tuning time.
    pretrain_ldm(latents, labels, ds.n_classes, cfg.phase1.dim, cfg.ldm,
                 cfg.run.seed, out_base=paths.ldm_pretrained,
                 log_path=paths.ldm_pretrain_log)


def stage_finetune_ldm(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    require_artifact(paths.latent_ae, "train-latent-ae", "latent autoencoder")
    require_artifact(paths.ldm_pretrained, "pretrain-ldm", "pretrained denoiser")
    require_artifact(paths.encoder, "xtune", "tuned voxel encoder")
    latent_ae, _ = load_latent_ae(paths.latent_ae)
    model, _ = load_denoiser(paths.ldm_pretrained)
    encoder, encoder_cfg = load_encoder(paths.encoder)
    voxels, images, _ = ds.split("train")
    latents = _encode_latents(latent_ae, images)
    finetune_ldm(latents, voxels, encoder, model, cfg.ldm, cfg.run.seed,
                 out_base=paths.ldm, log_path=paths.ldm_finetune_log,
                 encoder_cfg=encoder_cfg)


def stage_generate(cfg: RunConfig, paths: RunPaths) -> None:
    ds = load_run_dataset(paths)
    require_artifact(paths.ldm, "finetune-ldm", "tuned decoding model")
    require_artifact(paths.latent_ae, "train-latent-ae", "latent autoencoder")
    model, encoder, _ = load_finetuned(paths.ldm)
    latent_ae, _ = load_latent_ae(paths.latent_ae)
    voxels, images, labels = ds.split("test")
    count = cfg.generate.count
    if count and count < len(labels):
        voxels, images, labels = voxels[:count], images[:count], labels[:count]
    gen = generate_images(voxels, encoder, model, latent_ae, cfg.ldm,
                          sampler=cfg.generate.sampler,
                          steps=cfg.generate.steps, seed=cfg.run.seed)
    save_image_dir(paths.generated_dir, gen, "gen", labels=labels)
    save_image_dir(paths.gt_dir, images, "gt", labels=labels)


def stage_evaluate(cfg: RunConfig, paths: RunPaths) -> EvalReport:
    require_artifact(paths.generated_dir, "generate", "generated images")
    gen = load_image_dir(paths.generated_dir, "gen")
    if not os.path.exists(paths.classifier + ".json"):
        ds = load_run_dataset(paths)
        _, images, train_labels = ds.split("train")
        train_classifier(images, train_labels, ds.n_classes, cfg.classifier,
                         cfg.run.seed, out_base=paths.classifier,
                         log_path=paths.classifier_log)
    classifier = load_classifier(paths.classifier)
    if cfg.evaluate.dataset_labels:
        labels = load_labels(paths.generated_dir)
        if labels is None:
            raise MissingArtifactError(
                f"missing labels.json in {paths.generated_dir}; run stage "
                "'generate' first")
    else:
        require_artifact(paths.gt_dir, "generate", "ground-truth images")
        gt = load_image_dir(paths.gt_dir, "gt")
        labels = classifier.probs(gt).argmax(axis=1)
    report = evaluate_probs(classifier.probs(gen), labels, cfg.evaluate.n,
                            cfg.evaluate.k, cfg.evaluate.trials, cfg.run.seed)
    report.conditioning = _conditioning_summary(cfg, paths)
    report.to_json(paths.eval_report)
    report.to_csv(paths.eval_per_image)
    return report


def _conditioning_summary(cfg: RunConfig, paths: RunPaths) -> dict | None:
    """Matched-vs-mismatched denoising loss over the test split.

    Needs the tuned model, the latent autoencoder, and the dataset; when
    evaluate runs standalone on bare image directories those may be absent,
    so the comparison is skipped rather than failed.
    """
    needed = (paths.ldm + ".json", paths.latent_ae + ".json",
              os.path.join(paths.dataset_dir, "manifest.json"))
    if not all(os.path.exists(p) for p in needed):
        return None
    ds = load_run_dataset(paths)
    model, encoder, ldm_cfg = load_finetuned(paths.ldm)
    latent_ae, _ = load_latent_ae(paths.latent_ae)
    voxels, images, _ = ds.split("test")
    latents = _encode_latents(latent_ae, images)
    return conditioning_gap(model, encoder, latents, voxels,
                            ldm_cfg.schedule(), cfg.run.seed)


_STAGE_FNS = {
    "synth": stage_synth,
    "pretrain": stage_pretrain,
    "xtune": stage_xtune,
    "train-latent-ae": stage_train_latent_ae,
    "pretrain-ldm": stage_pretrain_ldm,
    "finetune-ldm": stage_finetune_ldm,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: RunConfig, run_dir: str):
    if name not in _STAGE_FNS:
        raise ConfigError(f"unknown stage '{name}', choose from {list(STAGES)}")
    os.makedirs(run_dir, exist_ok=True)
    return _STAGE_FNS[name](cfg, RunPaths(run_dir))


def run_pipeline(cfg: RunConfig, run_dir: str, from_stage: str | None = None,
                 progress=None) -> EvalReport:
    """Run all stages in order, optionally starting partway through."""
    start = 0
    if from_stage is not None:
        if from_stage not in STAGES:
            raise ConfigError(
                f"unknown stage '{from_stage}', choose from {list(STAGES)}")
        start = STAGES.index(from_stage)
    os.makedirs(run_dir, exist_ok=True)
    paths = RunPaths(run_dir)
    with open(paths.resolved_config, "w") as fh:
        fh.write(dump_config(cfg))
    report = None
    for name in STAGES[start:]:
        t0 = time.monotonic()
        result = _STAGE_FNS[name](cfg, paths)
        if progress is not None:
            progress(f"stage {name}: done in {time.monotonic() - t0:.1f}s")
        if name == "evaluate":
            report = result
    return report


def _stage_summary(run_dir: str) -> dict:
    """Which artifacts exist, for status displays."""
    paths = RunPaths(run_dir)
    checks = {
        "synth": os.path.join(paths.dataset_dir, "manifest.json"),
        "pretrain": paths.phase1 + ".json",
        "xtune": paths.xmodal + ".json",
        "train-latent-ae": paths.latent_ae + ".json",
        "pretrain-ldm": paths.ldm_pretrained + ".json",
        "finetune-ldm": paths.ldm + ".json",
        "generate": os.path.join(paths.generated_dir, "labels.json"),
        "evaluate": paths.eval_report,
    }
    return {stage: os.path.exists(p) for stage, p in checks.items()}
