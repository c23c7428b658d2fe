"""n-way top-k identification metric for generated images.

For each (generated, ground-truth) pair the ground-truth class is what the
classifier says about the ground-truth image; repeated trials draw a
candidate set holding that class plus n-1 distinct other classes, rank the
candidates by the classifier's probabilities for the generated image
restricted to that set, and count a success when the true class lands in
the top k.  When the two images are identical the restricted vector is the
one that defined the ground-truth class, so every trial succeeds and the
rate is exactly 1.  Ties are broken uniformly at random, so an
uninformative classifier scores k/n in expectation.  The per-(image, trial)
randomness comes from per-image child streams of the evaluation seed,
making reports order-independent and reproducible.

A dataset-label mode (taking the true class from stored labels instead of
the classifier) is kept for diagnostics.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .rng import child_rng


def _validate(n_classes: int, n: int, k: int, trials: int) -> None:
    if not 2 <= n <= n_classes:
        raise ConfigError(f"need 2 <= n <= n_classes, got n={n}, n_classes={n_classes}")
    if not 1 <= k < n:
        raise ConfigError(f"need 1 <= k < n, got k={k}, n={n}")
    if trials < 1:
        raise ConfigError(f"need at least one trial, got {trials}")


def nway_topk_successes(probs: np.ndarray, gt_label: int, n: int, k: int,
                        trials: int, rng: np.random.Generator) -> int:
    """Count of trials whose top-k (by probs, ties uniform) holds gt_label."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ConfigError(f"probs must be a flat class vector, got shape {probs.shape}")
    if not np.isfinite(probs).all():
        raise NumericalError("classifier probabilities contain non-finite values")
    n_classes = probs.shape[0]
    _validate(n_classes, n, k, trials)
    if not 0 <= gt_label < n_classes:
        raise ConfigError(f"gt_label {gt_label} outside [0, {n_classes})")
    others = np.delete(np.arange(n_classes), gt_label)
    successes = 0
    for _ in range(trials):
        drawn = rng.permutation(others)[: n - 1]
        candidates = np.sort(np.concatenate(([gt_label], drawn)))
        scores = probs[candidates]
        tie_break = rng.permutation(n)
        # lexsort: primary key last -> order by descending score, ties by
        # the random permutation, independent of candidate order
        order = np.lexsort((tie_break, -scores))
        if gt_label in candidates[order[:k]]:
            successes += 1
    return successes


def nway_topk_success_rate(probs: np.ndarray, gt_label: int, n: int, k: int,
                           trials: int, rng: np.random.Generator) -> float:
    """Fraction of trials whose top-k (by probs, ties uniform) holds gt_label."""
    return nway_topk_successes(probs, gt_label, n, k, trials, rng) / trials


@dataclass
class EvalReport:
    """Identification results for a batch of generated images."""
    mean_sr: float
    n: int
    k: int
    trials: int
    seed: int
    per_image: list[dict] = field(default_factory=list)
    # Optional matched-vs-mismatched conditioning comparison, attached by
    # the pipeline when the tuned model and paired test data are at hand.
    conditioning: dict | None = None

    def to_json(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    def to_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "label", "successes", "success_rate"])
            for row in self.per_image:
                writer.writerow([row["index"], row["label"], row["successes"],
                                 f"{row['success_rate']:.10g}"])


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, n: int, k: int,
                   trials: int, seed: int) -> EvalReport:
    """Report from precomputed class probabilities [M, C] and true classes."""
    if probs.shape[0] != labels.shape[0]:
        raise ConfigError(f"{probs.shape[0]} prob rows vs {labels.shape[0]} labels")
    per_image = []
    for i in range(probs.shape[0]):
        wins = nway_topk_successes(probs[i], int(labels[i]), n, k, trials,
                                   child_rng(seed, "eval", i))
        per_image.append({"index": i, "label": int(labels[i]),
                          "successes": wins, "success_rate": wins / trials})
    mean_sr = float(np.mean([row["success_rate"] for row in per_image]))
    return EvalReport(mean_sr, n, k, trials, seed, per_image)


def evaluate_pairs(gen_images: np.ndarray, gt_images: np.ndarray, classifier,
                   n: int, k: int, trials: int, seed: int) -> EvalReport:
    """Score generated images against what the classifier calls the truth.

    The true class of each pair is the classifier's argmax on the
    ground-truth image, so the metric needs no stored labels and identical
    image pairs score exactly 1.
    """
    if gen_images.shape != gt_images.shape:
        raise ConfigError(
            f"paired image stacks must match, got {gen_images.shape} "
            f"vs {gt_images.shape}")
    gt_labels = classifier.probs(gt_images).argmax(axis=1)
    return evaluate_probs(classifier.probs(gen_images), gt_labels, n, k,
                          trials, seed)


def evaluate_images(gen_images: np.ndarray, labels: np.ndarray, classifier,
                    n: int, k: int, trials: int, seed: int) -> EvalReport:
    """Dataset-label diagnostic mode: true classes come from stored labels."""
    return evaluate_probs(classifier.probs(gen_images), labels, n, k, trials, seed)
