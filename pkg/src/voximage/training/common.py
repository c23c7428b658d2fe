"""Shared training plumbing: batch iteration and CSV metric logs."""

from __future__ import annotations

import csv
import os

import numpy as np


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering all n samples once (last may be short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class CsvLog:
    """Append-style metrics log with a fixed header, one file per stage."""

    def __init__(self, path: str | None, columns: list[str]):
        self.path = path
        self.columns = columns
        self.rows: list[list] = []
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(columns)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        row = [f"{v:.10g}" if isinstance(v, float) else v for v in values]
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(row)
