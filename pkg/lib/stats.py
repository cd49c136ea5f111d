"""
Forget-gate statistics: per-layer mean, median and histogram of the decay
magnitudes recorded during evaluation, pooled over time, dimensions and
batches.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from lib.errors import ContractError

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64


@dataclass
class GateStats:
    layer: int
    mean: float
    median: float
    histogram: np.ndarray
    gamma_mean: float
    gamma_min: float

    @property
    def count(self):
        return int(self.histogram.sum())


class GateStatsAccumulator:
    """Collects LayerRecords from successive forward passes"""

    def __init__(self, layers, bins=HISTOGRAM_BINS):
        self.layers = layers
        self.bins = bins
        self.samples = [[] for _ in range(layers)]
        self.gammas = [None] * layers

    def update(self, records):
        if len(records) != self.layers:
            raise ContractError(f"expected {self.layers} layer records, got {len(records)}")
        for k, record in enumerate(records):
            self.samples[k].append(record.lam.reshape(-1).astype(np.float64))
            self.gammas[k] = record.gamma.astype(np.float64)

    def result(self):
        stats = []
        for k in range(self.layers):
            if not self.samples[k]:
                raise ContractError(f"no gate values recorded for layer {k + 1}")
            values = np.clip(np.concatenate(self.samples[k]), 0.0, 1.0)
            histogram, _ = np.histogram(values, bins=self.bins, range=(0.0, 1.0))
            gamma = self.gammas[k]
            stats.append(GateStats(
                layer=k + 1,
                mean=float(values.mean()),
                median=float(np.median(values)),
                histogram=histogram,
                gamma_mean=float(gamma.mean()),
                gamma_min=float(gamma.min()),
            ))
        return stats


def gate_stats_header(bins=HISTOGRAM_BINS):
    return ['layer', 'mean', 'median'] + [f'bin_{i}' for i in range(bins)]


def write_gate_stats_csv(stats: List[GateStats], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bins = len(stats[0].histogram) if stats else HISTOGRAM_BINS
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(gate_stats_header(bins))
        for s in stats:
            writer.writerow([s.layer, repr(s.mean), repr(s.median)] + [int(c) for c in s.histogram])
    logger.info(f"Gate statistics for {len(stats)} layers written to {path}")
    return path


def read_gate_stats_csv(path):
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    return [
        {'layer': int(r['layer']), 'mean': float(r['mean']), 'median': float(r['median'])}
        for r in rows
    ]
