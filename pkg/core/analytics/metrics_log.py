#!/usr/bin/env python3
"""
Distillation Metrics Log
Per-iteration records of the outer loop with CSV export and oscillation diagnosis
"""

import csv
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

from core.errors import NumericError

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    'iteration', 'matching_loss', 't', 'T', 'alpha',
    'grad_norm_images', 'grad_norm_labels', 'grad_norm_alpha',
]


@dataclass
class MetricsRecord:
    """One outer iteration"""
    iteration: int
    matching_loss: float
    t: int
    T: int
    alpha: float
    grad_norm_images: float = 0.0
    grad_norm_labels: float = 0.0
    grad_norm_alpha: float = 0.0
    expert: int = 0
    skipped: bool = False  # degenerate expert pair, no update applied
    eval_accuracy: Optional[float] = None

    def __post_init__(self):
        values = [self.matching_loss, self.alpha, self.grad_norm_images, self.grad_norm_labels, self.grad_norm_alpha]
        if self.eval_accuracy is not None:
            values.append(self.eval_accuracy)
        if not all(math.isfinite(v) for v in values):
            raise NumericError(f"Iteration {self.iteration} produced non-finite metrics")


@dataclass
class OscillationReport:
    """First- vs last-window matching loss of a run"""
    iterations: int
    skipped: int
    window: int
    first_mean: float
    last_mean: float
    relative_improvement: float
    oscillating: bool


@dataclass
class MetricsLog:
    records: List[MetricsRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MetricsRecord]:
        return iter(self.records)

    def append(self, record: MetricsRecord):
        self.records.append(record)

    @property
    def skipped(self) -> int:
        return sum(1 for r in self.records if r.skipped)

    def losses(self) -> List[float]:
        return [r.matching_loss for r in self.records if not r.skipped]

    def window_means(self, fraction: float = 0.1) -> Tuple[float, float]:
        """Mean matching loss over the first and the last `fraction` of non-skipped iterations"""
        losses = self.losses()
        if not losses:
            raise NumericError("No completed iterations to summarize")
        window = max(1, int(len(losses) * fraction))
        return statistics.fmean(losses[:window]), statistics.fmean(losses[-window:])

    def oscillation_report(self, fraction: float = 0.1) -> OscillationReport:
        first, last = self.window_means(fraction)
        window = max(1, int(len(self.losses()) * fraction))
        improvement = (first - last) / first if first > 0 else 0.0
        report = OscillationReport(
            iterations=len(self.records),
            skipped=self.skipped,
            window=window,
            first_mean=first,
            last_mean=last,
            relative_improvement=improvement,
            oscillating=not last < first,
        )
        if report.oscillating:
            logger.warning(f"Matching loss did not descend: first={first:.5f} last={last:.5f}")
        return report

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in self.records:
                writer.writerow({
                    'iteration': r.iteration,
                    'matching_loss': repr(r.matching_loss),
                    't': r.t,
                    'T': r.T,
                    'alpha': repr(r.alpha),
                    'grad_norm_images': repr(r.grad_norm_images),
                    'grad_norm_labels': repr(r.grad_norm_labels),
                    'grad_norm_alpha': repr(r.grad_norm_alpha),
                })
        logger.debug(f"Exported {len(self.records)} metrics records to {path}")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'MetricsLog':
        log = cls()
        with open(path, 'r', newline='', encoding='utf-8') as csvfile:
            for row in csv.DictReader(csvfile):
                log.append(MetricsRecord(
                    iteration=int(row['iteration']),
                    matching_loss=float(row['matching_loss']),
                    t=int(row['t']),
                    T=int(row['T']),
                    alpha=float(row['alpha']),
                    grad_norm_images=float(row['grad_norm_images']),
                    grad_norm_labels=float(row['grad_norm_labels']),
                    grad_norm_alpha=float(row['grad_norm_alpha']),
                ))
        return log


def export_report_json(report: OscillationReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(asdict(report), f, indent=2)
    logger.info(f"Exported oscillation report to {path}")
    return path
