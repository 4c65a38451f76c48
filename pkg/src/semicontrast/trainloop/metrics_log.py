"""Per-epoch metrics CSV."""
from __future__ import annotations

import csv
from pathlib import Path

LOSS_COLUMNS = ["epoch", "stage", "loss_total", "loss_ce", "loss_s", "loss_u", "lr"]


def header_for(task: str) -> list[str]:
    head = "top1" if task == "classify" else "acc"
    return LOSS_COLUMNS + [head, "macc", "facc", "miou"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsCSV:
    """Appends one row per epoch; truncates rows past ``resume_epoch`` on resume."""

    def __init__(self, path, task: str, resume_epoch: int | None = None):
        self.path = Path(path)
        self.columns = header_for(task)
        if resume_epoch is None or not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)
        else:
            rows = read_metrics(self.path)
            with open(self.path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(self.columns)
                for r in rows:
                    if int(r["epoch"]) <= resume_epoch:
                        w.writerow([r[c] for c in self.columns])

    def append(self, row: dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row.get(c)) for c in self.columns])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
