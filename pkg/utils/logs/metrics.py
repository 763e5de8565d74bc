# utils/logs/metrics.py
import csv
import io
import math
import os
from typing import Dict, List, Optional

from utils.persistence import atomic_write_bytes

METRICS_HEADER = ["step", "loss_d", "loss_g", "loss_off", "loss_eik", "r1"]


class MetricsLog:
    """Append-only CSV of per-step scalar losses with a fixed header."""

    def __init__(self, path: str, *, resume_step: Optional[int] = None):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if resume_step is None or not os.path.exists(path):
            self._rewrite([])
        else:
            # rows logged after the checkpoint being resumed are replayed
            self._rewrite([r for r in read_metrics(path) if r["step"] <= resume_step])

    def _rewrite(self, rows: List[Dict[str, float]]) -> None:
        buf = io.StringIO(newline="")
        writer = csv.writer(buf)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(_format(int(row["step"]), row))
        atomic_write_bytes(self.path, buf.getvalue().encode("utf-8"))

    def append(self, step: int, losses: Dict[str, float]) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow(_format(step, losses))


def _format(step: int, losses: Dict[str, float]) -> List[str]:
    return [str(step)] + [repr(float(losses[k])) for k in METRICS_HEADER[1:]]


def read_metrics(path: str) -> List[Dict[str, float]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header: {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {k: float(v) for k, v in row.items()}
            parsed["step"] = int(parsed["step"])
            rows.append(parsed)
    return rows


def is_finite_row(losses: Dict[str, float]) -> bool:
    return all(math.isfinite(float(losses[k])) for k in METRICS_HEADER[1:])
