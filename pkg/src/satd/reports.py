"""Evaluation reports and image/metric file writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

METRICS = ("accuracy", "f1_macro", "map100", "miou", "map_multilabel")


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    per_class: list | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        self.value = float(self.value)
        if not 0.0 <= self.value <= 1.0:
            raise DataError(f"{self.task}/{self.metric} value {self.value} outside [0, 1]")
        if self.per_class is not None:
            self.per_class = [None if v is None or v != v else float(v) for v in self.per_class]

    def to_dict(self) -> dict:
        return asdict(self)


def write_reports(reports, json_path, csv_path=None):
    rows = [r.to_dict() for r in reports]
    Path(json_path).write_text(json.dumps(rows, indent=1, sort_keys=True))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "metric", "value"])
            for r in reports:
                w.writerow([r.task, r.metric, repr(r.value)])


def write_pgm(path, image: np.ndarray) -> dict:
    """Write a 2-D array as an 8-bit binary PGM, min-max scaled; returns the scaling record.

    The scaling record is also written next to the image as ``<path>.json``.
    """
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"PGM needs a 2-D array, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros(a.shape) if span == 0 else (a - lo) / span
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = a.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    record = {"min": lo, "max": hi, "height": h, "width": w, "levels": 255}
    path.with_name(path.name + ".json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return record


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)
