"""Variational-bound NLL reports and the centroid motion oracle."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import captions as cap
from .data import HORIZONTAL, MOTION_TO_AXIS, VERTICAL
from .rvae import SyncDraw
from .training import evaluate


class UndefinedMotionError(ValueError):
    pass


@dataclass
class NllReport:
    per_video: np.ndarray  # lx + lz per video, nats
    lx: np.ndarray
    lz: np.ndarray

    @property
    def count(self) -> int:
        return int(self.per_video.shape[0])

    @property
    def mean(self) -> float:
        return float(self.per_video.mean())

    @property
    def std(self) -> float:
        return float(self.per_video.std())

    def records(self):
        for i, (nll, lx, lz) in enumerate(zip(self.per_video, self.lx, self.lz)):
            yield {"index": i, "nll": float(nll), "lx": float(lx), "lz": float(lz)}

    def summary(self) -> dict:
        return {"count": self.count, "mean": self.mean, "std": self.std}

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"summary": self.summary()}) + "\n")


def eval_nll(model: SyncDraw, dataset, batch_size: int = 64) -> NllReport:
    lx, lz = evaluate(model, dataset, batch_size)
    return NllReport(lx + lz, lx, lz)


def motion_oracle(video) -> str:
    """Axis of motion from the spread of per-frame intensity centroids.

    Horizontal when the column centroid varies more than the row centroid;
    ties (including static videos) resolve to vertical. Variances within
    float roundoff of each other count as a tie.
    """
    video = np.asarray(video, dtype=np.float64)
    mass = video.sum(axis=(1, 2))
    live = mass > 0
    if not live.any():
        raise UndefinedMotionError("video has no intensity; motion is undefined")
    rows = np.arange(video.shape[1], dtype=np.float64)
    cols = np.arange(video.shape[2], dtype=np.float64)
    r_bar = (video[live].sum(axis=2) @ rows) / mass[live]
    c_bar = (video[live].sum(axis=1) @ cols) / mass[live]
    var_r, var_c = r_bar.var(), c_bar.var()
    tol = 1e-9 * (1.0 + max(var_r, var_c))
    return HORIZONTAL if var_c > var_r + tol else VERTICAL


@dataclass
class MotionOracleResult:
    predicted: list
    expected: list

    @property
    def agreement(self) -> float:
        if not self.predicted:
            return 0.0
        return float(np.mean([p == e for p, e in zip(self.predicted, self.expected)]))


def caption_axis(text: str) -> str:
    template = cap.parse_caption(text)
    return MOTION_TO_AXIS[template.slots[0][1]]


def oracle_agreement(videos, texts) -> MotionOracleResult:
    predicted = [motion_oracle(v) for v in videos]
    return MotionOracleResult(predicted, [caption_axis(t) for t in texts])
