"""Point-cloud similarity metrics against a reference (ground-truth) cloud."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, EmptyTruth, IoFailure
from .spatial import nearest_distances

REPORT_FIELDS = ("rpcdl", "clutter_count", "chamfer", "modified_hausdorff")


def _cloud(a) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(-1, 3)


def clutter_split(radar, truth, delta: float, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Split radar points into (valid, clutter); clutter has no truth point within ``delta``."""
    radar, truth = _cloud(radar), _cloud(truth)
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not len(truth):
        raise EmptyTruth("the reference cloud is empty")
    if not len(radar):
        return radar.copy(), radar.copy()
    d = nearest_distances(radar, truth, method)
    clutter = d > delta
    return radar[~clutter], radar[clutter]


def rpcdl(radar, truth, delta: float = 1.0, method: str = "auto") -> int:
    """Number of radar points with a reference point within ``delta``."""
    return len(clutter_split(radar, truth, delta, method)[0])


def _directed(a, b, method):
    a, b = _cloud(a), _cloud(b)
    if not len(a) or not len(b):
        raise EmptyCloud("metric of an empty point cloud")
    return nearest_distances(a, b, method), nearest_distances(b, a, method)


def chamfer(a, b, method: str = "auto") -> float:
    """Symmetric Chamfer distance: mean of the two directed mean nearest-neighbour distances."""
    ab, ba = _directed(a, b, method)
    return float(0.5 * (np.mean(ab) + np.mean(ba)))


def modified_hausdorff(a, b, method: str = "auto") -> float:
    """Larger of the two directed median nearest-neighbour distances."""
    ab, ba = _directed(a, b, method)
    return float(max(np.median(ab), np.median(ba)))


def hausdorff(a, b, method: str = "auto") -> float:
    ab, ba = _directed(a, b, method)
    return float(max(np.max(ab), np.max(ba)))


@dataclass
class MetricReport:
    rpcdl: int
    clutter_count: int
    chamfer: float
    modified_hausdorff: float

    def __post_init__(self):
        if self.rpcdl < 0 or self.clutter_count < 0:
            raise ValueError("counts must be non-negative")
        if not (self.chamfer >= 0 and self.modified_hausdorff >= 0):
            raise ValueError("distances must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        return cls(int(d["rpcdl"]), int(d["clutter_count"]), float(d["chamfer"]), float(d["modified_hausdorff"]))

    def table(self) -> str:
        return "\n".join(f"{k:<20}{v}" for k, v in self.to_dict().items())


def evaluate(radar, truth, delta: float = 1.0) -> MetricReport:
    """All four metrics of ``radar`` against ``truth``."""
    valid, clutter = clutter_split(radar, truth, delta)
    if not len(_cloud(radar)):
        raise EmptyCloud("radar cloud is empty")
    return MetricReport(len(valid), len(clutter), chamfer(radar, truth), modified_hausdorff(radar, truth))
