"""Cell-averaging and order-statistic CFAR detection on range-Doppler matrices.

Both detectors use a square training ring around the cell under test: the
``(2(g+t)+1)^2`` window minus the ``(2g+1)^2`` guard block.  Only cells whose
whole window lies inside the matrix are tested.  The threshold is either
derived from a false-alarm probability for exponential noise or given as a
fixed offset in dB above the noise estimate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidRank, IoFailure, MissingAngleMap, WindowTooLarge

_MIN_SIZE = 8
_ROW_CHUNK = 64


@dataclass(eq=False)
class RangeDopplerMatrix:
    power: np.ndarray
    range_res: float
    doppler_res: float
    azimuth: np.ndarray | None = None
    elevation: np.ndarray | None = None

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=float)
        if self.power.ndim != 2 or min(self.power.shape) < _MIN_SIZE:
            raise ValueError(f"power must be a 2-D grid of at least {_MIN_SIZE}x{_MIN_SIZE}, got {self.power.shape}")
        if np.any(self.power < 0) or not np.all(np.isfinite(self.power)):
            raise ValueError("power values must be finite and non-negative")
        for name in ("azimuth", "elevation"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != self.power.shape:
                    raise ValueError(f"{name} must match the power grid shape")
                setattr(self, name, v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.power.shape

    @property
    def has_angles(self) -> bool:
        return self.azimuth is not None and self.elevation is not None


@dataclass(frozen=True)
class Detection:
    range_bin: int
    doppler_bin: int
    snr: float
    position: tuple[float, float, float] | None = None


def training_cells(guard: int, train: int) -> int:
    w = 2 * (guard + train) + 1
    g = 2 * guard + 1
    return w * w - g * g


def ca_alpha(n_train: int, pfa: float) -> float:
    """Cell-averaging threshold factor ``N (pfa^(-1/N) - 1)``."""
    _check_pfa(pfa)
    return n_train * (pfa ** (-1.0 / n_train) - 1.0)


def os_false_alarm(alpha: float, n_train: int, k: int) -> float:
    """False-alarm probability of OS-CFAR with rank ``k`` under exponential noise."""
    i = np.arange(k)
    return float(np.prod((n_train - i) / (n_train - i + alpha)))


def os_alpha(n_train: int, k: int, pfa: float, tol: float = 1e-9) -> float:
    """Threshold factor solving ``os_false_alarm(alpha) = pfa`` by bisection."""
    _check_pfa(pfa)
    if not 1 <= k <= n_train:
        raise InvalidRank(f"rank k must lie in [1, {n_train}], got {k}")
    lo, hi = 0.0, 1.0
    while os_false_alarm(hi, n_train, k) > pfa:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if os_false_alarm(mid, n_train, k) > pfa:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _check_pfa(pfa: float):
    if not 0 < pfa < 1:
        raise ValueError(f"pfa must lie in (0, 1), got {pfa}")


def _check_window(rdm: RangeDopplerMatrix, guard: int, train: int) -> int:
    if guard < 0 or train < 1:
        raise ValueError(f"need guard >= 0 and train >= 1, got guard={guard}, train={train}")
    w = 2 * (guard + train) + 1
    if w > rdm.shape[0] or w > rdm.shape[1]:
        raise WindowTooLarge(f"window of {w} cells does not fit a {rdm.shape[0]}x{rdm.shape[1]} matrix")
    return w


def _ring_mask(guard: int, train: int) -> np.ndarray:
    w = 2 * (guard + train) + 1
    mask = np.ones((w, w), dtype=bool)
    mask[train : train + 2 * guard + 1, train : train + 2 * guard + 1] = False
    return mask


def _ca_noise(power: np.ndarray, guard: int, train: int) -> np.ndarray:
    h = guard + train
    w = 2 * h + 1
    g = 2 * guard + 1
    outer = sliding_window_view(power, (w, w)).sum(axis=(2, 3))
    inner = sliding_window_view(power, (g, g)).sum(axis=(2, 3))
    inner = inner[train : train + outer.shape[0], train : train + outer.shape[1]]
    return (outer - inner) / training_cells(guard, train)


def _os_noise(power: np.ndarray, guard: int, train: int, k: int) -> np.ndarray:
    h = guard + train
    w = 2 * h + 1
    flat_mask = _ring_mask(guard, train).ravel()
    out_rows = power.shape[0] - w + 1
    out = np.empty((out_rows, power.shape[1] - w + 1))
    for r0 in range(0, out_rows, _ROW_CHUNK):
        r1 = min(out_rows, r0 + _ROW_CHUNK)
        win = sliding_window_view(power[r0 : r1 + w - 1], (w, w))
        ring = win.reshape(win.shape[0], win.shape[1], w * w)[..., flat_mask]
        out[r0:r1] = np.partition(ring, k - 1, axis=-1)[..., k - 1]
    return out


def _detect(rdm: RangeDopplerMatrix, noise: np.ndarray, alpha: float, offset: int) -> list[Detection]:
    cut = rdm.power[offset : offset + noise.shape[0], offset : offset + noise.shape[1]]
    hit = cut > alpha * noise
    dets = []
    for r, d in zip(*np.nonzero(hit)):
        p, n = cut[r, d], noise[r, d]
        snr = 10.0 * np.log10(p / n) if n > 0 else np.inf
        dets.append(Detection(int(r + offset), int(d + offset), float(snr)))
    return dets


def _alpha(pfa, offset_db, default) -> float:
    if (pfa is None) == (offset_db is None):
        raise ValueError("give exactly one of pfa or offset_db")
    if offset_db is not None:
        return 10.0 ** (offset_db / 10.0)
    return default(pfa)


def ca_cfar(rdm: RangeDopplerMatrix, guard: int, train: int, pfa: float | None = None, offset_db: float | None = None) -> list[Detection]:
    """Cell-averaging CFAR; the noise estimate is the training-ring mean."""
    _check_window(rdm, guard, train)
    n_t = training_cells(guard, train)
    alpha = _alpha(pfa, offset_db, lambda p: ca_alpha(n_t, p))
    return _detect(rdm, _ca_noise(rdm.power, guard, train), alpha, guard + train)


def os_cfar(
    rdm: RangeDopplerMatrix, guard: int, train: int, k: int, pfa: float | None = None, offset_db: float | None = None
) -> list[Detection]:
    """Order-statistic CFAR; the noise estimate is the ``k``-th smallest training sample."""
    n_t = training_cells(guard, train)
    if not 1 <= k <= n_t:
        raise InvalidRank(f"rank k must lie in [1, {n_t}], got {k}")
    _check_window(rdm, guard, train)
    alpha = _alpha(pfa, offset_db, lambda p: os_alpha(n_t, k, p))
    return _detect(rdm, _os_noise(rdm.power, guard, train, k), alpha, guard + train)


def tested_cells(rdm: RangeDopplerMatrix, guard: int, train: int) -> int:
    w = 2 * (guard + train) + 1
    return (rdm.shape[0] - w + 1) * (rdm.shape[1] - w + 1)


def detections_to_points(dets: list[Detection], rdm: RangeDopplerMatrix) -> np.ndarray:
    """Radar-frame points ``range * [cos(el) sin(az), cos(el) cos(az), sin(el)]``."""
    if not rdm.has_angles:
        raise MissingAngleMap("the range-Doppler matrix carries no angle map")
    out = np.empty((len(dets), 3))
    for n, d in enumerate(dets):
        rng = d.range_bin * rdm.range_res
        az = rdm.azimuth[d.range_bin, d.doppler_bin]
        el = rdm.elevation[d.range_bin, d.doppler_bin]
        out[n] = rng * np.array([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
    return out


def write_rdm(rdm: RangeDopplerMatrix, directory, name: str) -> list[Path]:
    """Write ``name.bin`` (float32 little-endian power), optional angle planes and ``name.json``."""
    directory = Path(directory)
    R, D = rdm.shape
    files = {"power": f"{name}.bin"}
    planes = {"power": rdm.power}
    if rdm.has_angles:
        files.update(azimuth=f"{name}_az.bin", elevation=f"{name}_el.bin")
        planes.update(azimuth=rdm.azimuth, elevation=rdm.elevation)
    header = {
        "header": f"RDM v1 {R} {D} {rdm.range_res!r} {rdm.doppler_res!r}",
        "dtype": "<f4",
        "files": files,
    }
    written = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for key, fname in files.items():
            p = directory / fname
            p.write_bytes(np.asarray(planes[key], dtype="<f4").tobytes())
            written.append(p)
        meta = directory / f"{name}.json"
        meta.write_text(json.dumps(header, indent=2) + "\n")
        written.append(meta)
    except OSError as exc:
        raise IoFailure(f"cannot write RDM {name} to {directory}: {exc}") from exc
    return written


def read_rdm(meta_path) -> RangeDopplerMatrix:
    meta_path = Path(meta_path)
    try:
        meta = json.loads(meta_path.read_text())
        tag, version, R, D, rres, dres = meta["header"].split()
        if tag != "RDM" or version != "v1":
            raise ValueError(f"{meta_path}: unsupported header {meta['header']!r}")
        R, D = int(R), int(D)
        planes = {}
        for key, fname in meta["files"].items():
            raw = np.frombuffer((meta_path.parent / fname).read_bytes(), dtype="<f4")
            if raw.size != R * D:
                raise ValueError(f"{fname}: expected {R * D} values, got {raw.size}")
            planes[key] = raw.reshape(R, D).astype(float)
    except OSError as exc:
        raise IoFailure(f"cannot read RDM {meta_path}: {exc}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"{meta_path}: malformed RDM manifest ({exc})") from exc
    return RangeDopplerMatrix(planes["power"], float(rres), float(dres), planes.get("azimuth"), planes.get("elevation"))
