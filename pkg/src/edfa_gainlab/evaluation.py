"""Error metrics, box-plot summaries and the source x target transfer matrix."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .model import GainMeasurement, SsnnModel, target_arrays
from .pipeline import TransferConfig, one_shot_transfer
from .simulator import Dataset, EdfaProfile

LOADING_KINDS = ("random", "goalpost")
SUMMARY_COLUMNS = ("group", "mean", "median", "q1", "q3", "min", "max", "count")


class GainPredictor(Protocol):
    """Anything that maps measurements to predicted per-channel gain (dB).

    :class:`SsnnModel` satisfies it; a baseline model only needs this method.
    """

    def predict_gains(self, measurements: Sequence[GainMeasurement]) -> np.ndarray: ...


def measurement_mae(pred, truth, mask) -> float:
    """Mean absolute error in dB over loaded channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if not (pred.shape == truth.shape == mask.shape):
        raise ValueError("pred, truth and mask must have the same shape")
    if not mask.any():
        raise ValueError("mask has no loaded channel")
    return float(np.mean(np.abs(pred[mask] - truth[mask])))


@dataclass
class MaeSummary:
    values: list
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    count: int
    labels: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: Sequence[float], **labels) -> "MaeSummary":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("cannot summarize an empty list")
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
        return cls(v.tolist(), float(v.mean()), float(med), float(q1), float(q3),
                   float(v.min()), float(v.max()), int(v.size), dict(labels))

    @property
    def group(self) -> str:
        return "/".join(f"{k}={v}" for k, v in self.labels.items())

    def row(self) -> list:
        return [self.group, self.mean, self.median, self.q1, self.q3, self.min, self.max,
                self.count]


def per_measurement_mae(model: GainPredictor, measurements: Sequence[GainMeasurement]) -> list:
    preds = np.asarray(model.predict_gains(measurements), dtype=np.float64)
    gains, masks = target_arrays(measurements)
    return [measurement_mae(p, g, m) for p, g, m in zip(preds, gains, masks)]


def evaluate_model(model: GainPredictor, measurements: Sequence[GainMeasurement],
                   **labels) -> dict:
    """MAE summary per loading kind.

    Returns ``{"random": MaeSummary | None, "goalpost": MaeSummary | None}``;
    a kind absent from ``measurements`` maps to ``None``.
    """
    measurements = list(measurements)
    if not measurements:
        raise ValueError("evaluation split is empty")
    out: dict = {}
    for kind in LOADING_KINDS:
        subset = [m for m in measurements if m.loading_kind == kind]
        out[kind] = (MaeSummary.from_values(per_measurement_mae(model, subset),
                                            loading=kind, **labels)
                     if subset else None)
    return out


def mean_mae(model: GainPredictor, measurements: Sequence[GainMeasurement]) -> float:
    return float(np.mean(per_measurement_mae(model, measurements)))


@dataclass
class TlMatrix:
    """Entry ``(i, j)``: mean MAE of source ``i`` transferred to target ``j``."""

    device_ids: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.device_ids)
        if self.values.shape != (n, n):
            raise ValueError(f"matrix shape {self.values.shape} does not match {n} devices")

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.values)))

    def off_diagonal_mean(self) -> float:
        n = len(self.device_ids)
        if n < 2:
            return float("nan")
        return float(self.values[~np.eye(n, dtype=bool)].mean())


@dataclass
class FleetMember:
    profile: EdfaProfile
    dataset: Dataset
    base_model: Optional[SsnnModel]


def transfer_measurements(dataset: Dataset, budget: int = 1) -> list:
    """The first ``budget`` random-loading training measurements by stable index."""
    pool = [m for m in dataset.train if m.loading_kind == "random" and m.is_labeled]
    if len(pool) < budget:
        raise ValueError(f"need {budget} random training measurement(s), found {len(pool)}")
    return pool[:budget]


def _tl_cell(source: FleetMember, target: FleetMember, config: TransferConfig) -> float:
    adapted, _ = one_shot_transfer(source.base_model,
                                   transfer_measurements(target.dataset,
                                                         config.measurement_budget),
                                   config)
    return mean_mae(adapted, target.dataset.test_random)


def run_tl_matrix(fleet: Sequence[FleetMember], tl_config: TransferConfig,
                  jobs: int = 1) -> TlMatrix:
    """Transfer every base model to every device; evaluate on random test splits."""
    fleet = list(fleet)
    if not fleet:
        raise ValueError("fleet is empty")
    for member in fleet:
        if member.base_model is None:
            raise ValueError(f"no base model for device {member.profile.device_id}")
    n = len(fleet)
    cells = [(i, j) for i in range(n) for j in range(n)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda ij: _tl_cell(fleet[ij[0]], fleet[ij[1]], tl_config),
                                    cells))
    else:
        results = [_tl_cell(fleet[i], fleet[j], tl_config) for i, j in cells]
    values = np.zeros((n, n))
    for (i, j), v in zip(cells, results):
        values[i, j] = v
    return TlMatrix([m.profile.device_id for m in fleet], values)


# --- CSV outputs ------------------------------------------------------------

def write_summary_csv(summaries: Sequence[MaeSummary], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerow([repr(v) if isinstance(v, float) else v for v in s.row()])


def read_summary_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in SUMMARY_COLUMNS[1:-1]:
            r[k] = float(r[k])
        r["count"] = int(r["count"])
    return rows


def write_tl_matrix_csv(matrix: TlMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source\\target", *matrix.device_ids])
        for dev, row in zip(matrix.device_ids, matrix.values):
            w.writerow([dev, *(repr(float(v)) for v in row)])


def read_tl_matrix_csv(path) -> TlMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    if [r[0] for r in rows[1:]] != ids:
        raise ValueError(f"{path}: row and column device ids differ")
    return TlMatrix(ids, [[float(v) for v in r[1:]] for r in rows[1:]])


def write_loss_curve(losses: Sequence[float], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(losses, 1):
            w.writerow([epoch, repr(float(loss))])


def read_loss_curve(path) -> list[float]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]
