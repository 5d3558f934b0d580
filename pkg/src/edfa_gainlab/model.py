"""SS-NN gain model: measurement record, feature assembly, network, persistence."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import lecun_normal_init, masked_mse, selu, selu_derivative

N_CHANNELS = 95
UNLOADED_POWER_DBM = -60.0
STD_FLOOR = 1e-6
HIDDEN_SIZES = (200, 200, 100, 100)
SCHEMA_VERSION = 1


class FeatureMode(str, enum.Enum):
    WITH_INTERNAL = "with_internal"
    WITHOUT_INTERNAL = "without_internal"

    @property
    def n_features(self) -> int:
        return 196 if self is FeatureMode.WITH_INTERNAL else 193


# Frozen feature layout. Index ranges are pinned by a golden test.
FEATURE_SLICES = {
    "gain_setting": slice(0, 1),
    "total_input": slice(1, 2),
    "total_output": slice(2, 3),
    "channel_input": slice(3, 3 + N_CHANNELS),
    "loading_mask": slice(3 + N_CHANNELS, 3 + 2 * N_CHANNELS),
    "voa": slice(3 + 2 * N_CHANNELS, 6 + 2 * N_CHANNELS),
}


def dbm_sum(dbm_values) -> float:
    """Total power in dBm of channels given in dBm (linear-domain sum)."""
    mw = np.power(10.0, np.asarray(dbm_values, dtype=np.float64) / 10.0)
    return float(10.0 * np.log10(mw.sum()))


def _opt_float(v: float):
    return v if math.isfinite(v) else None


def _nan_if_none(v) -> float:
    return float("nan") if v is None else float(v)


@dataclass
class GainMeasurement:
    """One gain-spectrum observation of an amplifier.

    Per-channel arrays have 95 entries. ``channel_input_dbm`` and
    ``channel_gain_db`` are NaN on unloaded channels; ``channel_gain_db`` is
    all-NaN for unlabeled records. The VOA fields are NaN when a device does
    not expose internal readings.
    """

    gain_setting_db: float
    channel_input_dbm: np.ndarray
    loading_mask: np.ndarray
    total_input_dbm: float
    total_output_dbm: float
    voa_input_dbm: float
    voa_output_dbm: float
    voa_attenuation_db: float
    channel_gain_db: np.ndarray
    device_id: str
    loading_kind: str = "random"
    pattern_id: Optional[int] = None
    measurement_id: str = ""

    def __post_init__(self):
        self.channel_input_dbm = np.asarray(self.channel_input_dbm, dtype=np.float64)
        self.loading_mask = np.asarray(self.loading_mask).astype(bool)
        self.channel_gain_db = np.asarray(self.channel_gain_db, dtype=np.float64)
        for name in ("channel_input_dbm", "loading_mask", "channel_gain_db"):
            if getattr(self, name).shape != (N_CHANNELS,):
                raise ValueError(f"{name} must have {N_CHANNELS} entries")
        if self.loading_kind not in ("random", "goalpost"):
            raise ValueError(f"unknown loading_kind {self.loading_kind!r}")

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(np.isfinite(self.channel_gain_db[self.loading_mask])))

    def to_json(self) -> dict:
        def opt(a):
            return [None if not math.isfinite(v) else v for v in a.tolist()]

        return {
            "measurement_id": self.measurement_id,
            "device_id": self.device_id,
            "gain_setting_db": self.gain_setting_db,
            "channel_input_dbm": opt(self.channel_input_dbm),
            "loading_mask": [int(v) for v in self.loading_mask],
            "total_input_dbm": self.total_input_dbm,
            "total_output_dbm": self.total_output_dbm,
            "voa_input_dbm": _opt_float(self.voa_input_dbm),
            "voa_output_dbm": _opt_float(self.voa_output_dbm),
            "voa_attenuation_db": _opt_float(self.voa_attenuation_db),
            "channel_gain_db": opt(self.channel_gain_db),
            "loading_kind": ({"kind": "random"} if self.loading_kind == "random"
                             else {"kind": "goalpost", "pattern_id": self.pattern_id}),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GainMeasurement":
        def arr(values):
            return np.array([np.nan if v is None else v for v in values], dtype=np.float64)

        kind = d["loading_kind"]
        return cls(
            gain_setting_db=float(d["gain_setting_db"]),
            channel_input_dbm=arr(d["channel_input_dbm"]),
            loading_mask=np.array(d["loading_mask"], dtype=bool),
            total_input_dbm=float(d["total_input_dbm"]),
            total_output_dbm=float(d["total_output_dbm"]),
            voa_input_dbm=_nan_if_none(d.get("voa_input_dbm")),
            voa_output_dbm=_nan_if_none(d.get("voa_output_dbm")),
            voa_attenuation_db=_nan_if_none(d.get("voa_attenuation_db")),
            channel_gain_db=arr(d["channel_gain_db"]),
            device_id=str(d["device_id"]),
            loading_kind=kind["kind"],
            pattern_id=kind.get("pattern_id"),
            measurement_id=str(d.get("measurement_id", "")),
        )


def assemble_features(m: GainMeasurement, mode: FeatureMode) -> np.ndarray:
    mode = FeatureMode(mode)
    powers = np.where(m.loading_mask, m.channel_input_dbm, UNLOADED_POWER_DBM)
    parts = [
        [m.gain_setting_db, m.total_input_dbm, m.total_output_dbm],
        powers,
        m.loading_mask.astype(np.float64),
    ]
    if mode is FeatureMode.WITH_INTERNAL:
        voa = [m.voa_input_dbm, m.voa_output_dbm, m.voa_attenuation_db]
        if not all(math.isfinite(v) for v in voa):
            raise ValueError(f"measurement {m.measurement_id!r} has no internal VOA readings; "
                             f"use {FeatureMode.WITHOUT_INTERNAL.value} features")
        parts.append(voa)
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def feature_matrix(measurements: Sequence[GainMeasurement], mode: FeatureMode) -> np.ndarray:
    return np.stack([assemble_features(m, mode) for m in measurements])


def target_arrays(measurements: Sequence[GainMeasurement]) -> tuple[np.ndarray, np.ndarray]:
    """Stack gains and masks; gains on unloaded channels stay NaN."""
    gains = np.stack([m.channel_gain_db for m in measurements])
    masks = np.stack([m.loading_mask for m in measurements])
    return gains, masks


@dataclass
class Normalizer:
    """Z-score statistics for input features and per-channel output gains."""

    means: np.ndarray
    stds: np.ndarray
    out_means: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))
    out_stds: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))

    @classmethod
    def fit_inputs(cls, features: np.ndarray) -> "Normalizer":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or len(features) == 0:
            raise ValueError("need a non-empty 2-D feature matrix")
        return cls(features.mean(axis=0), np.maximum(features.std(axis=0), STD_FLOOR))

    def fit_outputs(self, gains: np.ndarray, masks: np.ndarray) -> "Normalizer":
        """Return a copy with output statistics pooled over all loaded entries.

        Every channel gets the same mean and std, so the spectral shape stays
        in the standardized targets and the network has to represent it.
        With per-channel statistics the shape would live only in the output
        biases, and one-shot transfer could not move it.
        """
        loaded = np.asarray(gains, dtype=np.float64)[np.asarray(masks).astype(bool)]
        if loaded.size == 0:
            raise ValueError("no loaded channels to fit output statistics on")
        n_out = gains.shape[1]
        return Normalizer(self.means.copy(), self.stds.copy(),
                          np.full(n_out, float(loaded.mean())),
                          np.full(n_out, max(float(loaded.std()), STD_FLOOR)))

    def transform(self, features):
        return (np.asarray(features, dtype=np.float64) - self.means) / self.stds

    def inverse_transform(self, z):
        return np.asarray(z, dtype=np.float64) * self.stds + self.means

    def transform_outputs(self, gains_db):
        return (np.asarray(gains_db, dtype=np.float64) - self.out_means) / self.out_stds

    def inverse_transform_outputs(self, z):
        return np.asarray(z, dtype=np.float64) * self.out_stds + self.out_means


@dataclass
class SsnnModel:
    """Five affine layers, SELU on the four hidden ones, identity output.

    ``weights[k]`` has shape ``(fan_out, fan_in)``.
    """

    weights: list
    biases: list
    feature_mode: FeatureMode
    normalizer: Normalizer
    metadata: dict = field(default_factory=dict)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(w.shape[1], w.shape[0]) for w in self.weights]

    def copy(self) -> "SsnnModel":
        return copy.deepcopy(self)

    def predict_gains(self, measurements: Sequence[GainMeasurement]) -> np.ndarray:
        return forward(self, feature_matrix(measurements, self.feature_mode))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


def build_model(feature_mode: FeatureMode, normalizer: Normalizer, rng: np.random.Generator,
                hidden_sizes: Sequence[int] = HIDDEN_SIZES, n_outputs: int = N_CHANNELS,
                n_inputs: Optional[int] = None) -> SsnnModel:
    """LeCun-normal weights, zero biases."""
    feature_mode = FeatureMode(feature_mode)
    n_in = feature_mode.n_features if n_inputs is None else n_inputs
    sizes = [n_in, *hidden_sizes, n_outputs]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(lecun_normal_init(fan_in, fan_out, fan_in, rng))
        biases.append(np.zeros(fan_out))
    return SsnnModel(weights, biases, feature_mode, normalizer)


def forward_normalized(model: SsnnModel, z: np.ndarray):
    """Run the network on standardized inputs.

    Returns ``(output, pre_activations, activations)`` where ``activations[0]``
    is the input and ``pre_activations[k]`` feeds layer ``k``'s nonlinearity.
    """
    a = z
    pres, acts = [], [a]
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        pre = a @ w.T + b
        pres.append(pre)
        a = pre if k == last else selu(pre)
        acts.append(a)
    return a, pres, acts


def _check_inputs(model: SsnnModel, raw_features) -> np.ndarray:
    x = np.asarray(raw_features, dtype=np.float64)
    if x.shape[-1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} features ({model.feature_mode.value}), "
                         f"got {x.shape[-1]}")
    return x


def forward(model: SsnnModel, raw_features) -> np.ndarray:
    """Predicted per-channel gain in dB for raw (unstandardized) features."""
    x = _check_inputs(model, raw_features)
    out, _, _ = forward_normalized(model, model.normalizer.transform(x))
    return model.normalizer.inverse_transform_outputs(out)


def backward(model: SsnnModel, raw_features, target_gain_db, mask):
    """Gradients of the masked MSE (normalized output space).

    Returns ``(grads, loss)`` with ``grads`` a list of ``(dW, db)`` per layer.
    Batches are pooled: the loss averages over every loaded channel of every
    sample.
    """
    x = _check_inputs(model, raw_features)
    mask = np.asarray(mask).astype(bool)
    n_active = int(mask.sum())
    if n_active == 0:
        raise ValueError("mask has no active entries")
    single = x.ndim == 1
    if single:
        x = x[None, :]
        mask = mask[None, :]
        target_gain_db = np.asarray(target_gain_db, dtype=np.float64)[None, :]
    target = np.where(mask, model.normalizer.transform_outputs(
        np.where(mask, target_gain_db, 0.0)), 0.0)

    out, pres, acts = forward_normalized(model, model.normalizer.transform(x))
    loss = masked_mse(out, target, mask)

    delta = np.where(mask, 2.0 * (out - target) / n_active, 0.0)
    grads = [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ model.weights[k]) * selu_derivative(pres[k - 1])
    return grads, loss


class ModelLoadError(Exception):
    """Model file could not be parsed or is structurally invalid."""


class SchemaVersionError(ModelLoadError):
    pass


def model_to_json(model: SsnnModel) -> dict:
    n = model.normalizer
    return {
        "schema_version": SCHEMA_VERSION,
        "feature_mode": model.feature_mode.value,
        "layers": [
            {"rows": w.shape[0], "cols": w.shape[1],
             "weights": w.reshape(-1).tolist(), "biases": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
        "normalizer": {"means": n.means.tolist(), "stds": n.stds.tolist(),
                       "out_means": n.out_means.tolist(), "out_stds": n.out_stds.tolist()},
        "metadata": model.metadata,
    }


def model_from_json(doc: dict) -> SsnnModel:
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ModelLoadError("not a model document (missing schema_version)")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported model schema_version {doc['schema_version']!r}; "
                                 f"this build reads version {SCHEMA_VERSION}")
    try:
        weights, biases = [], []
        for layer in doc["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.array(layer["weights"], dtype=np.float64)
            b = np.array(layer["biases"], dtype=np.float64)
            if w.size != rows * cols or b.shape != (rows,):
                raise ModelLoadError(f"layer size mismatch: {rows}x{cols}")
            weights.append(w.reshape(rows, cols))
            biases.append(b)
        nd = doc["normalizer"]
        normalizer = Normalizer(*(np.array(nd[k], dtype=np.float64)
                                  for k in ("means", "stds", "out_means", "out_stds")))
        model = SsnnModel(weights, biases, FeatureMode(doc["feature_mode"]), normalizer,
                          dict(doc.get("metadata", {})))
    except ModelLoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"malformed model document: {exc}") from exc
    for w_prev, w in zip(model.weights, model.weights[1:]):
        if w.shape[1] != w_prev.shape[0]:
            raise ModelLoadError("consecutive layer dimensions do not chain")
    if normalizer.means.shape != (model.n_inputs,):
        raise ModelLoadError("normalizer length does not match the input layer")
    return model


def save_model(model: SsnnModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)) + "\n", encoding="utf-8")


def load_model(path) -> SsnnModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelLoadError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path} is not valid JSON: {exc}") from exc
    return model_from_json(doc)

