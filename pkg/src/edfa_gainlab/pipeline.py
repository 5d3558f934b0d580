"""Training procedures: DAE pretraining, supervised base training, one-shot transfer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import (
    FeatureMode,
    GainMeasurement,
    Normalizer,
    SsnnModel,
    backward,
    build_model,
    feature_matrix,
    target_arrays,
)
from .numerics import AdamState, adam_step, lecun_normal_init, selu, selu_derivative
from .simulator import Dataset

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 1800
    learning_rate: float = 1e-3
    noise_sigma: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 1200
    learning_rate: float = 1e-3
    batch_size: int = 32
    labeled_budget: int = 256
    freeze_input_layer: bool = True
    seed: int = 0


@dataclass
class TransferConfig:
    epochs: int = 10000
    output_layer_lr: float = 1e-3
    layer_decay_factor: float = 0.1
    measurement_budget: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.layer_decay_factor <= 1:
            raise ValueError("layer_decay_factor must lie in (0, 1]")


@dataclass
class PretrainResult:
    """Encoder weights of the input layer plus the input normalizer."""

    weights: np.ndarray
    bias: np.ndarray
    normalizer: Normalizer
    losses: list = field(default_factory=list)
    decoder_weights: Optional[np.ndarray] = None
    decoder_bias: Optional[np.ndarray] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def dae_reconstruction_mse(z: np.ndarray, enc_w, enc_b, dec_w, dec_b) -> float:
    """Reconstruction MSE of standardized inputs through encoder/decoder."""
    recon = selu(z @ enc_w.T + enc_b) @ dec_w.T + dec_b
    return float(np.mean((recon - z) ** 2))


def pretrain_dae(unlabeled_features, config: PretrainConfig,
                 hidden_size: int = 200) -> PretrainResult:
    """Train the input layer as a denoising autoencoder.

    The normalizer is fit on ``unlabeled_features``. Corrupted inputs are
    ``z + N(0, noise_sigma)`` with fresh noise every epoch; the decoder is a
    single affine layer and is returned only for diagnostics.
    """
    x = np.asarray(unlabeled_features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("pretraining needs a non-empty set of feature vectors")
    normalizer = Normalizer.fit_inputs(x)
    z = normalizer.transform(x)
    n, d = z.shape

    rng = np.random.default_rng(config.seed)
    enc_w = lecun_normal_init(d, hidden_size, d, rng)
    enc_b = np.zeros(hidden_size)
    dec_w = lecun_normal_init(hidden_size, d, hidden_size, rng)
    dec_b = np.zeros(d)
    params = [enc_w, enc_b, dec_w, dec_b]
    states = [AdamState.zeros_like(p) for p in params]

    losses = []
    for epoch in range(config.epochs):
        noisy = z + rng.normal(0.0, config.noise_sigma, size=z.shape)
        total, count = 0.0, 0
        for idx in _batches(n, config.batch_size, rng):
            enc_w, enc_b, dec_w, dec_b = params
            xin, clean = noisy[idx], z[idx]
            pre = xin @ enc_w.T + enc_b
            h = selu(pre)
            recon = h @ dec_w.T + dec_b
            err = recon - clean
            total += float(np.sum(err * err))
            count += err.size
            d_out = 2.0 * err / err.size
            d_h = (d_out @ dec_w) * selu_derivative(pre)
            grads = [d_h.T @ xin, d_h.sum(axis=0), d_out.T @ h, d_out.sum(axis=0)]
            params = [adam_step(p, g, s, config.learning_rate)
                      for p, g, s in zip(params, grads, states)]
        losses.append(total / count)

    enc_w, enc_b, dec_w, dec_b = params
    return PretrainResult(enc_w, enc_b, normalizer, losses, dec_w, dec_b)


def labeled_training_set(dataset: Dataset, budget: int) -> list:
    """First ``budget`` random-loading labeled training measurements."""
    pool = [m for m in dataset.train if m.loading_kind == "random" and m.is_labeled]
    if budget > len(pool):
        raise ValueError(f"labeled_budget {budget} exceeds the {len(pool)} available "
                         "random-loading training measurements")
    return pool[:budget]


def train_base(dataset: Dataset, pretrained: Optional[PretrainResult], config: TrainConfig,
               feature_mode: FeatureMode = FeatureMode.WITH_INTERNAL):
    """Supervised training of the source model.

    With ``pretrained`` the input layer starts from the encoder (and stays
    fixed when ``freeze_input_layer``). Without it the normalizer is fit on
    the labeled set and the input layer is a trainable random init.

    Returns ``(model, losses)`` where ``losses`` holds the mean training loss
    of every epoch.
    """
    feature_mode = FeatureMode(feature_mode)
    labeled = labeled_training_set(dataset, config.labeled_budget)
    x = feature_matrix(labeled, feature_mode)
    gains, masks = target_arrays(labeled)

    rng = np.random.default_rng(config.seed)
    if pretrained is not None:
        if pretrained.weights.shape[1] != x.shape[1]:
            raise ValueError(f"pretrained encoder expects {pretrained.weights.shape[1]} "
                             f"features, {feature_mode.value} gives {x.shape[1]}")
        normalizer = pretrained.normalizer.fit_outputs(gains, masks)
    else:
        normalizer = Normalizer.fit_inputs(x).fit_outputs(gains, masks)
    model = build_model(feature_mode, normalizer, rng)
    frozen = False
    if pretrained is not None:
        model.weights[0] = pretrained.weights.copy()
        model.biases[0] = pretrained.bias.copy()
        frozen = config.freeze_input_layer

    first = 1 if frozen else 0
    states = {k: (AdamState.zeros_like(model.weights[k]), AdamState.zeros_like(model.biases[k]))
              for k in range(first, len(model.weights))}
    losses = []
    for epoch in range(config.epochs):
        total, batches = 0.0, 0
        for idx in _batches(len(x), config.batch_size, rng):
            grads, loss = backward(model, x[idx], gains[idx], masks[idx])
            for k, (sw, sb) in states.items():
                model.weights[k] = adam_step(model.weights[k], grads[k][0], sw, config.learning_rate)
                model.biases[k] = adam_step(model.biases[k], grads[k][1], sb, config.learning_rate)
            total += loss
            batches += 1
        losses.append(total / batches)
        if epoch % 200 == 0:
            log.debug("base epoch %d loss %.6f", epoch, losses[-1])

    model.metadata = {
        "kind": "base",
        "device_id": labeled[0].device_id,
        "input_layer_init": "dae" if pretrained is not None else "random",
        "input_layer_frozen": frozen,
        "train_seed": config.seed,
        "train_epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "labeled_budget": config.labeled_budget,
        "feature_mode": feature_mode.value,
    }
    return model, losses


def layer_lr_schedule(output_layer_lr: float, num_layers: int, decay_factor: float) -> list:
    """Geometric per-layer rates, input layer first, output layer last."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if not output_layer_lr > 0 or not decay_factor > 0:
        raise ValueError("learning rate and decay factor must be positive")
    rates = [float(output_layer_lr)]
    for _ in range(num_layers - 1):
        rates.append(rates[-1] * decay_factor)
    return rates[::-1]


StepFn = Callable[[np.ndarray, np.ndarray, AdamState, float], np.ndarray]


def one_shot_transfer(source: SsnnModel, target_measurements: Sequence[GainMeasurement],
                      config: TransferConfig, step_fn: StepFn = adam_step):
    """Adapt ``source`` to a new device from a handful of labeled measurements.

    All layers train with their own Adam state at the rates from
    :func:`layer_lr_schedule`; the source normalizer is kept. ``step_fn`` lets
    tests observe the optimizer calls.

    Returns ``(adapted_model, losses)``.
    """
    targets = list(target_measurements)
    if not targets:
        raise ValueError("no target measurements given")
    if len(targets) != config.measurement_budget:
        raise ValueError(f"expected {config.measurement_budget} measurement(s), "
                         f"got {len(targets)}")
    if not all(np.all(np.isfinite(w)) for w in source.weights):
        raise ValueError("source model has non-finite weights")
    for m in targets:
        if not m.is_labeled:
            raise ValueError(f"measurement {m.measurement_id!r} has no gain labels")
    try:
        x = feature_matrix(targets, source.feature_mode)
    except ValueError as exc:
        raise ValueError(f"feature-mode mismatch: {exc}") from exc
    if x.shape[1] != source.n_inputs:
        raise ValueError(f"feature-mode mismatch: model input layer takes {source.n_inputs} "
                         f"features, measurements assemble to {x.shape[1]} "
                         f"({source.feature_mode.value})")
    gains, masks = target_arrays(targets)

    model = source.copy()
    rates = layer_lr_schedule(config.output_layer_lr, len(model.weights),
                              config.layer_decay_factor)
    states = [(AdamState.zeros_like(w), AdamState.zeros_like(b))
              for w, b in zip(model.weights, model.biases)]
    losses = []
    for epoch in range(config.epochs):
        grads, loss = backward(model, x, gains, masks)
        for k, (sw, sb) in enumerate(states):
            model.weights[k] = step_fn(model.weights[k], grads[k][0], sw, rates[k])
            model.biases[k] = step_fn(model.biases[k], grads[k][1], sb, rates[k])
        losses.append(loss)

    model.metadata = {
        "kind": "transfer",
        "source_device_id": source.metadata.get("device_id"),
        "target_device_id": targets[0].device_id,
        "target_measurement_ids": [m.measurement_id for m in targets],
        "transfer_epochs": config.epochs,
        "layer_learning_rates": rates,
        "feature_mode": source.feature_mode.value,
        "source_metadata": source.metadata,
    }
    return model, losses
