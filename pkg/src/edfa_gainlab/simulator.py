"""Synthetic EDFA oracle.

Devices share an erbium-like base ripple shape. Each family (booster,
preamp) scales it differently and biases the tilt differently; each device
jitters the shape parameters. Same-type devices are therefore close to each
other and cross-type pairs differ more, which is the regime the transfer
experiments probe.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import N_CHANNELS, GainMeasurement, dbm_sum

CHANNEL_SPACING_GHZ = 50.0
FIRST_CENTER_THZ = 191.35
CENTER_CHANNEL = 47
MAX_RIPPLE_P2P_DB = 3.0
GAIN_RANGE_DB = (10.0, 30.0)
DEFAULT_LAUNCH_DBM = {"booster": -4.0, "preamp": -10.0}
EDFA_TYPES = ("booster", "preamp")

# Goalpost blocks: 7 blocks of 12 channels followed by one of 11.
BLOCK_EDGES = tuple(range(0, 85, 12)) + (N_CHANNELS,)
GOALPOST_CATALOG_VERSION = 1
GOALPOST_CATALOG: tuple[tuple[int, ...], ...] = tuple(
    combo for size in range(1, 5) for combo in itertools.combinations(range(8), size)
)

# Nominal base-shape components: (amplitude dB, period channels, phase rad)
# and (amplitude dB, center channel, width channels).
_BASE_SINUSOIDS = ((0.30, 110.0, 0.4), (0.12, 37.0, 1.9), (0.05, 13.0, -0.7))
_BASE_BUMPS = ((0.35, 14.0, 5.0), (-0.25, 62.0, 8.0))
_FAMILY = {
    # ripple scale range, tilt range (dB across the band)
    "booster": {"scale": (0.85, 1.1), "tilt": (0.05, 0.25)},
    "preamp": {"scale": (1.3, 1.6), "tilt": (-0.25, -0.05)},
}


def channel_frequencies_thz() -> np.ndarray:
    return FIRST_CENTER_THZ + np.arange(N_CHANNELS) * CHANNEL_SPACING_GHZ / 1000.0


@dataclass
class EdfaProfile:
    device_id: str
    edfa_type: str
    ripple_coefficients: dict
    tilt_db_per_band: float
    saturation_input_dbm: float
    compression_coefficient_db_per_db: float
    loading_coupling: float
    measurement_noise_sigma_db: float = 0.05
    seed: int = 0
    launch_power_dbm: float = -4.0
    voa_headroom_db: float = 3.0

    def ripple(self) -> np.ndarray:
        return ripple_shape(self.ripple_coefficients)

    def static_shape(self) -> np.ndarray:
        """Ripple plus linear tilt, before leveling."""
        ch = np.arange(N_CHANNELS)
        return self.ripple() + self.tilt_db_per_band * (ch - CENTER_CHANNEL) / (N_CHANNELS - 1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EdfaProfile":
        return cls(**d)


def ripple_shape(coeffs: dict) -> np.ndarray:
    ch = np.arange(N_CHANNELS, dtype=np.float64)
    out = np.zeros(N_CHANNELS)
    for amp, period, phase in coeffs["sinusoids"]:
        out += amp * np.sin(2.0 * np.pi * ch / period + phase)
    for amp, center, width in coeffs["bumps"]:
        out += amp * np.exp(-0.5 * ((ch - center) / width) ** 2)
    return out


def make_profile(seed: int, edfa_type: str, device_id: Optional[str] = None,
                 noise_sigma_db: float = 0.05) -> EdfaProfile:
    """Deterministically draw a device from its family distribution."""
    if edfa_type not in _FAMILY:
        raise ValueError(f"unknown edfa_type {edfa_type!r}")
    fam = _FAMILY[edfa_type]
    rng = np.random.default_rng([int(seed), EDFA_TYPES.index(edfa_type)])
    scale = rng.uniform(*fam["scale"])
    sinusoids = [
        [scale * amp * rng.uniform(0.9, 1.1), period * rng.uniform(0.95, 1.05),
         phase + rng.normal(0.0, 0.1)]
        for amp, period, phase in _BASE_SINUSOIDS
    ]
    bumps = [
        [scale * amp * rng.uniform(0.9, 1.1), center + rng.normal(0.0, 1.0),
         width * rng.uniform(0.9, 1.1)]
        for amp, center, width in _BASE_BUMPS
    ]
    coeffs = {"sinusoids": sinusoids, "bumps": bumps}
    p2p = np.ptp(ripple_shape(coeffs))
    if p2p > MAX_RIPPLE_P2P_DB:
        shrink = MAX_RIPPLE_P2P_DB / p2p
        for comp in sinusoids + bumps:
            comp[0] *= shrink
    return EdfaProfile(
        device_id=device_id or f"{edfa_type}-{seed}",
        edfa_type=edfa_type,
        ripple_coefficients=coeffs,
        tilt_db_per_band=float(rng.uniform(*fam["tilt"])),
        saturation_input_dbm=float(rng.uniform(8.0, 12.0) if edfa_type == "booster"
                                   else rng.uniform(2.0, 6.0)),
        compression_coefficient_db_per_db=float(rng.uniform(0.1, 0.4)),
        loading_coupling=float(rng.uniform(-0.5, 0.5)),
        measurement_noise_sigma_db=noise_sigma_db,
        seed=int(seed),
        launch_power_dbm=DEFAULT_LAUNCH_DBM[edfa_type],
    )


@dataclass
class LoadingConfig:
    """Channel plan. ``channel_power_dbm`` is NaN on unloaded channels."""

    mask: np.ndarray
    kind: str
    channel_power_dbm: np.ndarray
    pattern_id: Optional[int] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != (N_CHANNELS,):
            raise ValueError(f"mask must have {N_CHANNELS} entries")
        if not self.mask.any():
            raise ValueError("loading has no active channel")

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())


def _flat_power(mask: np.ndarray, launch_power_dbm: float) -> np.ndarray:
    return np.where(mask, float(launch_power_dbm), np.nan)


def gen_random_loading(rng: np.random.Generator, launch_power_dbm: float = -4.0) -> LoadingConfig:
    """Active count uniform on 1..95, then a uniform subset of that size."""
    n = int(rng.integers(1, N_CHANNELS + 1))
    mask = np.zeros(N_CHANNELS, dtype=bool)
    mask[rng.choice(N_CHANNELS, size=n, replace=False)] = True
    return LoadingConfig(mask, "random", _flat_power(mask, launch_power_dbm))


def goalpost_mask(pattern_id: int) -> np.ndarray:
    if not 0 <= pattern_id < len(GOALPOST_CATALOG):
        raise ValueError(f"unknown goalpost pattern_id {pattern_id}; "
                         f"catalog has {len(GOALPOST_CATALOG)} entries")
    mask = np.zeros(N_CHANNELS, dtype=bool)
    for block in GOALPOST_CATALOG[pattern_id]:
        mask[BLOCK_EDGES[block]:BLOCK_EDGES[block + 1]] = True
    return mask


def gen_goalpost_loading(pattern_id: int, launch_power_dbm: float = -4.0) -> LoadingConfig:
    mask = goalpost_mask(pattern_id)
    return LoadingConfig(mask, "goalpost", _flat_power(mask, launch_power_dbm), pattern_id)


def simulate_measurement(profile: EdfaProfile, loading: LoadingConfig, gain_setting_db: float,
                         rng: np.random.Generator, measurement_id: str = "") -> GainMeasurement:
    lo, hi = GAIN_RANGE_DB
    if not lo <= gain_setting_db <= hi:
        raise ValueError(f"gain setting {gain_setting_db} dB outside [{lo}, {hi}]")
    mask = loading.mask
    if not mask.any():
        raise ValueError("loading has no active channel")
    p_in = np.where(mask, loading.channel_power_dbm, np.nan)
    total_in = dbm_sum(p_in[mask])

    n_active = int(mask.sum())
    raw = (gain_setting_db + profile.voa_headroom_db + profile.static_shape()
           + profile.loading_coupling * (n_active / N_CHANNELS - 0.5)
           - profile.compression_coefficient_db_per_db
           * max(0.0, total_in - profile.saturation_input_dbm))
    # Constant-gain leveling: the VOA removes the excess mean gain.
    attenuation = float(raw[mask].mean() - gain_setting_db)
    leveled = raw - attenuation
    noise = rng.normal(0.0, 1.0, size=N_CHANNELS) * profile.measurement_noise_sigma_db
    gains = np.where(mask, leveled + noise, np.nan)

    voa_in = dbm_sum(p_in[mask] + raw[mask])
    return GainMeasurement(
        gain_setting_db=float(gain_setting_db),
        channel_input_dbm=p_in,
        loading_mask=mask.copy(),
        total_input_dbm=total_in,
        total_output_dbm=dbm_sum(p_in[mask] + gains[mask]),
        voa_input_dbm=voa_in,
        voa_output_dbm=voa_in - attenuation,
        voa_attenuation_db=attenuation,
        channel_gain_db=gains,
        device_id=profile.device_id,
        loading_kind=loading.kind,
        pattern_id=loading.pattern_id,
        measurement_id=measurement_id,
    )


@dataclass
class DatasetSpec:
    gain_settings_db: list = field(default_factory=lambda: [15.0, 20.0, 25.0])
    random_count: int = 1100
    goalpost_count: int = 270
    unlabeled_count: int = 512
    test_fraction_random: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("random_count", "goalpost_count", "unlabeled_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.test_fraction_random <= 1.0:
            raise ValueError("test_fraction_random must lie in [0, 1]")


@dataclass
class Dataset:
    unlabeled: list
    train: list
    test_random: list
    test_goalpost: list

    @property
    def test(self) -> list:
        return self.test_random + self.test_goalpost

    def splits(self) -> dict:
        return {"unlabeled": self.unlabeled, "train": self.train,
                "test_random": self.test_random, "test_goalpost": self.test_goalpost}


def build_dataset(profile: EdfaProfile, spec: DatasetSpec) -> Dataset:
    """Generate the four splits for one device.

    Goalpost measurements cycle through the catalog when more are requested
    than there are patterns; repeats differ only by measurement noise.
    """
    rng = np.random.default_rng([int(spec.seed), int(profile.seed),
                                 EDFA_TYPES.index(profile.edfa_type)])
    launch = profile.launch_power_dbm
    ds = Dataset([], [], [], [])
    for g in spec.gain_settings_db:
        tag = f"{profile.device_id}/g{g:g}"
        randoms = [simulate_measurement(profile, gen_random_loading(rng, launch), g, rng,
                                        f"{tag}/r{k:05d}")
                   for k in range(spec.random_count)]
        n_test = int(round(spec.test_fraction_random * spec.random_count))
        test_idx = set(rng.choice(spec.random_count, size=n_test, replace=False).tolist())
        for k, m in enumerate(randoms):
            (ds.test_random if k in test_idx else ds.train).append(m)
        for k in range(spec.goalpost_count):
            pid = k % len(GOALPOST_CATALOG)
            ds.test_goalpost.append(simulate_measurement(
                profile, gen_goalpost_loading(pid, launch), g, rng, f"{tag}/p{k:05d}"))
        for k in range(spec.unlabeled_count):
            m = simulate_measurement(profile, gen_random_loading(rng, launch), g, rng,
                                     f"{tag}/u{k:05d}")
            m.channel_gain_db = np.full(N_CHANNELS, np.nan)
            ds.unlabeled.append(m)
    return ds


# --- on-disk format -------------------------------------------------------

def write_jsonl(measurements: Sequence[GainMeasurement], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in measurements:
            fh.write(json.dumps(m.to_json()) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(GainMeasurement.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad measurement record: {exc}") from exc
    return out


def save_fleet(directory, profiles: Sequence[EdfaProfile], datasets: Sequence[Dataset],
               spec: DatasetSpec) -> Path:
    """Write ``<device_id>.jsonl`` per device plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    devices = []
    for profile, ds in zip(profiles, datasets):
        fname = f"{profile.device_id}.jsonl"
        splits = ds.splits()
        write_jsonl([m for part in splits.values() for m in part], directory / fname)
        devices.append({
            "device_id": profile.device_id,
            "file": fname,
            "profile": profile.to_json(),
            "splits": {k: [m.measurement_id for m in v] for k, v in splits.items()},
        })
    manifest = {
        "format": "edfa-gainlab-dataset",
        "goalpost_catalog_version": GOALPOST_CATALOG_VERSION,
        "first_center_thz": FIRST_CENTER_THZ,
        "channel_spacing_ghz": CHANNEL_SPACING_GHZ,
        "spec": asdict(spec),
        "devices": devices,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))


def load_device(directory, device_id: str) -> tuple[EdfaProfile, Dataset]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    for entry in manifest["devices"]:
        if entry["device_id"] == device_id:
            break
    else:
        raise KeyError(f"device {device_id!r} not in manifest")
    by_id = {m.measurement_id: m for m in read_jsonl(directory / entry["file"])}
    parts = {k: [by_id[i] for i in ids] for k, ids in entry["splits"].items()}
    return EdfaProfile.from_json(entry["profile"]), Dataset(**parts)
