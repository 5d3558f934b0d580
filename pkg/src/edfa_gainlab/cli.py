"""Command-line front end: generate / train / transfer / evaluate / matrix."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .evaluation import (
    FleetMember,
    evaluate_model,
    run_tl_matrix,
    transfer_measurements,
    write_loss_curve,
    write_summary_csv,
    write_tl_matrix_csv,
)
from .model import FeatureMode, ModelLoadError, feature_matrix, load_model, save_model
from .pipeline import (
    PretrainConfig,
    TrainConfig,
    TransferConfig,
    one_shot_transfer,
    pretrain_dae,
    train_base,
)
from .simulator import (
    EDFA_TYPES,
    DatasetSpec,
    build_dataset,
    load_device,
    load_manifest,
    make_profile,
    save_fleet,
)

log = logging.getLogger("edfa_gainlab")

SEED_ENV = "EDFA_GAINLAB_SEED"
DESK_BUDGETS = {"pretrain": 300, "train": 300, "transfer": 2000}
FULL_BUDGETS = {"pretrain": 1800, "train": 1200, "transfer": 10000}


class UserError(Exception):
    """Bad input from the user; reported with exit code 2."""


@dataclass
class FleetSpec:
    boosters: int = 2
    preamps: int = 2
    noise_sigma_db: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 0
    fleet: FleetSpec = field(default_factory=FleetSpec)
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(gain_settings_db=[20.0]))
    pretrain: PretrainConfig = field(
        default_factory=lambda: PretrainConfig(epochs=DESK_BUDGETS["pretrain"]))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=DESK_BUDGETS["train"]))
    transfer: TransferConfig = field(
        default_factory=lambda: TransferConfig(epochs=DESK_BUDGETS["transfer"]))
    feature_mode: str = FeatureMode.WITH_INTERNAL.value
    output_dir: str = "runs/default"

    _sections = {"fleet": FleetSpec, "dataset": DatasetSpec, "pretrain": PretrainConfig,
                 "train": TrainConfig, "transfer": TransferConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        cfg = cls()
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise UserError(f"unknown config keys: {sorted(unknown)}")
        for key, value in doc.items():
            if key in cls._sections:
                base = dataclasses.asdict(getattr(cfg, key))
                extra = set(value) - set(base)
                if extra:
                    raise UserError(f"unknown keys in config section {key!r}: {sorted(extra)}")
                base.update(value)
                try:
                    setattr(cfg, key, cls._sections[key](**base))
                except (TypeError, ValueError) as exc:
                    raise UserError(f"invalid config section {key!r}: {exc}") from exc
            else:
                setattr(cfg, key, value)
        try:
            FeatureMode(cfg.feature_mode)
        except ValueError:
            raise UserError(f"unknown feature_mode {cfg.feature_mode!r}") from None
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        for section in (self.dataset, self.pretrain, self.train, self.transfer):
            section.seed = int(seed)

    @property
    def mode(self) -> FeatureMode:
        return FeatureMode(self.feature_mode)

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    def data_dir(self) -> Path:
        return self.root / "data"

    def model_path(self, device_id: str) -> Path:
        return self.root / "models" / f"{device_id}__{self.feature_mode}.json"

    def curve_path(self, run: str) -> Path:
        return self.root / "curves" / f"loss_curve_{run}.csv"

    def training_fingerprint(self) -> str:
        doc = {k: self.to_dict()[k] for k in ("seed", "fleet", "dataset", "pretrain", "train",
                                              "feature_mode")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def fleet_profiles(cfg: ExperimentConfig) -> list:
    profiles = []
    counts = {"booster": cfg.fleet.boosters, "preamp": cfg.fleet.preamps}
    for t_index, kind in enumerate(EDFA_TYPES):
        for k in range(counts[kind]):
            seed = cfg.seed * 1000 + t_index * 100 + k
            profiles.append(make_profile(seed, kind, f"{kind}-{k}",
                                         noise_sigma_db=cfg.fleet.noise_sigma_db))
    return profiles


# --- commands ---------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    profiles = fleet_profiles(cfg)
    if not profiles:
        raise UserError("fleet is empty")
    datasets = [build_dataset(p, cfg.dataset) for p in profiles]
    try:
        path = save_fleet(cfg.data_dir(), profiles, datasets, cfg.dataset)
    except OSError as exc:
        raise UserError(f"cannot write dataset to {cfg.data_dir()}: {exc}") from exc
    log.info("wrote %d device datasets to %s", len(profiles), cfg.data_dir())
    return path


def _load_device(cfg: ExperimentConfig, device_id: str):
    if not (cfg.data_dir() / "manifest.json").is_file():
        raise UserError(f"no dataset at {cfg.data_dir()} (run `generate` first)")
    try:
        return load_device(cfg.data_dir(), device_id)
    except KeyError as exc:
        raise UserError(str(exc.args[0])) from None


def _device_ids(cfg: ExperimentConfig) -> list:
    if not (cfg.data_dir() / "manifest.json").is_file():
        raise UserError(f"no dataset at {cfg.data_dir()} (run `generate` first)")
    return [d["device_id"] for d in load_manifest(cfg.data_dir())["devices"]]


def _write(path: Path, writer, *args) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        writer(*args, path)
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc}") from exc


def cmd_train(cfg: ExperimentConfig, device_id: str, skip_pretrain: bool = False) -> Path:
    profile, ds = _load_device(cfg, device_id)
    mode = cfg.mode
    pretrained = None
    if not skip_pretrain:
        pretrained = pretrain_dae(feature_matrix(ds.unlabeled, mode), cfg.pretrain)
        _write(cfg.curve_path(f"{device_id}_pretrain"), write_loss_curve, pretrained.losses)
    model, losses = train_base(ds, pretrained, cfg.train, mode)
    model.metadata.update({
        "device_id": profile.device_id,
        "edfa_type": profile.edfa_type,
        "pretrain_epochs": 0 if skip_pretrain else cfg.pretrain.epochs,
        "config_fingerprint": cfg.training_fingerprint() + ("-nopre" if skip_pretrain else ""),
        "package_version": __version__,
    })
    _write(cfg.curve_path(f"{device_id}_train"), write_loss_curve, losses)
    path = cfg.model_path(device_id)
    _write(path, save_model, model)
    log.info("trained %s -> %s", device_id, path)
    return path


def _load_model_file(path) -> object:
    try:
        return load_model(path)
    except ModelLoadError as exc:
        raise UserError(str(exc)) from exc


def cmd_transfer(cfg: ExperimentConfig, source_path, target_device: str,
                 output: Optional[str] = None) -> Path:
    source = _load_model_file(source_path)
    if source.feature_mode is not cfg.mode:
        raise UserError(f"feature-mode mismatch: source model {source_path} uses "
                        f"{source.feature_mode.value} but the run is configured for "
                        f"{cfg.feature_mode}; pass --feature-mode {source.feature_mode.value}")
    _, ds = _load_device(cfg, target_device)
    try:
        meas = transfer_measurements(ds, cfg.transfer.measurement_budget)
        adapted, losses = one_shot_transfer(source, meas, cfg.transfer)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    src_id = source.metadata.get("device_id", Path(source_path).stem)
    run = f"{src_id}__to__{target_device}"
    _write(cfg.curve_path(f"{run}_transfer"), write_loss_curve, losses)
    path = Path(output) if output else cfg.root / "transfers" / f"{run}__{cfg.feature_mode}.json"
    _write(path, save_model, adapted)
    log.info("transferred %s -> %s: %s", src_id, target_device, path)
    return path


def cmd_evaluate(cfg: ExperimentConfig, model_path, device_id: str, loading: str = "all",
                 output: Optional[str] = None) -> Path:
    model = _load_model_file(model_path)
    _, ds = _load_device(cfg, device_id)
    split = {"all": ds.test, "random": ds.test_random, "goalpost": ds.test_goalpost}[loading]
    if not split:
        raise UserError(f"no {loading} test measurements for {device_id}")
    summaries = [s for s in evaluate_model(model, split, device=device_id,
                                           feature_mode=model.feature_mode.value).values()
                 if s is not None]
    path = Path(output) if output else cfg.root / "reports" / "summary.csv"
    _write(path, write_summary_csv, summaries)
    return path


def ensure_base_models(cfg: ExperimentConfig) -> list:
    """Load a base model per device, training any that are missing or stale."""
    members = []
    fp = cfg.training_fingerprint()
    for dev in _device_ids(cfg):
        profile, ds = _load_device(cfg, dev)
        path = cfg.model_path(dev)
        model = None
        if path.is_file():
            try:
                model = load_model(path)
            except ModelLoadError:
                model = None
            if model is not None and model.metadata.get("config_fingerprint") != fp:
                model = None
        if model is None:
            model = load_model(cmd_train(cfg, dev))
        members.append(FleetMember(profile, ds, model))
    return members


def cmd_matrix(cfg: ExperimentConfig, jobs: int = 1, output: Optional[str] = None) -> Path:
    fleet = ensure_base_models(cfg)
    matrix = run_tl_matrix(fleet, cfg.transfer, jobs=jobs)
    path = Path(output) if output else cfg.root / "reports" / "tl_matrix.csv"
    _write(path, write_tl_matrix_csv, matrix)
    log.info("diagonal mean %.4f dB, off-diagonal mean %.4f dB",
             matrix.diagonal_mean(), matrix.off_diagonal_mean())
    return path


# --- argument handling ------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON file")
    p.add_argument("--output-dir", help="root directory for data, models and reports")
    p.add_argument("--seed", type=int, help=f"master seed (overrides config and ${SEED_ENV})")
    p.add_argument("--feature-mode", choices=[m.value for m in FeatureMode])
    p.add_argument("--paper-budgets", action="store_true",
                   help="use 1800/1200/10000 epochs for pretrain/train/transfer")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--train-epochs", type=int)
    p.add_argument("--transfer-epochs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edfa-gainlab",
                                     description="SS-NN EDFA gain modeling experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate the device fleet and write datasets")
    _add_common(p)

    p = sub.add_parser("train", help="DAE pretraining + supervised base training")
    _add_common(p)
    p.add_argument("--device", required=True, help="device id from the manifest")
    p.add_argument("--skip-pretrain", action="store_true",
                   help="random trainable input layer instead of the DAE encoder")

    p = sub.add_parser("transfer", help="one-shot transfer of a base model to a device")
    _add_common(p)
    p.add_argument("--source", required=True, help="source model JSON")
    p.add_argument("--target", required=True, help="target device id")
    p.add_argument("--epochs", type=int, help="transfer epochs (same as --transfer-epochs)")
    p.add_argument("--output", help="adapted model path")

    p = sub.add_parser("evaluate", help="MAE summary of a model on a device's test split")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--loading", choices=["all", "random", "goalpost"], default="all")
    p.add_argument("--output", help="summary CSV path")

    p = sub.add_parser("matrix", help="source x target transfer MAE matrix")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="worker threads for matrix cells")
    p.add_argument("--output", help="matrix CSV path")
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> ExperimentConfig:
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UserError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UserError(f"config {args.config} is not valid JSON: {exc}") from exc
        cfg = ExperimentConfig.from_dict(doc)
    else:
        cfg = ExperimentConfig()
    seed = cfg.seed
    if environ.get(SEED_ENV):
        try:
            seed = int(environ[SEED_ENV])
        except ValueError:
            raise UserError(f"{SEED_ENV} must be an integer") from None
    if args.seed is not None:
        seed = args.seed
    cfg.apply_seed(seed)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.feature_mode:
        cfg.feature_mode = args.feature_mode
    if args.paper_budgets:
        cfg.pretrain.epochs = FULL_BUDGETS["pretrain"]
        cfg.train.epochs = FULL_BUDGETS["train"]
        cfg.transfer.epochs = FULL_BUDGETS["transfer"]
    for flag, section in (("pretrain_epochs", cfg.pretrain), ("train_epochs", cfg.train),
                          ("transfer_epochs", cfg.transfer)):
        if getattr(args, flag) is not None:
            section.epochs = getattr(args, flag)
    if getattr(args, "epochs", None) is not None:
        cfg.transfer.epochs = args.epochs
    for section in (cfg.pretrain, cfg.train, cfg.transfer):
        if section.epochs < 0:
            raise UserError("epoch counts must be >= 0")
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            out = cmd_generate(cfg)
        elif args.command == "train":
            out = cmd_train(cfg, args.device, args.skip_pretrain)
        elif args.command == "transfer":
            out = cmd_transfer(cfg, args.source, args.target, args.output)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.model, args.device, args.loading, args.output)
        else:
            if args.jobs < 1:
                raise UserError("--jobs must be >= 1")
            out = cmd_matrix(cfg, args.jobs, args.output)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
