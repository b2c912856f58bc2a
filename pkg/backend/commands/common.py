"""
Pieces shared by the subcommands: the argparse parser class, model flags,
option resolution and dataset selection.
"""

import argparse
import logging
import os
from pathlib import Path
from typing import Annotated, Literal, Optional

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError

from models.schemas import ModelConfig
from services import config_service, data_service
from services.data_service import Dataset
from services.errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

# Defaults that replace the ViT-Lite sizes when training on the synthetic set.
DESK_PROFILE = {
    "image_size": 16,
    "depth": 4,
    "dim": 64,
    "heads": 4,
    "patch_size": 4,
    "warmup": 3,
    "mixup_alpha": 0.0,
    "epochs": 30,
}

SYNTHETIC_META = "dataset.cfg"


def _check_precision(bits: int) -> int:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    return bits


Precision = Annotated[int, AfterValidator(_check_precision)]


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors raised (exit 1) instead of sys.exit(2)."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def add_command(subparsers, name: str, help_text: str) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, help=help_text, description=help_text,
                                   argument_default=argparse.SUPPRESS)
    parser.add_argument("--config", help="key=value file with option defaults")
    return parser


def cli_values(args: argparse.Namespace) -> dict[str, object]:
    return {k: v for k, v in vars(args).items() if k not in ("handler", "command", "config")}


class ModelOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = 32
    patch_size: int = 4
    depth: int = 6
    heads: int = 4
    dim: int = 256
    mlp_ratio: int = 2
    manifolds: str = "e,s,g"
    fusion: Literal["early", "late"] = "early"
    negate_distances: bool = False
    pool: Literal["sequence_pool", "mean_pool"] = "sequence_pool"
    qr_tolerance: float = Field(1e-10, gt=0)
    final_norm: bool = True

    def to_model_config(self, num_classes: int, channels: int = 3) -> ModelConfig:
        try:
            return ModelConfig.model_validate({
                "image_size": self.image_size,
                "channels": channels,
                "patch_size": self.patch_size,
                "depth": self.depth,
                "mlp_ratio": self.mlp_ratio,
                "num_classes": num_classes,
                "pool": self.pool,
                "final_norm": self.final_norm,
                "attention": {
                    "heads": self.heads,
                    "model_dim": self.dim,
                    "manifolds": self.manifolds,
                    "fusion": self.fusion,
                    "negate_distances": self.negate_distances,
                    "qr_tolerance": self.qr_tolerance,
                },
            })
        except ValidationError as exc:
            raise ConfigError(config_service.validation_message(exc)) from exc


class DataOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: str = "synthetic"
    data_dir: Optional[str] = None
    train_per_class: int = Field(500, gt=0)
    test_per_class: int = Field(125, gt=0)
    seed: int = 0
    precision: Precision = 64


def add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--image-size", type=int)
    group.add_argument("--patch-size", type=int)
    group.add_argument("--depth", type=int)
    group.add_argument("--heads", type=int)
    group.add_argument("--dim", type=int, help="model width D")
    group.add_argument("--mlp-ratio", type=int)
    group.add_argument("--manifolds", help="comma list of e, s, g")
    group.add_argument("--fusion", choices=["early", "late"])
    group.add_argument("--negate-distances", action="store_true",
                       help="late fusion: softmax(-D) for SPD/Grassmann maps")
    group.add_argument("--pool", choices=["sequence_pool", "mean_pool"])
    group.add_argument("--qr-tolerance", type=float)
    group.add_argument("--no-final-norm", dest="final_norm", action="store_false")


def add_data_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("data")
    group.add_argument("--data", help="synthetic | synthetic:<dir> | cifar10[:<dir>] | cifar100[:<dir>]")
    group.add_argument("--data-dir", help="default directory for cifar sources (env MMA_DATA_DIR)")
    group.add_argument("--train-per-class", type=int)
    group.add_argument("--test-per-class", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("--precision", type=int, choices=[32, 64])


def resolve(options_cls, args: argparse.Namespace, desk_profile: bool = False):
    """Options from flags, --config, environment and defaults; desk sizes for synthetic data."""
    values = cli_values(args)
    config_path = getattr(args, "config", None)
    options = config_service.resolve_options(options_cls, values, config_path)
    if desk_profile and str(getattr(options, "data", "")).startswith("synthetic"):
        defaults = {k: v for k, v in DESK_PROFILE.items() if k in options_cls.model_fields}
        options = config_service.resolve_options(options_cls, values, config_path, defaults=defaults)
    return options


def load_datasets(options: DataOptions, image_size: int = 16) -> tuple[Dataset, Dataset, dict[str, str]]:
    """(train, test, data.* header info) for the --data source."""
    kind, _, location = options.data.partition(":")
    if kind == "synthetic":
        if location:
            return _load_synthetic_dir(Path(location))
        train, test = data_service.synthetic_splits(options.train_per_class, options.test_per_class,
                                                    image_size, options.seed)
        info = {"source": "synthetic", "seed": str(options.seed), "size": str(image_size),
                "train_per_class": str(options.train_per_class),
                "test_per_class": str(options.test_per_class)}
        logger.info("generated synthetic textures: %d train / %d test at %dpx", len(train), len(test), image_size)
        return train, test, info
    if kind in ("cifar10", "cifar100"):
        directory = location or options.data_dir or os.getenv("MMA_DATA_DIR")
        if not directory:
            raise ConfigError(f"--data {kind} needs a directory ({kind}:<dir>, --data-dir or MMA_DATA_DIR)")
        loader = data_service.load_cifar10_bin if kind == "cifar10" else data_service.load_cifar100_bin
        train, test = loader(directory)
        return train, test, {"source": f"{kind}:{directory}"}
    raise ConfigError(f"unknown data source '{options.data}'")


def _load_synthetic_dir(directory: Path) -> tuple[Dataset, Dataset, dict[str, str]]:
    meta = config_service.read_config_file(directory / SYNTHETIC_META)
    try:
        size, channels, classes = int(meta["size"]), int(meta["channels"]), int(meta["num_classes"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{directory / SYNTHETIC_META}: missing or bad field {exc}") from exc
    train = data_service.read_records(directory / "train.bin", size, channels, classes)
    test = data_service.read_records(directory / "test.bin", size, channels, classes)
    return train, test, {"source": f"synthetic:{directory}"}


def data_options_from_header(info: dict[str, str], override: Optional[str] = None) -> DataOptions:
    """Recreate the data source a checkpoint was trained on."""
    fields = {"data": override or info.get("source", "synthetic")}
    for key in ("seed", "train_per_class", "test_per_class"):
        if key in info:
            fields[key] = info[key]
    return DataOptions.model_validate(fields)
