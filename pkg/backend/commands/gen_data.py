import logging
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from commands import common
from services import config_service, data_service, file_service

logger = logging.getLogger(__name__)


class GenDataOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out: str
    seed: int = 1
    size: int = Field(16, ge=8)
    train_per_class: int = Field(500, gt=0)
    test_per_class: int = Field(125, gt=0)
    noise: float = Field(data_service.SYNTHETIC_NOISE, ge=0)


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "gen-data", "write the synthetic texture set as binary records")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--size", type=int, help="image side in pixels")
    parser.add_argument("--train-per-class", type=int)
    parser.add_argument("--test-per-class", type=int)
    parser.add_argument("--noise", type=float, help="std of the additive Gaussian noise")
    parser.set_defaults(handler=run)


def run(args) -> int:
    options = common.resolve(GenDataOptions, args)
    out = file_service.ensure_dir(options.out)
    train, test = data_service.synthetic_splits(options.train_per_class, options.test_per_class,
                                                options.size, options.seed, options.noise)
    data_service.write_records(out / "train.bin", train)
    data_service.write_records(out / "test.bin", test)
    config_service.write_config_file(out / common.SYNTHETIC_META, {
        "size": options.size,
        "channels": train.channels,
        "num_classes": train.num_classes,
        "seed": options.seed,
        "noise": options.noise,
        "classes": ",".join(data_service.TEXTURE_CLASSES),
    })
    print(f"{len(train)} train / {len(test)} test records written to {Path(out)}")
    return 0
