import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from commands import common
from services import checkpoint_service, data_service, export_service, training_service
from services.errors import ConfigError
from services.model_service import pooled_features
from services.tensor_service import precision

logger = logging.getLogger(__name__)


class EvalOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    data: Optional[str] = None
    split: Literal["train", "test"] = "test"
    batch: int = 256
    export_features: Optional[str] = None
    precision: common.Precision = 64


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "eval", "evaluate a checkpoint on its dataset")
    parser.add_argument("--checkpoint", help="path to a .mmac checkpoint")
    parser.add_argument("--data", help="override the data source recorded in the checkpoint")
    parser.add_argument("--split", choices=["train", "test"])
    parser.add_argument("--batch", type=int)
    parser.add_argument("--export-features", help="write pooled features to this CSV")
    parser.add_argument("--precision", type=int, choices=[32, 64])
    parser.set_defaults(handler=run)


def export_features(path: str, model, dataset: data_service.Dataset, batch_size: int) -> None:
    chunks = []
    for idx in data_service.iterate_batches(len(dataset), batch_size, shuffle=False):
        images = data_service.normalize(dataset.images(idx), model.stats)
        chunks.append(np.array(pooled_features(images, model).values))
    export_service.write_features(path, dataset.labels, np.concatenate(chunks, axis=0))


def run(args) -> int:
    options = common.resolve(EvalOptions, args)
    loaded = checkpoint_service.load_checkpoint(options.checkpoint)
    model = loaded.model
    data_options = common.data_options_from_header(loaded.data_info, options.data)
    with precision(options.precision):
        train, test, _ = common.load_datasets(data_options, model.cfg.image_size)
        dataset = train if options.split == "train" else test
        if dataset.num_classes != model.cfg.num_classes or dataset.image_size != model.cfg.image_size:
            raise ConfigError(
                f"checkpoint expects {model.cfg.num_classes} classes at {model.cfg.image_size}px, "
                f"data has {dataset.num_classes} at {dataset.image_size}px")
        loss, acc = training_service.evaluate(model, dataset, options.batch)
        if options.export_features:
            export_features(options.export_features, model, dataset, options.batch)
    print(f"split={options.split} samples={len(dataset)} loss={loss:.6f} acc={acc:.4f}")
    return 0
