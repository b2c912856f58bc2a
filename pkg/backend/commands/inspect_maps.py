"""
`inspect`: run one image through a checkpoint and dump every distance map
and attention map it produces, per tower, block and head.
"""

import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from commands import common
from services import checkpoint_service, data_service, export_service
from services.attention_service import AttentionTrace
from services.errors import ConfigError
from services.model_service import model_forward
from services.tensor_service import precision

logger = logging.getLogger(__name__)


class InspectOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    out: str = "runs/maps"
    data: Optional[str] = None
    split: Literal["train", "test"] = "test"
    index: int = Field(0, ge=0)
    block: Optional[int] = Field(None, ge=0)


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "inspect", "export distance and attention maps for one image")
    parser.add_argument("--checkpoint", help="path to a .mmac checkpoint")
    parser.add_argument("--out", help="directory for the .csv/.pgm maps")
    parser.add_argument("--data", help="override the data source recorded in the checkpoint")
    parser.add_argument("--split", choices=["train", "test"])
    parser.add_argument("--index", type=int, help="sample index within the split")
    parser.add_argument("--block", type=int, help="only this block")
    parser.set_defaults(handler=run)


def map_stem(tower: str, block: int, kind: str, head: int) -> str:
    return f"{tower}_block{block}_{kind}_head{head}"


def run(args) -> int:
    options = common.resolve(InspectOptions, args)
    loaded = checkpoint_service.load_checkpoint(options.checkpoint)
    model = loaded.model
    data_options = common.data_options_from_header(loaded.data_info, options.data)
    train, test, _ = common.load_datasets(data_options, model.cfg.image_size)
    dataset = train if options.split == "train" else test
    if options.index >= len(dataset):
        raise ConfigError(f"--index {options.index} out of range for {len(dataset)} {options.split} samples")
    if options.block is not None and options.block >= model.cfg.depth:
        raise ConfigError(f"--block {options.block} out of range for depth {model.cfg.depth}")

    sample = dataset.record(options.index)
    image = data_service.normalize(sample.pixels[None], model.stats)
    trace = AttentionTrace()
    with precision(64):
        logits = model_forward(image, model, trace)

    written = 0
    for entry in trace.entries:
        if options.block is not None and entry.block != options.block:
            continue
        for head, values in enumerate(entry.values[0]):
            export_service.write_map(options.out, map_stem(entry.tower, entry.block, entry.kind, head), values)
            written += 1
    if trace.deficient_pivots:
        logger.warning("%d rank-deficient QR pivot(s) while computing Grassmann maps", trace.deficient_pivots)
    predicted = int(np.argmax(logits.values[0]))
    print(f"sample {options.index} label={sample.label} predicted={predicted} "
          f"maps={written} out={options.out}")
    return 0
