import logging
from pathlib import Path
from typing import Optional

from pydantic import Field

from commands import common
from models.schemas import TrainConfig
from services import model_service, training_service
from services.tensor_service import precision

logger = logging.getLogger(__name__)


class TrainOptions(common.ModelOptions, common.DataOptions):
    epochs: int = Field(200, gt=0)
    batch: int = Field(128, gt=0)
    lr: float = Field(5e-4, ge=0)
    warmup: int = Field(10, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    mixup_alpha: float = Field(1.0, ge=0)
    augment: bool = True
    crop_pad: int = Field(4, ge=0)
    eval_batch: int = Field(256, gt=0)
    out: str = "runs/model.mmac"
    report: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch,
            base_lr=self.lr,
            warmup_epochs=self.warmup,
            weight_decay=self.weight_decay,
            label_smoothing=self.label_smoothing,
            mixup_alpha=self.mixup_alpha,
            augment=self.augment,
            crop_pad=self.crop_pad,
            seed=self.seed,
            eval_batch_size=self.eval_batch,
        )

    @property
    def report_path(self) -> Path:
        return Path(self.report) if self.report else Path(self.out).with_suffix(".csv")


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "train", "train a model and write a checkpoint + report CSV")
    common.add_model_flags(parser)
    common.add_data_flags(parser)
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int)
    group.add_argument("--batch", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--warmup", type=int, help="warmup epochs")
    group.add_argument("--weight-decay", type=float)
    group.add_argument("--label-smoothing", type=float)
    group.add_argument("--mixup-alpha", type=float, help="0 disables mixup")
    group.add_argument("--no-augment", dest="augment", action="store_false")
    group.add_argument("--crop-pad", type=int)
    group.add_argument("--eval-batch", type=int)
    group.add_argument("--out", help="checkpoint path")
    group.add_argument("--report", help="training report CSV (default: next to the checkpoint)")
    parser.set_defaults(handler=run)


def run(args) -> int:
    options: TrainOptions = common.resolve(TrainOptions, args, desk_profile=True)
    with precision(options.precision):
        train, test, info = common.load_datasets(options, options.image_size)
        options = options.model_copy(update={"image_size": train.image_size})
        cfg = options.to_model_config(train.num_classes, train.channels)
        model = model_service.init_model_weights(cfg, options.seed)
        logger.info("model: %s fusion over %s, depth %d, D=%d, h=%d, %d parameters",
                    cfg.attention.fusion, ",".join(cfg.attention.manifolds), cfg.depth,
                    cfg.model_dim, cfg.heads, model.params.scalar_count())
        rows = training_service.fit(model, train, test, options.train_config(),
                                    checkpoint_path=options.out, report_path=options.report_path,
                                    data_info=info)
    final = rows[-1]
    print(f"epochs={final.epoch} train_loss={final.train_loss:.6f} "
          f"eval_loss={final.eval_loss:.6f} eval_acc={final.eval_acc:.4f}")
    logger.info("report written to %s", options.report_path)
    return 0
