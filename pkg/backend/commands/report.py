import logging
from typing import Optional

from commands import common
from models.schemas import MANIFOLD_CODES, ModelConfig
from services import accounting_service, checkpoint_service

logger = logging.getLogger(__name__)


class ReportOptions(common.ModelOptions):
    num_classes: int = 10
    channels: int = 3
    ablation: bool = False
    checkpoint: Optional[str] = None


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "report", "parameter and FLOP breakdown for a configuration")
    common.add_model_flags(parser)
    parser.add_argument("--num-classes", type=int)
    parser.add_argument("--channels", type=int)
    parser.add_argument("--ablation", action="store_true", help="table over every manifold subset")
    parser.add_argument("--checkpoint", help="report the configuration stored in a checkpoint")
    parser.set_defaults(handler=run)


def _breakdown_lines(title: str, breakdown) -> list[str]:
    values = breakdown.model_dump()
    width = max(len(k) for k in values)
    lines = [title]
    lines += [f"  {name:<{width}} {value:>14,d}" for name, value in values.items()]
    return lines


def _codes(manifolds: tuple[str, ...]) -> str:
    return "".join(MANIFOLD_CODES[m] for m in manifolds)


def run(args) -> int:
    options = common.resolve(ReportOptions, args)
    if options.checkpoint:
        cfg: ModelConfig = checkpoint_service.load_checkpoint(options.checkpoint).model.cfg
    else:
        cfg = options.to_model_config(options.num_classes, options.channels)

    params = accounting_service.count_params(cfg)
    flops = accounting_service.count_flops(cfg)
    print(f"config: {cfg.attention.fusion} {_codes(cfg.attention.manifolds)} "
          f"D={cfg.model_dim} h={cfg.heads} depth={cfg.depth} L={cfg.seq_len} classes={cfg.num_classes}")
    print("\n".join(_breakdown_lines("params", params)))
    print("\n".join(_breakdown_lines("flops", flops)))

    if options.ablation:
        rows = accounting_service.ablation_table(cfg)
        base = next(r for r in rows if r.fusion == "early" and r.manifolds == ("euclidean",))
        print(f"{'fusion':<6} {'set':<4} {'params':>12} {'flops':>16} {'flops/base':>10}")
        for row in rows:
            print(f"{row.fusion:<6} {_codes(row.manifolds):<4} {row.params:>12,d} "
                  f"{row.flops:>16,d} {row.flops / base.flops:>10.3f}")
    return 0
