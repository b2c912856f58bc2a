import logging

from pydantic import BaseModel, ConfigDict, Field

from commands import common
from services import verification_service
from services.errors import VerificationFailure
from services.tensor_service import precision

logger = logging.getLogger(__name__)


class GradCheckOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    tolerance: float = Field(verification_service.GRAD_TOL, gt=0)


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "gradcheck", "finite-difference check of every differentiable op")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--tolerance", type=float, help="max relative error")
    parser.set_defaults(handler=run)


def run(args) -> int:
    options = common.resolve(GradCheckOptions, args)
    with precision(64):
        reports = verification_service.gradient_checks(options.seed, options.tolerance)
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"GRAD {report.name} {status} {report.max_rel_error:.3e}")
    failed = [r for r in reports if not r.passed]
    for report in failed:
        logger.error("%s: rel error %.3e at input %s index %s", report.name, report.max_rel_error,
                     report.failing_input, report.failing_index)
    if failed:
        raise VerificationFailure(f"{len(failed)} gradient check(s) failed: "
                                  + ", ".join(r.name for r in failed))
    return 0
