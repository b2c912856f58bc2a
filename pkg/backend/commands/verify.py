import logging
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from commands import common
from services import verification_service
from services.errors import VerificationFailure

logger = logging.getLogger(__name__)


class VerifyOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    cases: int = Field(verification_service.DEFAULT_CASES, gt=0)
    only: Optional[str] = None

    @property
    def names(self) -> list[str] | None:
        if not self.only:
            return None
        return [n.strip() for n in self.only.split(",") if n.strip()]


def register(subparsers) -> None:
    parser = common.add_command(subparsers, "verify", "run the randomized property suite")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--cases", type=int, help="random cases per property")
    parser.add_argument("--only", help="comma list of property names")
    parser.set_defaults(handler=run)


def run(args) -> int:
    options = common.resolve(VerifyOptions, args)
    results = verification_service.run_property_suite(options.seed, options.cases, options.names)
    for result in results:
        print(result.line())
        if not result.passed and result.detail:
            logger.error("%s: %s", result.name, result.detail)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: "
                                  + ", ".join(failed))
    return 0
