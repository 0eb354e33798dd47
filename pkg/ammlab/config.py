"""Run configuration and logging setup.

A run config is one flat JSON object: market keys and pool keys at the top
level under their usual names (delta, Rf, muA, ..., eta, f), plus
`constraint`, `seed`, and nested `solver` and `output` objects.
"""
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ammlab.amm_pricing import PoolSpec
from ammlab.dp_solver import SolverSettings
from ammlab.errors import ConfigError, DomainError
from ammlab.market_model import MarketParams
from ammlab.portfolio import ConstraintSet

logger = logging.getLogger(__name__)

LOG_FORMAT = 'AMMLAB %(levelname)5s [%(asctime)s]: %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'

MARKET_KEYS = {field.alias or name: name for name, field in MarketParams.model_fields.items()}
POOL_KEYS = {field.alias or name: name for name, field in PoolSpec.model_fields.items()}
SECTION_KEYS = {"constraint", "seed", "solver", "output"}


def configure_logging(verbosity: int = 0) -> None:
    """INFO by default, DEBUG for verbosity > 0, WARNING for verbosity < 0; records go to stderr."""
    level = logging.INFO
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT, stream=sys.stderr, force=True)


class OutputSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    directory: str = "results"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])

    @field_validator("formats")
    @classmethod
    def _nonempty(cls, formats):
        if not formats:
            raise ValueError("at least one output format is required")
        return sorted(set(formats))


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(p) for p in err["loc"])
    return f"{where}: {err['msg']}" if where else err["msg"]


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    market: MarketParams = Field(default_factory=MarketParams)
    pool: PoolSpec = Field(default_factory=PoolSpec)
    constraint: ConstraintSet = ConstraintSet.NO_SHORT
    solver: SolverSettings = Field(default_factory=SolverSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build from the flat config layout; unknown keys are logged and ignored.

        Raises:
            ConfigError: If any value fails validation
        """
        if not isinstance(data, dict):
            raise ConfigError(f"Config must be a JSON object, got {type(data).__name__}")
        market, pool, rest = {}, {}, {}
        for key, value in data.items():
            if key in MARKET_KEYS:
                market[key] = value
            elif key in POOL_KEYS:
                pool[key] = value
            elif key in SECTION_KEYS:
                rest[key] = value
            else:
                logger.warning(f"Ignoring unknown config key {key!r}")
        try:
            if "constraint" in rest:
                rest["constraint"] = ConstraintSet.parse(rest["constraint"])
            return cls(market=MarketParams.model_validate(market), pool=PoolSpec.model_validate(pool), **rest)
        except ValidationError as e:
            error_msg = f"Invalid config: {_first_error(e)}"
            logger.error(error_msg)
            raise ConfigError(error_msg) from e
        except DomainError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            error_msg = f"Cannot read config {path}: {e}"
            logger.error(error_msg)
            raise ConfigError(error_msg) from e
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            error_msg = f"Malformed JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}"
            logger.error(error_msg)
            raise ConfigError(error_msg, line=e.lineno, column=e.colno) from e
        logger.info(f"Loaded config {path}")
        return cls.from_mapping(data)

    def to_mapping(self) -> Dict[str, Any]:
        """Inverse of from_mapping."""
        return {
            **self.market.model_dump(by_alias=True),
            **self.pool.model_dump(by_alias=True),
            "constraint": self.constraint.value,
            "seed": self.seed,
            "solver": self.solver.model_dump(),
            "output": self.output.model_dump(),
        }

    def with_overrides(self, assignments: Iterable[str] = (), directory: Optional[str] = None,
                       formats: Optional[List[str]] = None, seed: Optional[int] = None) -> "RunConfig":
        """Apply KEY=VALUE assignments and flag overrides; dotted keys reach into solver/output."""
        data = self.to_mapping()
        for assignment in assignments:
            key, sep, raw = assignment.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"Override {assignment!r} is not of the form KEY=VALUE")
            value = _parse_value(raw.strip())
            section, dot, sub = key.partition(".")
            if dot:
                if section not in ("solver", "output"):
                    raise ConfigError(f"Unknown override section {section!r}")
                data[section] = {**data[section], sub: value}
            elif key in MARKET_KEYS or key in POOL_KEYS or key in ("constraint", "seed"):
                data[key] = value
            else:
                raise ConfigError(f"Unknown override key {key!r}")
        if directory is not None:
            data["output"] = {**data["output"], "directory": directory}
        if formats is not None:
            data["output"] = {**data["output"], "formats": formats}
        if seed is not None:
            data["seed"] = seed
        return RunConfig.from_mapping(data)
