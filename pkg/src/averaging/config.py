"""Centralized configuration, logging, and worker-pool management."""
import os
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar

import yaml

from averaging.errors import UsageError

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class ToleranceConfig:
    """Numerical tolerances shared by the checkers and the solver."""
    rotation_tol: float = 1e-8
    essential_tol: float = 1e-6
    eigen_gap: float = 1e-6
    block_rotation_tol: float = 1e-6
    pairing_tol: float = 1e-8
    fundamental_rank_tol: float = 1e-8


@dataclass
class CoverConfig:
    """Triplet filtering thresholds and spanning tree count."""
    collinearity_min: float = 0.17
    rotation_max: float = 1.1
    translation_max: float = 1.0
    tree_count: int = 2
    pair_redundancy: int = 2

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be positive")
        if self.pair_redundancy < 0:
            raise ValueError("pair_redundancy must be non-negative")


@dataclass
class AdmmConfig:
    """Penalties and stopping rules of the averaging solver."""
    alpha1: float = 1.0
    alpha2: float = 1.0
    max_outer_iters: int = 500
    outer_tol: float = 1e-8
    primal_tol: float = 1e-7
    inner_D_max_iters: int = 20
    inner_D_tol: float = 1e-10
    normalize_blocks: bool = True

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("penalties must be non-negative")
        if self.outer_tol <= 0 or self.inner_D_tol <= 0 or self.primal_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.inner_D_max_iters < 1:
            raise ValueError("iteration caps must be positive")


@dataclass
class AppConfig:
    """Application configuration."""
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    cover: CoverConfig = field(default_factory=CoverConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    log_level: str = "INFO"
    debug: bool = False
    threads: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _read_config_file(config_file: Path) -> Dict[str, Any]:
    if not config_file.exists():
        return {}
    try:
        with open(config_file) as f:
            if config_file.suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f) or {}
            else:
                data = json.load(f)
    except (json.JSONDecodeError, yaml.YAMLError, UnicodeDecodeError) as e:
        raise UsageError(f"could not parse {config_file}: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"{config_file}: expected a mapping at the top level")
    return data


def _section(cls, data: Dict[str, Any], name: str, config_file: str):
    values = data.get(name) or {}
    if not isinstance(values, dict):
        raise UsageError(f"{config_file}: section '{name}' must be a mapping")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{config_file}: section '{name}': {e}") from e


def load_config(config_file: str = "averaging.json") -> AppConfig:
    """Load configuration from a JSON/YAML file and environment variables.

    A missing file means defaults; a file that does not parse, or names
    unknown settings, is a UsageError.
    """
    data = _read_config_file(Path(config_file))
    unknown = set(data) - {"tolerances", "cover", "admm", "log_level", "debug", "threads"}
    if unknown:
        raise UsageError(f"{config_file}: unknown settings {sorted(unknown)}")

    tolerances = _section(ToleranceConfig, data, "tolerances", config_file)
    cover = _section(CoverConfig, data, "cover", config_file)

    admm_cfg = dict(_section(dict, data, "admm", config_file))
    # Environment overrides
    try:
        if "AVERAGING_ALPHA1" in os.environ:
            admm_cfg["alpha1"] = float(os.environ["AVERAGING_ALPHA1"])
        if "AVERAGING_ALPHA2" in os.environ:
            admm_cfg["alpha2"] = float(os.environ["AVERAGING_ALPHA2"])
        if "AVERAGING_MAX_ITERS" in os.environ:
            admm_cfg["max_outer_iters"] = int(os.environ["AVERAGING_MAX_ITERS"])
        threads = max(1, int(os.getenv("AVERAGING_THREADS", data.get("threads", 1))))
    except ValueError as e:
        raise UsageError(f"bad numeric setting: {e}") from e
    admm = _section(AdmmConfig, {"admm": admm_cfg}, "admm", config_file)

    return AppConfig(
        tolerances=tolerances,
        cover=cover,
        admm=admm,
        log_level=os.getenv("AVERAGING_LOG_LEVEL", data.get("log_level", "INFO")).upper(),
        debug=os.getenv("AVERAGING_DEBUG", str(data.get("debug", False))).lower() == "true",
        threads=threads,
    )


def setup_logging(log_level: str = "INFO", debug: bool = False) -> logging.Logger:
    """Configure logging with appropriate handlers and formatters."""
    logger = logging.getLogger("averaging")
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            "[%(asctime)s] %(levelname)s - %(name)s - %(message)s"
            if not debug else
            "[%(asctime)s] %(levelname)s - %(name)s:%(funcName)s:%(lineno)d - %(message)s"
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


# Global config
_config: Optional[AppConfig] = None


def get_config() -> AppConfig:
    """Get or initialize global configuration."""
    global _config
    if _config is None:
        _config = load_config()
    return _config


def set_config(cfg: AppConfig) -> None:
    """Replace the global configuration (command line overrides)."""
    global _config
    _config = cfg


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Map `fn` over `items`, results in input order.

    Runs inline for a single worker; otherwise on a thread pool sized by
    `threads` (default: the configured `AVERAGING_THREADS`).
    """
    items = list(items)
    workers = threads if threads is not None else get_config().threads
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(fn, items))


__all__ = [
    "ToleranceConfig",
    "CoverConfig",
    "AdmmConfig",
    "AppConfig",
    "load_config",
    "setup_logging",
    "get_config",
    "set_config",
    "parallel_map",
]
