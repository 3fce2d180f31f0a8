"""Configuration definitions, file parsing and sweep expansion."""
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints
import difflib
import itertools
import os

import yaml

from .errors import ConfigError, ConfigTypeError, InvalidValue, MissingRequired, UnknownKey
from .logging_utils import get_logger

logger = get_logger("config")

FULL_GRID = 240
CACHE_ENV = "CTSTOP_CACHE_DIR"
URL_ENV = "CTSTOP_DATASET_URL"
DEFAULT_RECORD_URL = "https://zenodo.org/api/records/14893740"


@dataclass
class GeometryConfig:
    """Parallel-beam scan over integer degrees 0..n_angles_total-1."""
    grid: int = FULL_GRID
    n_angles_total: int = 180
    n_detector: Optional[int] = None
    detector_spacing: float = 1.0
    sirt_iters: int = 150
    sirt_relaxation: float = 1.0

    def validate(self) -> None:
        if self.grid < 8:
            raise ValueError("geometry.grid must be >= 8")
        if self.n_angles_total != 180:
            raise ValueError("geometry.n_angles_total is fixed at 180 one-degree angles")
        if self.n_detector is not None and self.n_detector < 1:
            raise ValueError("geometry.n_detector must be >= 1")
        if self.detector_spacing <= 0:
            raise ValueError("geometry.detector_spacing must be > 0")
        if self.sirt_iters < 1:
            raise ValueError("geometry.sirt_iters must be >= 1")
        if not (0 < self.sirt_relaxation < 2):
            raise ValueError("geometry.sirt_relaxation must lie in (0, 2)")


@dataclass
class NoiseConfig:
    eta: float = 0.05

    def validate(self) -> None:
        if self.eta < 0:
            raise ValueError("noise.eta must be >= 0")


@dataclass
class RewardConfig:
    cost_b: float = 0.5
    max_steps: int = 20

    def validate(self) -> None:
        if self.cost_b <= 0:
            raise ValueError("reward.cost_b must be > 0 (it is the magnitude of the per-angle cost)")
        if not (1 <= self.max_steps <= 180):
            raise ValueError("reward.max_steps must lie in [1, 180]")


@dataclass
class NetworkConfig:
    """Shared encoder + actor/critic/terminal heads. `pools=None` derives the pool kernels from the grid."""
    channels: Tuple[int, ...] = (12, 24, 48)
    pools: Optional[Tuple[int, ...]] = None
    groups: int = 4
    leaky_slope: float = 0.2
    critic_hidden: Optional[int] = None
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.channels:
            raise ValueError("network.channels must list at least one block")
        if any(c % self.groups for c in self.channels):
            raise ValueError("network.channels must be divisible by network.groups")
        if self.pools is not None and len(self.pools) != len(self.channels):
            raise ValueError("network.pools must have one kernel per block")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("network.dtype must be float32 or float64")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    actor_weight: float = 1.0
    critic_weight: float = 0.5
    terminal_weight: float = 1.0
    entropy_weight: float = 0.01

    def validate(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("optimizer learning_rate/weight_decay must be >= 0 and adam_eps > 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValueError("optimizer.adam_betas must be two values in [0, 1)")
        for name in ("actor_weight", "critic_weight", "terminal_weight", "entropy_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"optimizer.{name} must be >= 0")


@dataclass
class TrainConfig:
    episodes: int = 80000
    n_per_shape: int = 200
    decide_before_acquire: bool = False
    skip_forced_terminal_update: bool = True
    sync_workers: int = 1
    checkpoint_every: int = 1000
    trace_window: int = 1000

    def validate(self) -> None:
        if self.episodes < 1:
            raise ValueError("train.episodes must be >= 1")
        if self.n_per_shape < 1:
            raise ValueError("train.n_per_shape must be >= 1")
        if self.sync_workers < 1:
            raise ValueError("train.sync_workers must be >= 1")
        if self.checkpoint_every < 0 or self.trace_window < 1:
            raise ValueError("train.checkpoint_every must be >= 0 and train.trace_window >= 1")


@dataclass
class EvalConfig:
    mode: str = "stochastic"
    n_per_shape: int = 600
    noise_levels: Tuple[float, ...] = (0.03, 0.05, 0.07)
    experimental: bool = False

    def validate(self) -> None:
        if self.mode not in ("greedy", "stochastic"):
            raise ValueError("eval.mode must be 'greedy' or 'stochastic'")
        if self.n_per_shape < 1:
            raise ValueError("eval.n_per_shape must be >= 1")
        if any(e < 0 for e in self.noise_levels):
            raise ValueError("eval.noise_levels must be >= 0")


@dataclass
class BaselineConfig:
    kind: str = "golden_ratio"
    n_angles: int = 10
    gr_offset: int = 0
    n_per_shape: int = 3

    def validate(self) -> None:
        if self.kind not in ("golden_ratio", "uniform", "greedy", "all"):
            raise ValueError("baseline.kind must be golden_ratio, uniform, greedy or all")
        if not (1 <= self.n_angles <= 180):
            raise ValueError("baseline.n_angles must lie in [1, 180]")
        if self.n_per_shape < 1:
            raise ValueError("baseline.n_per_shape must be >= 1")


@dataclass
class OracleConfig:
    n_mdps: int = 20
    n_trajectories: int = 100000
    max_states: int = 12
    max_actions: int = 4
    max_horizon: int = 5

    def validate(self) -> None:
        if self.n_mdps < 1:
            raise ValueError("oracle.n_mdps must be >= 1")
        if self.n_trajectories < 10000:
            raise ValueError("oracle.n_trajectories must be >= 10000")
        if not (2 <= self.max_states <= 12 and 2 <= self.max_actions <= 4 and 1 <= self.max_horizon <= 5):
            raise ValueError("oracle sizes must satisfy states<=12, actions<=4, horizon<=5")


@dataclass
class IngestConfig:
    """Experimental scan preprocessing. Distances in mm."""
    record_url: str = DEFAULT_RECORD_URL
    shapes: Tuple[str, ...] = ("triangle", "pentagon")
    samples: Tuple[int, ...] = tuple(range(1, 13))
    currents: Tuple[int, ...] = (600, 100)
    projection_step: int = 10
    middle_row: int = 5
    column_step: int = 4
    column_offset: int = 0
    sod: float = 225.0
    odd: float = 225.0
    detector_pitch: float = 0.1496
    n_bins: int = 240
    group_glob: str = "*{shape}*{sample}*{current}*"

    def validate(self) -> None:
        if self.projection_step < 1 or self.column_step < 1:
            raise ValueError("ingest steps must be >= 1")
        if self.sod <= 0 or self.odd < 0 or self.detector_pitch <= 0:
            raise ValueError("ingest geometry must be positive")


@dataclass
class PathsConfig:
    out_dir: str = "runs"
    cache_dir: str = "cache"
    dataset_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    scans_dir: Optional[str] = None

    def validate(self) -> None:
        if not self.out_dir or not self.cache_dir:
            raise ValueError("paths.out_dir and paths.cache_dir must not be empty")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs; every field is addressable by a dotted key."""
    subcommand: str = "train"
    variant: str = "terminal"
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        """Fail-fast checks for every section."""
        if self.variant not in ("naive", "terminal"):
            raise ValueError("variant must be 'naive' or 'terminal'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                value.validate()

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ----------------------------------------------------------------- dotted keys

def valid_keys() -> List[str]:
    keys: List[str] = []
    root = RunConfig()
    for f in fields(root):
        value = getattr(root, f.name)
        if is_dataclass(value):
            keys.extend(f"{f.name}.{sub.name}" for sub in fields(value))
        else:
            keys.append(f.name)
    return keys


def _resolve(cfg: RunConfig, key: str) -> Tuple[Any, str, Any]:
    """Return (owner object, attribute name, declared type) for a dotted key."""
    keys = valid_keys()
    if key not in keys:
        close = difflib.get_close_matches(key, keys, n=1, cutoff=0.5)
        raise UnknownKey(key, close[0] if close else None)
    parts = key.split(".")
    owner: Any = cfg
    for p in parts[:-1]:
        owner = getattr(owner, p)
    hints = get_type_hints(type(owner))
    return owner, parts[-1], hints[parts[-1]]


def _load_yaml(text: str, where: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigTypeError(f"{where}: not valid YAML ({e})") from e


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if isinstance(value, str) and hint is not str:
        value = _load_yaml(value, key)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigTypeError(f"{key} expects a list, got {value!r}")
        item = args[0] if args else Any
        return tuple(_coerce(key, v, item) for v in value)
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigTypeError(f"{key} expects true/false, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(f"{key} expects an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(f"{key} expects a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigTypeError(f"{key} expects a string, got {value!r}")
        return value
    return value


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    owner, attr, hint = _resolve(cfg, key)
    setattr(owner, attr, _coerce(key, value, hint))


def flatten(mapping: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested sections and dotted keys both collapse to dotted keys."""
    flat: Dict[str, Any] = {}
    for k, v in (mapping or {}).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, prefix=f"{key}."))
        else:
            flat[key] = v
    return flat


def read_config_file(path: str) -> Dict[str, Any]:
    """Read a YAML file, or `key = value` lines for .cfg/.conf/.txt files."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if os.path.splitext(path)[1].lower() in (".cfg", ".conf", ".txt"):
        raw: Dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigTypeError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            raw[k.strip()] = _load_yaml(v.strip(), f"{path}:{lineno}") if v.strip() else None
        return flatten(raw)
    data = _load_yaml(text, path)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigTypeError(f"{path}: top level must be a mapping")
    return flatten(data)


def _is_sweep(key: str, value: Any) -> bool:
    if not isinstance(value, list):
        return False
    _, _, hint = _resolve(RunConfig(), key)
    for h in (hint, *get_args(hint)):
        if get_origin(h) in (tuple, list):
            return False
    return True


def expand_sweep(flat: Dict[str, Any]) -> List[Dict[str, Any]]:
    """One mapping per combination of list-valued scalar keys."""
    sweep_keys = [k for k, v in flat.items() if _is_sweep(k, v)]
    if not sweep_keys:
        return [dict(flat)]
    combos = itertools.product(*(flat[k] for k in sweep_keys))
    out = []
    for combo in combos:
        item = dict(flat)
        item.update(dict(zip(sweep_keys, combo)))
        out.append(item)
    logger.info("Sweep expanded", extra={"event": "sweep", "data": {"keys": sweep_keys, "runs": len(out)}})
    return out


REQUIRED_KEYS = {
    "eval": ("paths.checkpoint",),
}


def build_config(flat: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then file values, then overrides; environment variables fill cache/url defaults."""
    cfg = RunConfig()
    env_cache = os.environ.get(CACHE_ENV)
    if env_cache:
        cfg.paths.cache_dir = env_cache
    env_url = os.environ.get(URL_ENV)
    if env_url:
        cfg.ingest.record_url = env_url
    for key, value in flat.items():
        set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_key(cfg, key, value)
    for key in REQUIRED_KEYS.get(cfg.subcommand, ()):
        owner, attr, _ = _resolve(cfg, key)
        if getattr(owner, attr) is None:
            raise MissingRequired(f"subcommand '{cfg.subcommand}' requires '{key}'")
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise InvalidValue(str(e)) from e
    return cfg


def parse_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    flat = read_config_file(path) if path else {}
    return build_config(flat, overrides)


def write_resolved(cfg: RunConfig, run_dir: str) -> str:
    ensure_dir(run_dir)
    path = os.path.join(run_dir, "run_config.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
    return path


def ensure_dir(path: str) -> None:
    """Create the directory if it does not exist."""
    os.makedirs(path, exist_ok=True)
