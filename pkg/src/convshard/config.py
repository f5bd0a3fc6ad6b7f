"""Run configuration: a TOML file overlaid by command-line flags."""
import sys
from dataclasses import dataclass, fields, replace

from .errors import ConfigurationError
from .network import PRESETS, preset
from .transport import DEFAULT_TIMEOUT, default_port

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BATCH_SIZES = (64, 128, 256, 512, 1024)


@dataclass(frozen=True)
class RunConfig:
    role: str = "local"
    master: str = ""
    workers: tuple = ()
    port: int = None
    preset: str = "50:500"
    batch: int = 64
    epochs: int = 1
    lr: float = 0.01
    seed: int = 0
    distribute_backward: bool = True
    data: str = ""
    synthetic: bool = False
    synthetic_size: int = 1280
    out: str = ""
    checkpoint: str = ""
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.port is None:
            object.__setattr__(self, "port", default_port())
        if isinstance(self.workers, str):
            object.__setattr__(self, "workers", tuple(w for w in self.workers.split(",") if w.strip()))
        object.__setattr__(self, "workers", tuple(self.workers))
        self.validate()

    def validate(self):
        if self.role not in ("local", "master", "worker"):
            raise ConfigurationError(f"role must be local, master or worker, got {self.role!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.batch not in BATCH_SIZES:
            raise ConfigurationError(f"batch must be one of {BATCH_SIZES}, got {self.batch}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.port < 65536:
            raise ConfigurationError(f"port out of range: {self.port}")
        if self.timeout <= 0:
            raise ConfigurationError("timeout must be positive")
        if self.synthetic_size < 1:
            raise ConfigurationError("synthetic_size must be >= 1")

    def net_spec(self):
        return preset(self.preset)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
    kind = _FIELDS[name].type
    if name == "workers":
        if isinstance(value, str):
            return value
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigurationError("workers must be a list of addresses")
        return tuple(value)
    if name == "port":
        kind = int
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind in (int, float, bool, str) and type(value) is not kind:
        raise ConfigurationError(f"{name} must be of type {kind.__name__}, got {value!r}")
    return value


def from_mapping(mapping, base=None):
    """Build a config from a flat mapping; unknown keys are rejected."""
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in mapping.items()}
    return replace(base, **values) if base is not None else RunConfig(**values)


def load_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
    return from_mapping(data)
