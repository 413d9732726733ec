import io
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from favtune_cli.errors import ConfigError
from favtune_cli.remi_codec import EventFamily

CONFIG_HEADER = "# favtune pipeline configuration"


@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.01
    selected: Tuple[EventFamily, ...] = (EventFamily.NOTE_ON,)
    pattern_length: int = 8
    pattern_mode: str = "ranked"
    temperature: float = 1.0
    epochs: int = 200
    stop_loss: float = 0.1
    sequence_length: int = 128
    model: str = "attention"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 128
    memory: int = 128
    learning_rate: float = 0.1
    clip_norm: float = 1.0
    ngram_order: int = 3
    ngram_delta: float = 0.01
    pretrain_epochs: int = 3
    favorite_aware: bool = True
    event_learning: bool = True
    forced_start: str = "first"
    bound_policy: str = "fold"
    ps_normalized: bool = False
    p_min: int = 2
    p_max: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(dict.fromkeys(self.selected)))
        self._validate()

    def _validate(self):
        def require(ok: bool, key: str, reason: str):
            if not ok:
                raise ConfigError(key, reason)

        require(self.alpha > 0, "alpha", "must be > 0")
        require(len(self.selected) > 0, "selected", "needs at least one event family")
        require(self.pattern_length >= 2, "pattern_length", "must be >= 2")
        require(self.pattern_mode in ("ranked", "random"), "pattern_mode", "must be ranked or random")
        require(self.temperature >= 0, "temperature", "must be >= 0")
        require(self.epochs >= 0, "epochs", "must be >= 0")
        require(self.stop_loss >= 0, "stop_loss", "must be >= 0")
        require(self.sequence_length >= 8, "sequence_length", "must be >= 8")
        require(self.model in ("attention", "ngram"), "model", "must be attention or ngram")
        require(self.n_heads > 0, "n_heads", "must be > 0")
        require(self.d_model > 0 and self.d_model % self.n_heads == 0, "d_model",
                "must be a positive multiple of n_heads")
        require(self.n_layers >= 1, "n_layers", "must be >= 1")
        require(self.context >= 2, "context", "must be >= 2")
        require(self.memory >= 0, "memory", "must be >= 0")
        require(self.model != "attention" or self.sequence_length <= self.context, "sequence_length",
                "must not exceed context for the attention model")
        require(self.learning_rate > 0, "learning_rate", "must be > 0")
        require(self.clip_norm >= 0, "clip_norm", "must be >= 0")
        require(2 <= self.ngram_order <= 5, "ngram_order", "must be in 2..5")
        require(self.ngram_delta > 0, "ngram_delta", "must be > 0")
        require(self.pretrain_epochs >= 0, "pretrain_epochs", "must be >= 0")
        require(self.forced_start in ("first", "second"), "forced_start", "must be first or second")
        require(self.bound_policy in ("fold", "saturate"), "bound_policy", "must be fold or saturate")
        require(self.p_min >= 1, "p_min", "must be >= 1")
        require(self.p_max >= self.p_min, "p_max", "must be >= p_min")
        require(self.seed >= 0, "seed", "must be >= 0")

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """Copy with the non-None keyword values applied"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @property
    def ps_lengths(self) -> range:
        return range(self.p_min, self.p_max + 1)

    def predictor_hyperparameters(self) -> Dict[str, Any]:
        if self.model == "ngram":
            return {"order": self.ngram_order, "delta": self.ngram_delta}
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context": self.context,
            "memory": self.memory,
            "seed": self.seed,
        }

    def transfer_config(self):
        from favtune_cli.transfer import TransferConfig

        return TransferConfig(
            selected=frozenset(self.selected),
            temperature=self.temperature,
            seed=self.seed,
            bound_policy=self.bound_policy,
            event_learning=self.event_learning,
            forced_start=self.forced_start,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(family.value for family in value)
    return str(value)


def _parse_value(key: str, raw: str, line: int) -> Any:
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return tuple(EventFamily.parse(name) for name in text.split(",") if name.strip())
    except ValueError as e:
        raise ConfigError(key, f"invalid value '{text}': {e}", line=line) from e


def loads_config(text: str) -> PipelineConfig:
    """Parse flat key=value lines; '#' comments and blank lines are ignored"""
    values: Dict[str, Any] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ConfigError(None, "malformed line", line=line)
        if binding.key is None:
            continue
        if binding.key not in _FIELD_TYPES:
            raise ConfigError(binding.key, "unknown key", line=line)
        if binding.value is None:
            raise ConfigError(binding.key, "missing '=value'", line=line)
        values[binding.key] = _parse_value(binding.key, binding.value, line)
    return PipelineConfig(**values)


def dumps_config(cfg: PipelineConfig) -> str:
    lines = [CONFIG_HEADER]
    lines += [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path]) -> PipelineConfig:
    return loads_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: PipelineConfig, path: Union[str, Path]):
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")


class Settings:
    """Per-user defaults; FAVTUNE_RUN_ROOT and FAVTUNE_CONFIG may come from a .env file"""

    def __init__(self):
        self.home_dir = Path.home() / ".favtune"
        load_dotenv(Path.cwd() / ".env")

    @property
    def run_root(self) -> Path:
        return Path(os.getenv("FAVTUNE_RUN_ROOT", str(self.home_dir / "runs")))

    @property
    def config_path(self) -> Optional[Path]:
        value = os.getenv("FAVTUNE_CONFIG")
        return Path(value) if value else None

    def resolve_run_dir(self, out: str) -> Path:
        """A bare name goes under the run root; anything path-like is used as given"""
        path = Path(out)
        if path.is_absolute() or len(path.parts) > 1 or out.startswith(".") or out.endswith(("/", os.sep)):
            return path
        return self.run_root / out

    def pipeline_config(self, path: Optional[Union[str, Path]] = None) -> PipelineConfig:
        path = path or self.config_path
        return load_config(path) if path else PipelineConfig()


settings = Settings()
