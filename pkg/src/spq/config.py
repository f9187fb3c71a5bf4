"""Key/value config files for the pipeline, toy model and sweep grids.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines
ignored. Lists are comma separated.

Pipeline keys (defaults in brackets):

    svd.enabled [true]          svd.epsilon [0.90]       svd.skip_no_gain [true]
    prune.enabled [true]        prune.strategy [log]     prune.r_min [0.0]
    prune.r_max [0.30]          prune.eps_div [1e-8]     prune.delta_log [1e-6]
    prune.sigmoid_k [10]
    quant.enabled [true]        quant.mode [LNH]         quant.bits [8]
    quant.pbh_alpha [25]        quant.msh_k [1.0]
    lora.enabled [false]        lora.rank [8]            lora.alpha [16]
    lora.steps [200]            lora.learning_rate [0.05]  lora.requantize [false]
    classify.attention [self_attn,attn,attention]
    classify.mlp [mlp,fc,feed_forward]
    seed [0]                    workers [1]
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .prune import PruneConfig
from .quant import QuantPolicy


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def as_bool(key, value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def as_int(key, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def as_float(key, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def as_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


@dataclass(frozen=True)
class PipelineConfig:
    svd_enabled: bool = True
    svd_epsilon: float = 0.90
    svd_skip_no_gain: bool = True
    prune_enabled: bool = True
    prune: PruneConfig = field(default_factory=PruneConfig)
    quant_enabled: bool = True
    quant: QuantPolicy = field(default_factory=QuantPolicy)
    lora_enabled: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_steps: int = 200
    lora_learning_rate: float = 0.05
    lora_requantize: bool = False
    attention_patterns: tuple[str, ...] = ("self_attn", "attn", "attention")
    mlp_patterns: tuple[str, ...] = ("mlp", "fc", "feed_forward")
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.5 <= self.svd_epsilon <= 1.0:
            raise ConfigError(f"svd.epsilon must lie in [0.5, 1.0], got {self.svd_epsilon}")
        if self.lora_rank < 1 or self.lora_alpha <= 0 or self.lora_steps < 0:
            raise ConfigError("lora.rank >= 1, lora.alpha > 0 and lora.steps >= 0 required")
        if self.lora_learning_rate <= 0:
            raise ConfigError("lora.learning_rate must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.attention_patterns or not self.mlp_patterns:
            raise ConfigError("classification pattern lists must not be empty")

    @classmethod
    def off(cls) -> "PipelineConfig":
        return cls(svd_enabled=False, prune_enabled=False, quant_enabled=False)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "PipelineConfig":
        top: dict = {}
        prune: dict = {}
        quant: dict = {}
        for key, value in kv.items():
            if key in _TOP_KEYS:
                attr, conv = _TOP_KEYS[key]
                top[attr] = conv(key, value)
            elif key in _PRUNE_KEYS:
                attr, conv = _PRUNE_KEYS[key]
                prune[attr] = conv(key, value)
            elif key in _QUANT_KEYS:
                attr, conv = _QUANT_KEYS[key]
                quant[attr] = conv(key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(prune=PruneConfig(**prune), quant=QuantPolicy(**quant), **top)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_mapping(read_kv(path))

    def with_updates(self, kv: dict[str, str]) -> "PipelineConfig":
        """Copy with ``kv`` (config-file keys) applied on top."""
        base = self.to_mapping()
        base.update(kv)
        return PipelineConfig.from_mapping(base)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for key, (attr, _) in _TOP_KEYS.items():
            out[key] = _fmt(getattr(self, attr))
        for key, (attr, _) in _PRUNE_KEYS.items():
            out[key] = _fmt(getattr(self.prune, attr))
        for key, (attr, _) in _QUANT_KEYS.items():
            out[key] = _fmt(getattr(self.quant, attr))
        return out

    def stages(self) -> dict[str, bool]:
        return {"svd": self.svd_enabled, "prune": self.prune_enabled,
                "quant": self.quant_enabled, "lora": self.lora_enabled}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _str(key, value):
    return value


def _patterns(key, value):
    return as_list(value)


_TOP_KEYS = {
    "svd.enabled": ("svd_enabled", as_bool),
    "svd.epsilon": ("svd_epsilon", as_float),
    "svd.skip_no_gain": ("svd_skip_no_gain", as_bool),
    "prune.enabled": ("prune_enabled", as_bool),
    "quant.enabled": ("quant_enabled", as_bool),
    "lora.enabled": ("lora_enabled", as_bool),
    "lora.rank": ("lora_rank", as_int),
    "lora.alpha": ("lora_alpha", as_float),
    "lora.steps": ("lora_steps", as_int),
    "lora.learning_rate": ("lora_learning_rate", as_float),
    "lora.requantize": ("lora_requantize", as_bool),
    "classify.attention": ("attention_patterns", _patterns),
    "classify.mlp": ("mlp_patterns", _patterns),
    "seed": ("seed", as_int),
    "workers": ("workers", as_int),
}
_PRUNE_KEYS = {
    "prune.strategy": ("strategy", _str),
    "prune.r_min": ("r_min", as_float),
    "prune.r_max": ("r_max", as_float),
    "prune.eps_div": ("eps_div", as_float),
    "prune.delta_log": ("delta_log", as_float),
    "prune.sigmoid_k": ("sigmoid_k", as_float),
}
_QUANT_KEYS = {
    "quant.mode": ("mode", _str),
    "quant.bits": ("bits", as_int),
    "quant.pbh_alpha": ("pbh_alpha", as_float),
    "quant.msh_k": ("msh_k", as_float),
}

CONFIG_KEYS = tuple(_TOP_KEYS) + tuple(_PRUNE_KEYS) + tuple(_QUANT_KEYS)
