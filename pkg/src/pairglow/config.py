"""Human-readable key=value run configuration.

The same format serializes the model configuration into checkpoint
files. Unknown keys are rejected and every value is validated before
any work starts; command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import CONDITIONING_MODES, ModelConfig


@dataclass
class RunConfig:
    n_blocks: int = 4
    n_flows: int = 16
    image_size: int = 32
    lr: float = 1e-4
    lam: float = 1e-4
    conditioning_mode: str = "full"
    use_boundary: bool = False
    temperature: float = 0.7
    seed: int = 0

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        self.to_model_config()
        return self

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            n_blocks=self.n_blocks,
            n_flows=self.n_flows,
            image_size=self.image_size,
            nll_weight=self.lam,
            conditioning_mode=self.conditioning_mode,
            use_boundary=self.use_boundary,
            temperature=self.temperature,
        ).validate()


# externally visible key names ("lambda" is a Python keyword)
_KEY_TO_FIELD = {
    "n_blocks": "n_blocks",
    "n_flows": "n_flows",
    "image_size": "image_size",
    "lr": "lr",
    "lambda": "lam",
    "conditioning_mode": "conditioning_mode",
    "use_boundary": "use_boundary",
    "temperature": "temperature",
    "seed": "seed",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}

_PARSERS = {
    "n_blocks": int,
    "n_flows": int,
    "image_size": int,
    "lr": float,
    "lam": float,
    "conditioning_mode": str,
    "use_boundary": None,  # bool, handled below
    "temperature": float,
    "seed": int,
}


def _parse_bool(raw, key):
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def parse_config_text(text, source="<config>") -> RunConfig:
    values = {}
    bad_keys = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        field = _KEY_TO_FIELD.get(key)
        if field is None:
            bad_keys.append(key)
            continue
        try:
            if field == "use_boundary":
                values[field] = _parse_bool(raw, key)
            elif field == "conditioning_mode":
                if raw not in CONDITIONING_MODES:
                    raise ValueError
                values[field] = raw
            else:
                values[field] = _PARSERS[field](raw)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: invalid value for {key}: {raw!r}")
    if bad_keys:
        raise ConfigError(f"{source}: unknown keys: {', '.join(sorted(bad_keys))}")
    return RunConfig(**values)


def load_config_file(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=str(path))


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{_FIELD_TO_KEY[f.name]}={value}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Overlay non-None values (from command-line flags) onto cfg."""
    for field, value in overrides.items():
        if value is not None:
            setattr(cfg, field, value)
    return cfg


# -- ModelConfig serialization (checkpoint header) ---------------------------

_MODEL_KEYS = {
    "n_blocks": int,
    "n_flows": int,
    "image_size": int,
    "in_channels": int,
    "lambda": float,
    "conditioning_mode": str,
    "use_boundary": None,
    "temperature": float,
}


def model_config_to_text(cfg: ModelConfig) -> str:
    values = {
        "n_blocks": cfg.n_blocks,
        "n_flows": cfg.n_flows,
        "image_size": cfg.image_size,
        "in_channels": cfg.in_channels,
        "lambda": cfg.nll_weight,
        "conditioning_mode": cfg.conditioning_mode,
        "use_boundary": "true" if cfg.use_boundary else "false",
        "temperature": cfg.temperature,
    }
    return "\n".join(f"{k}={values[k]}" for k in _MODEL_KEYS) + "\n"


def model_config_from_text(text) -> ModelConfig:
    raw = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key not in _MODEL_KEYS:
            raise ConfigError(f"checkpoint config has unknown key {key!r}")
        raw[key] = value
    missing = set(_MODEL_KEYS) - set(raw)
    if missing:
        raise ConfigError(f"checkpoint config missing keys: {sorted(missing)}")
    return ModelConfig(
        n_blocks=int(raw["n_blocks"]),
        n_flows=int(raw["n_flows"]),
        image_size=int(raw["image_size"]),
        in_channels=int(raw["in_channels"]),
        nll_weight=float(raw["lambda"]),
        conditioning_mode=raw["conditioning_mode"],
        use_boundary=_parse_bool(raw["use_boundary"], "use_boundary"),
        temperature=float(raw["temperature"]),
    ).validate()
