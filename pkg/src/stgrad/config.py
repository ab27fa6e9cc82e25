"""Run configuration: flat key=value files, environment overrides, presets.

Precedence, lowest to highest: built-in defaults, config file, environment
variables (``STGRAD_<KEY>``), explicit overrides (CLI flags). The effective
config is echoed into the run directory and can be re-loaded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from importlib import resources

from .errors import ConfigError
from .estimators import EstimatorConfig

ENV_PREFIX = "STGRAD_"

_INT_FIELDS = {"n", "l", "k", "epochs", "batch", "seed", "synth_n", "checkpoint_every"}
_FLOAT_FIELDS = {"tau", "eta", "beta", "lr"}
_BOOL_FIELDS = {"synth"}


@dataclass
class RunConfig:
    estimator: str = "reinmax"
    tau: float = 1.0
    eta: float = 0.0
    beta: float = 0.5
    k: int = 100
    cv_conditioning: str = "coupled_fresh"
    cv_leading_coeff: str = "as_printed"
    rao_second_term: str = "theta_D_as_printed"
    n: int = 8
    l: int = 4
    enc_hidden: str = "512,256"
    dec_hidden: str = "256,512"
    optimizer: str = "adam"
    lr: float = 0.0005
    epochs: int = 160
    batch: int = 100
    seed: int = 0
    synth: bool = False
    synth_n: int = 2000
    synth_pattern: str = "bars"
    train_images: str = ""
    test_images: str = ""
    out: str = ""
    checkpoint_every: int = 5
    run_id: str = ""

    def validate(self) -> "RunConfig":
        self.estimator_config()  # validates estimator fields
        if self.optimizer not in ("adam", "radam"):
            raise ConfigError(f"optimizer must be adam|radam, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.l < 1:
            raise ConfigError(f"l must be >= 1, got {self.l}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        self.hidden_dims("enc")
        self.hidden_dims("dec")
        return self

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            kind=self.estimator,
            tau=self.tau,
            eta=self.eta,
            beta=self.beta,
            k_samples=self.k,
            cv_conditioning=self.cv_conditioning,
            cv_leading_coeff=self.cv_leading_coeff,
            rao_second_term_point=self.rao_second_term,
        )

    def hidden_dims(self, part: str) -> tuple[int, ...]:
        raw = self.enc_hidden if part == "enc" else self.dec_hidden
        try:
            dims = tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError:
            raise ConfigError(f"{part}_hidden must be comma-separated ints, got {raw!r}") from None
        if any(d < 1 for d in dims):
            raise ConfigError(f"{part}_hidden dims must be positive, got {raw!r}")
        return dims

    def effective_run_id(self) -> str:
        return self.run_id or f"{self.estimator}-{self.n}x{self.l}-seed{self.seed}"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = int(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if key in _FLOAT_FIELDS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key in known:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            out[key] = _coerce(key, environ[env_key])
    return out


def load_run_config(path=None, overrides: dict | None = None, use_env: bool = True) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        values.update(parse_config_text(text))
    if use_env:
        values.update(env_overrides())
    if overrides:
        unknown = set(overrides) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


def preset_names() -> list[str]:
    root = resources.files("stgrad").joinpath("presets")
    return sorted(p.name[: -len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_preset(name: str) -> str:
    """Text of a bundled preset config."""
    ref = resources.files("stgrad").joinpath("presets").joinpath(f"{name}.cfg")
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return ref.read_text(encoding="utf-8")
