from pathlib import Path
from typing import Dict, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from services.errors import DataError, UsageError

REASONING_TYPES = ("inform", "selection", "true_false", "extraction")


class FileConfig(BaseSettings):
    """Config read from a flat key=value file; keyword overrides win over the file.

    The process environment is never consulted.
    """

    model_config = SettingsConfigDict(extra="forbid", env_file_encoding="utf-8", case_sensitive=False)

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        return (init_settings, dotenv_settings)

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides):
        if path is not None and not Path(path).is_file():
            raise DataError(f"Config file not found: {path}")
        cleaned = {k: v for k, v in overrides.items() if v is not None}
        return cls(_env_file=path, **cleaned)


class Settings(FileConfig):
    model_config = SettingsConfigDict(extra="ignore", env_file_encoding="utf-8", case_sensitive=False)

    log_level: str = "INFO"
    log_file: Optional[str] = None


class ReasonerConfig(BaseModel):
    hops: int = Field(default=5, ge=1)
    eps: float = Field(default=1e-12, gt=0)
    top_k: int = Field(default=8, ge=1)


class TrainConfig(FileConfig):
    learning_rate: float = Field(default=6.25e-5, gt=0)
    batch_size: int = Field(default=16, ge=1)
    grad_accum_steps: int = Field(default=2, ge=1)
    max_epochs: int = Field(default=50, ge=0)
    max_grad_norm: float = Field(default=1.0, gt=0)
    hops: int = Field(default=5, ge=1)
    d: int = Field(default=64, ge=1)
    top_k: int = Field(default=8, ge=1)
    eps: float = Field(default=1e-12, gt=0)
    mode: Literal["full", "walk-only"] = "full"
    path_loss_weight: float = Field(default=1.0, ge=0)
    seed: int = 0
    beam_width: int = Field(default=10, ge=1)
    max_response_len: int = Field(default=32, ge=1)
    # stop after this many epochs without a better validation metric
    patience: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=1, ge=1)

    @property
    def reasoner(self) -> ReasonerConfig:
        return ReasonerConfig(hops=self.hops, eps=self.eps, top_k=self.top_k)


class SyntheticConfig(FileConfig):
    n_entities: int = Field(default=200, ge=4)
    n_relations: int = Field(default=8, ge=2)
    n_triples: int = Field(default=1200, ge=1)
    hops_max: int = Field(default=3, ge=1)
    reasoner_hops: int = Field(default=5, ge=1)
    n_examples: int = Field(default=4000, ge=3)
    valid_size: int = Field(default=500, ge=1)
    test_size: int = Field(default=500, ge=1)
    n_values: int = Field(default=20, ge=3)
    reasoning_mix: str = "inform:0.55,selection:0.15,true_false:0.15,extraction:0.15"
    response_form: Literal["semantic", "natural"] = "semantic"
    seed: int = 0

    @field_validator("reasoning_mix")
    @classmethod
    def _check_mix(cls, value: str) -> str:
        parse_mix(value)
        return value

    @model_validator(mode="after")
    def _check_sizes(self) -> "SyntheticConfig":
        if self.hops_max > self.reasoner_hops:
            raise ValueError("hops_max must not exceed reasoner_hops")
        if self.valid_size + self.test_size >= self.n_examples:
            raise ValueError("valid_size + test_size must leave room for a training split")
        return self

    @property
    def mix(self) -> Dict[str, float]:
        return parse_mix(self.reasoning_mix)


class GradcheckConfig(FileConfig):
    d: int = Field(default=16, ge=1)
    hops: int = Field(default=3, ge=1)
    n_entities: int = Field(default=12, ge=2)
    n_relations: int = Field(default=4, ge=1)
    n_triples: int = Field(default=20, ge=1)
    vocab_size: int = Field(default=30, ge=8)
    top_k: int = Field(default=3, ge=1)
    mode: Literal["full", "walk-only"] = "full"
    path_loss_weight: float = Field(default=1.0, ge=0)
    step: float = Field(default=1e-5, gt=0)
    tolerance: float = Field(default=1e-4, gt=0)
    max_coords: int = Field(default=40, ge=1)
    # partials below this are rounding noise at step=1e-5; the directional check still covers them
    min_grad: float = Field(default=1e-4, ge=0)
    along_gradient: bool = True
    seed: int = 0


def parse_mix(text: str) -> Dict[str, float]:
    mix: Dict[str, float] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, weight = part.partition(":")
        name = name.strip()
        if not sep or name not in REASONING_TYPES:
            raise UsageError(f"Invalid reasoning_mix entry: {part!r}")
        try:
            value = float(weight)
        except ValueError as exc:
            raise UsageError(f"Invalid reasoning_mix weight: {part!r}") from exc
        if value < 0:
            raise UsageError(f"Negative reasoning_mix weight: {part!r}")
        mix[name] = value
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise UsageError(f"reasoning_mix weights must sum to 1 (got {sum(mix.values())})")
    return mix


# backend/.env when run from backend/src, as the setup script lays it out
ENV_FILES = (Path(".env"), Path("..") / ".env")
settings = Settings.load(next((str(p) for p in ENV_FILES if p.is_file()), None))
