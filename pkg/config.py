import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

import coloredlogs
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigurationError
from models_latent import LatentConfig
from models_networks import ArchConfig
from models_training import TrainConfig

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
RESOLVED_FILENAME = "config.resolved"


class Settings(BaseSettings):
    """Process-level settings, read from the environment or a .env file"""

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    app_env: str = "development"
    log_level: str = "info"
    runs_db_url: str = "sqlite:///./runs.db"


@lru_cache
def get_settings() -> Settings:
    return Settings()


def setup_logging(level: Optional[str] = None):
    settings = get_settings()
    level = (level or settings.log_level).upper()
    # production logs go to files and collectors, so no ANSI colors there
    coloredlogs.install(level=level, fmt=LOG_FORMAT, isatty=False if settings.app_env == "production" else None)


class RunConfig(BaseModel):
    """Flat run configuration; one key per line in the config file"""

    model_config = ConfigDict(extra="forbid")

    d_c: int = Field(50, ge=1)
    d_m: int = Field(10, ge=1)
    d_e: int = Field(10, ge=1)
    d_a: int = Field(0, ge=0)
    image_size: Literal[32, 64, 96] = 64
    T: int = Field(16, ge=2)
    batch_size: int = Field(32, ge=1)
    iterations: int = Field(10000, ge=0)
    lr: float = Field(0.0002, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    lambda_info: float = Field(1.0, ge=0)
    gen_loss_mode: Literal["saturating", "non_saturating"] = "non_saturating"
    dv_mode: Literal["downsample", "table_literal"] = "downsample"
    seed: int = 0
    dataset_path: Optional[str] = None
    out_dir: str = "runs/default"
    checkpoint_every: int = Field(1000, ge=0)
    log_every: int = Field(100, ge=1)
    base_channels: int = Field(64, ge=1)
    action_target: Literal["rnn", "generator"] = "rnn"
    use_image_discriminator: bool = True
    supervised_q: bool = False
    num_workers: int = Field(0, ge=0)

    def latent_config(self) -> LatentConfig:
        return LatentConfig(d_c=self.d_c, d_m=self.d_m, d_e=self.d_e, d_a=self.d_a)

    def arch_config(self) -> ArchConfig:
        return ArchConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            latent_dim=self.d_c + self.d_m,
            T=self.T,
            d_a=self.d_a,
            dv_mode=self.dv_mode,
            action_target=self.action_target,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            iterations=self.iterations,
            T=self.T,
            gen_loss_mode=self.gen_loss_mode,
            lambda_info=self.lambda_info,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
            use_image_discriminator=self.use_image_discriminator,
            supervised_q=self.supervised_q,
            num_workers=self.num_workers,
        )


def parse_overrides(pairs) -> Dict[str, str]:
    """Turn repeated KEY=VALUE flags into a dict"""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"override '{pair}' is not of the form key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigurationError(f"config key '{key}' has no value")
            values[key] = value
    # flags win over the file
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")

    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    data = cfg.model_dump()
    lines = [f"{key}={_format_value(data[key])}" for key in sorted(data) if data[key] is not None]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_FILENAME
    path.write_text(dump_run_config(cfg))
    return path


def config_hash(payload: Any) -> str:
    """md5 of the canonical JSON form of a payload"""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.md5(text.encode()).hexdigest()
