"""
Configuration Management Module
Handles environment settings and the flat `key = value` run config files
"""
from functools import lru_cache
from typing import Optional

from dotenv import dotenv_values
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.schemas import RunConfig
from app.utils.exceptions import ConfigError, PersistenceError


class Settings(BaseSettings):
    """Process-level settings loaded from FDDM_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="FDDM_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Overrides the run config seed (a CLI flag still wins)
    seed: Optional[int] = None

    device: str = "cpu"
    log_file: str = "logs/fddm.log"
    log_level: str = "INFO"
    artifacts_dir: str = "artifacts"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


def load_run_config(path: Optional[str] = None, seed_override: Optional[int] = None) -> RunConfig:
    """
    Load and validate a run config file

    Args:
        path: Path to a UTF-8 `key = value` file; None yields the defaults
        seed_override: Seed from the command line, applied after FDDM_SEED

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: Unknown keys or invalid values
        PersistenceError: Unreadable file
    """
    values: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = dict(dotenv_values(stream=f, interpolate=False))
        except OSError as exc:
            raise PersistenceError(f"Cannot read run config {path}: {exc}") from exc

        missing = [key for key, value in values.items() if value is None]
        if missing:
            raise ConfigError(f"Keys without a value in {path}: {', '.join(missing)}")

    env_seed = get_settings().seed
    if env_seed is not None:
        values["seed"] = env_seed
    if seed_override is not None:
        values["seed"] = seed_override

    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigError(f"Invalid run config {path or '<defaults>'}: {problems}") from exc
