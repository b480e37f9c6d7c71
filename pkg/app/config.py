import os
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    app_name: str = "hlik-glmm"
    threads: int = 0
    log_level: str = "INFO"
    checkpoint_db: str = "data/checkpoints.db"
    reduction_chunks: int = 16

    model_config = SettingsConfigDict(
        env_prefix="HLIK_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    def resolved_threads(self, override: int | None = None) -> int:
        """Thread count from flag, then env, then available parallelism."""
        n = override if override is not None else self.threads
        if n and n > 0:
            return n
        return os.cpu_count() or 1


@lru_cache
def get_settings() -> Settings:
    return Settings()
