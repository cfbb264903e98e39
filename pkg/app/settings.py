# app/settings.py
from pathlib import Path

from dotenv import load_dotenv, find_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

# Try repo-root/.env first, then walk up from CWD as a fallback
repo_root = Path(__file__).resolve().parents[1]
explicit_env = repo_root / ".env"
env_path = str(explicit_env) if explicit_env.exists() else find_dotenv(".env", usecwd=True)
load_dotenv(env_path, override=False)


class Settings(BaseSettings):
    """Process-level knobs; everything experiment-specific lives in the YAML config."""

    model_config = SettingsConfigDict(env_prefix="UAVSIM_", extra="ignore")

    runs_dir: Path = Path("runs")
    event_log: str = "events.jsonl"
    limits_path: Path = repo_root / "configs" / "limits.yaml"
    progress: bool = True


def get_settings() -> Settings:
    return Settings()
