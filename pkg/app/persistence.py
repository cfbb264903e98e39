# app/persistence.py
"""Run directories: metrics/trace CSVs, config snapshot and manifest."""
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

os.environ.setdefault("GIT_PYTHON_REFRESH", "quiet")  # no git binary is fine: version becomes "unknown"
import git  # noqa: E402
import pandas as pd

from config import RunConfig, dump_config

REPO_ROOT = Path(__file__).resolve().parents[1]


def code_version(root: Path = REPO_ROOT) -> str:
    try:
        repo = git.Repo(root, search_parent_directories=True)
        sha = repo.head.commit.hexsha[:12]
        return sha + ("-dirty" if repo.is_dirty() else "")
    except (git.GitError, ValueError):
        return "unknown"


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""])


@dataclass
class RunManifest:
    command: str
    seed: int
    out_dir: str
    config: dict = field(default_factory=dict)
    version: str = field(default_factory=code_version)
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    files: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, cfg: RunConfig, out_dir) -> "RunManifest":
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
        return cls(command=command, seed=cfg.scenario.seed, out_dir=str(out),
                   config=cfg.model_dump(mode="json"), files=["config.yaml"])

    def add(self, path) -> None:
        rel = Path(path).resolve().relative_to(Path(self.out_dir).resolve())
        self.files.append(str(rel))

    def finish(self, **summary) -> Path:
        self.finished_at = time.time()
        self.summary.update(summary)
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str), encoding="utf-8")
        return path
