"""Project configuration and reproducibility stamps.

A ProjectConfig snapshot ties one pipeline run together: input/output paths,
backbone key, voter pool and library configs, sampler and trainer settings.
It round-trips losslessly through JSON, and every CLI run that produces
artifacts drops a stamp file beside them recording the exact configuration,
seeds, and package versions (no wall-clock data, so reruns stay
byte-identical).
"""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SamplerConfig
from .training import TrainConfig

STAMP_KIND = "mpiq-run-stamp"
PROJECT_CONFIG_KIND = "mpiq-project-config"
CONFIG_VERSION = 1


@dataclass
class ProjectConfig:
    refs_dir: str | None = None
    cache_dir: str | None = None
    output_dir: str | None = None
    backbone: str = "synthetic"
    voters_path: str | None = None
    library_path: str | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "kind": PROJECT_CONFIG_KIND,
            "version": CONFIG_VERSION,
            "refs_dir": self.refs_dir,
            "cache_dir": self.cache_dir,
            "output_dir": self.output_dir,
            "backbone": self.backbone,
            "voters_path": self.voters_path,
            "library_path": self.library_path,
            "sampler": self.sampler.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectConfig":
        if d.get("kind") not in (None, PROJECT_CONFIG_KIND):
            raise ValueError(f"not a project config: kind={d.get('kind')!r}")
        train_d = dict(d.get("train", {}))
        if "group_partition" in train_d:
            train_d["group_partition"] = tuple(
                tuple(g) for g in train_d["group_partition"]
            )
        return cls(
            refs_dir=d.get("refs_dir"),
            cache_dir=d.get("cache_dir"),
            output_dir=d.get("output_dir"),
            backbone=d.get("backbone", "synthetic"),
            voters_path=d.get("voters_path"),
            library_path=d.get("library_path"),
            sampler=SamplerConfig.from_dict(d.get("sampler", SamplerConfig().to_dict())),
            train=TrainConfig(**train_d),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ProjectConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate_paths(self) -> None:
        """Referenced files and directories must exist."""
        for name in ("refs_dir", "output_dir"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_dir():
                raise FileNotFoundError(f"{name} does not exist: {value}")
        for name in ("voters_path", "library_path"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise FileNotFoundError(f"{name} does not exist: {value}")


def _versions() -> dict:
    import numpy
    import scipy
    import torch
    import PIL

    from . import __version__

    return {
        "mpiq": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "pillow": PIL.__version__,
    }


def write_stamp(path: str | Path, command: str, config: dict) -> None:
    """Drop a reproducibility stamp next to a produced artifact."""
    doc = {
        "kind": STAMP_KIND,
        "version": CONFIG_VERSION,
        "command": command,
        "config": config,
        "versions": _versions(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
