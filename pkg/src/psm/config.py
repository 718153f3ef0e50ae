"""Pipeline configuration: dataclass defaults < ``key = value`` file < CLI flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path


def default_seed():
    return int(os.environ.get("PSM_SEED", "0"))


@dataclass
class PipelineConfig:
    task: str = "seg"  # seg | det
    proxy_task: str = "similarity"  # similarity | contrastive
    depth: int = 1
    beta: float = 2.5
    lam: float = 0.5
    k: int = 3
    seed: int = dataclasses.field(default_factory=default_seed)
    proxy_epochs: int = 3
    proxy_lr: float = 1e-4
    train_epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 4
    width: int = 16
    z_reduce: str = "sum"  # sum | l1 | l2
    fg_rule: str = "contrast"  # contrast | psm
    middle: str = "background"  # background | ignore
    cluster_scope: str = "dataset"  # dataset | image
    psm_smooth: float = 0.0  # Gaussian sigma applied to the PSM before fusion
    n_init: int = 10  # K-means restarts
    max_pixels: int = 20000
    seed_disk_radius: float = 2.0
    window_radius: int = 3
    min_score: float = 0.3
    smooth_sigma: float = 1.5
    threshold: float = 0.5
    min_area: int = 4
    match_radius: float = 6.0
    n_classes: int = 2
    evaluate: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in ("seg", "det"):
            raise ValueError(f"task must be seg or det, got {self.task!r}")
        if self.proxy_task not in ("similarity", "contrastive"):
            raise ValueError(f"unknown proxy task {self.proxy_task!r}")
        if self.depth not in (1, 2, 3, 4):
            raise ValueError("depth must be in 1..4")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be nonnegative")
        if self.psm_smooth < 0:
            raise ValueError("psm_smooth must be nonnegative")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.k < 2:
            raise ValueError("K must be >= 2")
        if self.cluster_scope not in ("dataset", "image"):
            raise ValueError(f"unknown cluster scope {self.cluster_scope!r}")
        if self.fg_rule not in ("contrast", "psm"):
            raise ValueError(f"unknown foreground rule {self.fg_rule!r}")

    @classmethod
    def preset(cls, task="seg", **overrides):
        """Segmentation defaults, or the detection preset (beta 4, two classes)."""
        base = {"task": task}
        if task == "det":
            base.update(beta=4.0, n_classes=2)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(kind, value):
    if kind in (bool, "bool"):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return str(value).strip()


def parse_config_text(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name: f.type for f in fields(PipelineConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise ValueError(f"line {n}: cannot parse {line!r}")
        out[key] = _coerce(known[key], value.strip())
    return out


def load_config(path=None, task=None, **flags):
    """Merge defaults, an optional config file and explicit flag values (None = unset)."""
    values = {}
    if task is not None:
        values["task"] = task
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in flags.items() if v is not None})
    return PipelineConfig.preset(**values)
