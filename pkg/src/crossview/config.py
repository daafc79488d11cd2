"""Run configuration: one JSON file, every field optional, flags override."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    root: str | None = None
    layout: str = "OmniCity"
    split_file: str | None = None
    manifest: str | None = None
    layouts: dict = field(default_factory=dict)  # name -> Layout fields, overrides built-ins


@dataclass
class VoxelConfig:
    meters_per_voxel: float = 1.0
    nz: int = 64
    camera_height_m: float = 2.5


@dataclass
class ControlsConfig:
    pano_height: int = 64
    control_dims: tuple = (8, 16)
    sat_dims: tuple = (8, 8)
    beta: float = 0.05


@dataclass
class AttentionConfig:
    d: int = 16
    patch_size: int = 4
    scaled: bool = True
    control_dims: tuple = (8, 16)
    sat_dims: tuple = (8, 8)


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 50
    shape: tuple = (64, 64, 3)


@dataclass
class JudgeConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "CROSSVIEW_JUDGE_API_KEY"
    icl_count: int = 3
    icl_examples: str | None = None
    concurrency: int = 4
    retries: int = 2


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    controls: ControlsConfig = field(default_factory=ControlsConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    output_dir: str = "out"
    seed: int = 0

    def validate(self) -> "Config":
        v, c, a, d, j = self.voxel, self.controls, self.attention, self.diffusion, self.judge
        checks = [
            (v.meters_per_voxel > 0, "voxel.meters_per_voxel must be > 0"),
            (v.nz >= 2, "voxel.nz must be >= 2"),
            (v.camera_height_m > 0, "voxel.camera_height_m must be > 0"),
            (c.pano_height >= 1, "controls.pano_height must be >= 1"),
            (c.beta >= 0, "controls.beta must be >= 0"),
            (len(c.control_dims) == 2 and min(c.control_dims) >= 1, "controls.control_dims must be two positive ints"),
            (len(c.sat_dims) == 2 and min(c.sat_dims) >= 1, "controls.sat_dims must be two positive ints"),
            (a.d >= 1 and a.patch_size >= 1, "attention.d and attention.patch_size must be >= 1"),
            (d.T >= 1 and 1 <= d.steps <= d.T, "diffusion.steps must be in 1..T"),
            (0 < d.beta_start <= d.beta_end < 1, "diffusion betas must satisfy 0 < start <= end < 1"),
            (j.icl_count >= 0 and j.concurrency >= 1 and j.retries >= 1, "judge counts out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for label, p in (
            ("dataset.root", self.dataset.root),
            ("dataset.split_file", self.dataset.split_file),
            ("dataset.manifest", self.dataset.manifest),
            ("judge.icl_examples", self.judge.icl_examples),
        ):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} path {p} does not exist")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Parse ``path`` (JSON); relative paths inside resolve against its directory."""
    if path is None:
        return Config()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _build(Config, data, "")
    base = path.parent
    ds = cfg.dataset
    for name in ("root", "split_file", "manifest"):
        val = getattr(ds, name)
        if val is not None and not os.path.isabs(val):
            setattr(ds, name, str(base / val))
    if cfg.judge.icl_examples is not None and not os.path.isabs(cfg.judge.icl_examples):
        cfg.judge.icl_examples = str(base / cfg.judge.icl_examples)
    return cfg
