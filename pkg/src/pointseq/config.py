"""Run configuration: dataclasses mirroring the JSON config file.

The JSON keys match the field names below, except that the reconstruction
weight is spelled "lambda" in JSON (a Python keyword, stored as `lambda_`).
Partial JSON files are merged over the defaults.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Union

from pointseq.errors import ConfigError


@dataclass
class EncoderConfig:
    n_points: int = 256
    r_anchors: int = 32
    radius: float = 0.4
    k_neighbors: int = 9
    temporal_kernel: int = 3
    temporal_stride: int = 2
    c_out: int = 128
    l_out: int = 2


@dataclass
class TransformerConfig:
    layers: int = 3
    heads: int = 4
    c: int = 128
    ffn_mult: int = 4


@dataclass
class Toggles:
    local_on: bool = True
    global_on: bool = True
    recon_on: bool = True
    hard_negatives_on: bool = True
    colorize_on: bool = True
    cross_batch_local: bool = False


@dataclass
class RunConfig:
    T: int = 24
    frame_stride: int = 2
    N: int = 256
    S: int = 6
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    tau: float = 0.1
    lambda_: float = 1.0
    n_prime: int = 256
    batch: int = 8
    lr: float = 8e-4
    epochs: int = 8
    seed: int = 0
    proj_dim: int = 64
    clip_grad: float = 0.0  # 0 disables clipping
    augment: bool = True  # seeded random scaling + random FPS starts during pretraining
    toggles: Toggles = field(default_factory=Toggles)

    @property
    def M(self) -> int:
        return self.T // self.S

    def validate(self) -> None:
        if self.S < 1 or self.T < 1 or self.T % self.S != 0:
            raise ConfigError(f"T must be a positive multiple of S, got T={self.T}, S={self.S}")
        if self.N != self.encoder.n_points:
            raise ConfigError(f"N={self.N} disagrees with encoder.n_points={self.encoder.n_points}")
        if self.encoder.temporal_kernel % 2 != 1:
            raise ConfigError(f"temporal_kernel must be odd, got {self.encoder.temporal_kernel}")
        if self.encoder.temporal_stride < 1:
            raise ConfigError("temporal_stride must be >= 1")
        expected_l = math.ceil(self.M / self.encoder.temporal_stride)
        if self.encoder.l_out != expected_l:
            raise ConfigError(
                f"encoder.l_out={self.encoder.l_out} inconsistent with "
                f"ceil(M/temporal_stride)={expected_l} (M={self.M})")
        if not 1 <= self.encoder.r_anchors <= self.N:
            raise ConfigError(f"r_anchors={self.encoder.r_anchors} out of range for N={self.N}")
        if self.encoder.radius <= 0:
            raise ConfigError("encoder.radius must be positive")
        if self.encoder.k_neighbors < 1:
            raise ConfigError("encoder.k_neighbors must be >= 1")
        if self.transformer.c != self.encoder.c_out:
            raise ConfigError(
                f"transformer.c={self.transformer.c} must equal encoder.c_out={self.encoder.c_out}")
        if self.transformer.c % self.transformer.heads != 0:
            raise ConfigError(
                f"transformer width {self.transformer.c} not divisible by heads {self.transformer.heads}")
        if self.transformer.layers < 1:
            raise ConfigError("transformer.layers must be >= 1")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lambda_}")
        root = math.isqrt(self.n_prime)
        if root * root != self.n_prime:
            raise ConfigError(f"n_prime={self.n_prime} must be a perfect square")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")
        t = self.toggles
        if not (t.local_on or t.global_on or t.recon_on):
            raise ConfigError("at least one of local_on/global_on/recon_on must be enabled")
        if t.hard_negatives_on and t.local_on and self.S < 3:
            raise ConfigError("hard negatives require S >= 3")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_json_dict(cls, data: dict) -> "RunConfig":
        base = cls()
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        unknown = set(data) - set(base.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for sub, sub_cls in (("encoder", EncoderConfig), ("transformer", TransformerConfig),
                             ("toggles", Toggles)):
            if sub in data:
                sub_data = data[sub]
                if not isinstance(sub_data, dict):
                    raise ConfigError(f"config key {sub!r} must be an object")
                sub_unknown = set(sub_data) - set(sub_cls.__dataclass_fields__)
                if sub_unknown:
                    raise ConfigError(f"unknown {sub} keys: {sorted(sub_unknown)}")
                data[sub] = replace(getattr(base, sub), **sub_data)
        return replace(base, **data)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    cfg = RunConfig.from_json_dict(data)
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n")


def config_json(cfg: RunConfig) -> str:
    """Canonical single-line JSON used inside checkpoints."""
    return json.dumps(cfg.to_json_dict(), sort_keys=True, separators=(",", ":"))


def micro_config() -> RunConfig:
    """Tiny instance used by the gradient-check command and fast tests."""
    return RunConfig(
        T=12, N=32, S=3, batch=2,
        encoder=EncoderConfig(n_points=32, r_anchors=8, radius=0.4, k_neighbors=9,
                              temporal_kernel=3, temporal_stride=2, c_out=16, l_out=2),
        transformer=TransformerConfig(layers=1, heads=2, c=16, ffn_mult=2),
        n_prime=16, proj_dim=8, epochs=1,
    )
