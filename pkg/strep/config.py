"""Run configuration: pydantic models, JSON loading, flag overrides and the echo file."""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from strep.errors import ConfigError

CONFIG_ECHO_NAME = "config.json"

# Values that depend on the point dimension when left unset.
DIM_DEFAULTS: dict[int, dict[str, float]] = {
    2: {"latent_dim": 16, "batch_frames": 128, "trans_scale": 20.0, "world_extent": 256.0},
    3: {"latent_dim": 24, "batch_frames": 8, "trans_scale": 0.5, "world_extent": 8.0},
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    latent_dim: Optional[int] = Field(
        default=None, ge=1, description="Latent dimension b (16 in 2D, 24 in 3D when unset)"
    )
    kernel_width: int = Field(
        default=1, ge=1, description="Width of the per-point convolution; 1 is a shared per-point MLP"
    )
    trans_scale: Optional[float] = Field(
        default=None, gt=0, description="Multiplier on raw translation outputs (20 px in 2D, 0.5 m in 3D)"
    )
    world_extent: Optional[float] = Field(
        default=None, gt=0, description="Coordinate scale applied before the occupancy network"
    )
    latent_mode: Literal["fused", "independent", "none"] = Field(
        default="fused",
        description="fused: temporal recurrence; independent: per-frame latents, w fixed at 0; none: no latent",
    )

    @field_validator("kernel_width")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_width must be odd")
        return value


class TrainConfig(_Strict):
    lr_net: float = Field(default=0.001, gt=0, description="Adam learning rate for decoder and occupancy weights")
    lr_latent: float = Field(default=0.0001, gt=0, description="Adam learning rate for raw latents and decay")
    iters: int = Field(default=3000, ge=0, description="Optimization iterations")
    batch_frames: Optional[int] = Field(
        default=None, ge=2, description="Frames per contiguous batch window (128 in 2D, 8 in 3D when unset)"
    )
    lambda_global: float = Field(default=1.0, ge=0, description="Weight of the occupancy loss")
    s_per_beam: int = Field(default=8, ge=1, description="Free-space samples per measured point")
    occupancy_beams: int = Field(
        default=16, ge=1, description="Measured points per frame drawn for the occupancy term each iteration"
    )
    matmul_precision: Literal["float32", "float64"] = Field(
        default="float32",
        description="Precision of the network matrix products during optimization; gradient checks always use float64",
    )
    neighbor_radius: int = Field(default=1, ge=1, description="Frames j with 0 < |i-j| <= r are neighbours")
    eval_every: int = Field(default=100, ge=1, description="History/evaluation interval in iterations")
    clip_norm: Optional[float] = Field(
        default=None, gt=0, description="Global gradient-norm clip; disabled when unset (100 is the usual guard)"
    )
    threads: int = Field(default=1, ge=1, description="Worker threads for nearest-neighbour queries")
    anchor: Literal["fit", "first"] = Field(default="fit", description="Trajectory alignment used by metrics")


class TrajectorySpec(_Strict):
    num_frames: int = Field(default=16, ge=2, description="Frames per trajectory")
    rot_range: float = Field(
        default=math.radians(10.0), ge=0, description="Per-step heading change bound, radians"
    )
    trans_range: tuple[float, float] = Field(default=(0.0, 16.0), description="Per-step travel range, pixels")
    beams: int = Field(default=256, ge=8, description="Beams per scan")
    fov: float = Field(default=2 * math.pi, gt=0, le=2 * math.pi, description="Field of view, radians")
    max_range: float = Field(default=400.0, gt=0, description="Maximum beam range, pixels")
    range_noise: float = Field(default=0.0, ge=0, description="Gaussian range noise sigma, pixels")

    @field_validator("trans_range")
    @classmethod
    def _ordered_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if low < 0 or high < low:
            raise ValueError("trans_range must satisfy 0 <= low <= high")
        return value


class RunConfig(_Strict):
    dim: Literal[2, 3] = Field(default=2, description="Point dimension")
    seed: int = Field(default=0, description="Master seed")
    out: str = Field(default="runs/latest", description="Output directory")
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)

    @property
    def latent_dim(self) -> int:
        return int(self.model.latent_dim or DIM_DEFAULTS[self.dim]["latent_dim"])

    @property
    def trans_scale(self) -> float:
        return float(self.model.trans_scale or DIM_DEFAULTS[self.dim]["trans_scale"])

    @property
    def world_extent(self) -> float:
        return float(self.model.world_extent or DIM_DEFAULTS[self.dim]["world_extent"])

    @property
    def batch_frames(self) -> int:
        return int(self.train.batch_frames or DIM_DEFAULTS[self.dim]["batch_frames"])

    def resolved(self) -> "RunConfig":
        """Copy with every dimension-dependent default written out."""
        data = self.model_dump()
        data["model"].update(
            latent_dim=self.latent_dim, trans_scale=self.trans_scale, world_extent=self.world_extent
        )
        data["train"]["batch_frames"] = self.batch_frames
        return RunConfig.model_validate(data)

    def with_dim(self, dim: int) -> "RunConfig":
        return self.model_copy(update={"dim": dim})


def _set_dotted(data: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override '{key}': '{part}' is not a section")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a JSON config file (optional) and apply dotted-key overrides on top."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")

    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}")


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / CONFIG_ECHO_NAME
    target.write_text(
        json.dumps(cfg.resolved().model_dump(mode="json"), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return target


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that shapes the decoder and occupancy weights."""
    resolved = cfg.resolved()
    payload = {"dim": resolved.dim, "model": resolved.model.model_dump(mode="json")}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
