"""On-disk formats: dataset files, checkpoints, PGM maps and pose/history CSVs.

Dataset and checkpoint files share one layout: a magic line, a single-line JSON
header, a little-endian binary payload, and (datasets only) a trailing JSON
metadata line. JSON is written with sorted keys so identical content gives
identical bytes.
"""

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from strep.config import RunConfig, canonical_json, config_hash
from strep.errors import DatasetFormatError, StrepIOError, UsageError
from strep.geometry import ROTATION_PARAMS, PointSet, Pose
from strep.losses import OccupancyNet
from strep.simulator import EnvironmentMap, SequenceDataset
from strep.strepmodel import LatentChain, PoseDecoder

DATASET_MAGIC = b"STREP-DATASET\n"
CHECKPOINT_MAGIC = b"STREP-CHECKPOINT\n"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

F64 = np.dtype("<f8")
U32 = np.dtype("<u4")


class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = Field(description="Dataset file format version")
    dim: int = Field(ge=2, le=3, description="Point dimension")
    num_frames: int = Field(ge=1, description="Number of frame records")
    has_gt: bool = Field(description="Whether every frame record carries a ground-truth pose")
    units: str = Field(default="px", description="World unit of all coordinates")


class DatasetTrailer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    env_name: Optional[str] = None
    seed: Optional[int] = None
    generator_version: Optional[str] = None


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int
    config_hash: str
    config: dict[str, Any]
    arrays: list[tuple[str, list[int]]] = Field(description="Array names and shapes in payload order")


class _Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def fail(self, message: str, offset: Optional[int] = None) -> DatasetFormatError:
        return DatasetFormatError(f"{self.source}: {message}", self.offset if offset is None else offset)

    def expect(self, magic: bytes) -> None:
        if self.data[: len(magic)] != magic:
            raise self.fail(f"missing {magic.strip().decode()} magic line", 0)
        self.offset = len(magic)

    def line(self) -> bytes:
        end = self.data.find(b"\n", self.offset)
        if end < 0:
            raise self.fail("unterminated text line")
        text = self.data[self.offset : end]
        self.offset = end + 1
        return text

    def json_line(self) -> tuple[Any, int]:
        start = self.offset
        raw = self.line()
        try:
            return json.loads(raw.decode("utf-8")), start
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise self.fail(f"malformed JSON line: {e}", start)

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        size = dtype.itemsize * count
        if self.offset + size > len(self.data):
            raise self.fail(f"payload truncated: need {size} bytes, {len(self.data) - self.offset} left")
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return values


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise StrepIOError(f"cannot read {path}: {e}")


def _write_bytes(path: str | Path, data: bytes) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    except OSError as e:
        raise StrepIOError(f"cannot write {path}: {e}")
    return target


# --- datasets -------------------------------------------------------------------


def encode_dataset(dataset: SequenceDataset, units: Optional[str] = None) -> bytes:
    header = DatasetHeader(
        format_version=DATASET_VERSION,
        dim=dataset.dim,
        num_frames=len(dataset),
        has_gt=dataset.has_gt,
        units=units or dataset.metadata.get("units") or ("px" if dataset.dim == 2 else "m"),
    )
    trailer = DatasetTrailer(
        env_name=dataset.env_name,
        seed=dataset.metadata.get("seed"),
        generator_version=dataset.metadata.get("generator_version"),
    )
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(canonical_json(header.model_dump(mode="json")).encode("utf-8") + b"\n")
    for i, frame in enumerate(dataset.frames):
        out.write(np.array([len(frame)], dtype=U32).tobytes())
        out.write(np.ascontiguousarray(frame.points, dtype=F64).tobytes())
        out.write(np.ascontiguousarray(frame.sensor_origin, dtype=F64).tobytes())
        if dataset.gt_poses is not None:
            out.write(np.ascontiguousarray(dataset.gt_poses[i].params, dtype=F64).tobytes())
    out.write(b"\n" + canonical_json(trailer.model_dump(mode="json")).encode("utf-8") + b"\n")
    return out.getvalue()


def decode_dataset(data: bytes, source: str = "<bytes>") -> SequenceDataset:
    reader = _Reader(data, source)
    reader.expect(DATASET_MAGIC)
    payload, start = reader.json_line()
    try:
        header = DatasetHeader.model_validate(payload)
    except ValidationError as e:
        raise reader.fail(f"invalid header: {e}", start)
    if header.format_version != DATASET_VERSION:
        raise reader.fail(f"unsupported format_version {header.format_version}", start)

    dim = header.dim
    frames, poses = [], []
    for i in range(header.num_frames):
        record = reader.offset
        count = int(reader.array(U32, 1)[0])
        if count == 0:
            raise reader.fail(f"frame {i} declares zero points", record)
        points = reader.array(F64, count * dim).reshape(count, dim)
        origin = reader.array(F64, dim)
        try:
            frames.append(PointSet(points.copy(), origin.copy()))
            if header.has_gt:
                poses.append(Pose.from_params(reader.array(F64, dim + ROTATION_PARAMS[dim]).copy(), dim))
        except UsageError as e:
            raise reader.fail(f"frame {i}: {e}", record)

    if reader.offset >= len(data) or data[reader.offset : reader.offset + 1] != b"\n":
        raise reader.fail("payload longer than the header declares")
    reader.offset += 1
    trailer_payload, start = reader.json_line()
    try:
        trailer = DatasetTrailer.model_validate(trailer_payload)
    except ValidationError as e:
        raise reader.fail(f"invalid metadata: {e}", start)
    if reader.offset != len(data):
        raise reader.fail("unexpected bytes after metadata")

    return SequenceDataset(
        dim=dim,
        frames=frames,
        gt_poses=poses if header.has_gt else None,
        env_name=trailer.env_name,
        metadata={"seed": trailer.seed, "generator_version": trailer.generator_version, "units": header.units},
    )


def write_dataset(path: str | Path, dataset: SequenceDataset) -> Path:
    return _write_bytes(path, encode_dataset(dataset))


def read_dataset(path: str | Path) -> SequenceDataset:
    return decode_dataset(_read_bytes(path), str(path))


# --- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    decoder: PoseDecoder
    occupancy: OccupancyNet
    decay: np.ndarray
    latents: list[np.ndarray]

    def chains(self) -> list[LatentChain]:
        return [LatentChain(raw=raw, decay=self.decay) for raw in self.latents]


def _checkpoint_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = sorted(ckpt.decoder.weights.items()) + sorted(ckpt.occupancy.weights.items())
    arrays.append(("latent/decay", ckpt.decay))
    arrays.extend((f"latent/{i}/raw", raw) for i, raw in enumerate(ckpt.latents))
    return arrays


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config.resolved()
    arrays = _checkpoint_arrays(ckpt)
    header = CheckpointHeader(
        format_version=CHECKPOINT_VERSION,
        config_hash=config_hash(cfg),
        config=cfg.model_dump(mode="json"),
        arrays=[(name, list(np.shape(value))) for name, value in arrays],
    )
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(canonical_json(header.model_dump(mode="json")).encode("utf-8") + b"\n")
    for _, value in arrays:
        out.write(np.ascontiguousarray(value, dtype=F64).tobytes())
    return out.getvalue()


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    reader.expect(CHECKPOINT_MAGIC)
    payload, start = reader.json_line()
    try:
        header = CheckpointHeader.model_validate(payload)
        cfg = RunConfig.model_validate(header.config)
    except ValidationError as e:
        raise reader.fail(f"invalid checkpoint header: {e}", start)
    if header.format_version != CHECKPOINT_VERSION:
        raise reader.fail(f"unsupported format_version {header.format_version}", start)
    if header.config_hash != config_hash(cfg):
        raise reader.fail("config hash does not match the stored configuration", start)

    arrays: dict[str, np.ndarray] = {}
    for name, shape in header.arrays:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = reader.array(F64, count).reshape(shape).copy()
    if reader.offset != len(data):
        raise reader.fail("unexpected bytes after the last array")

    use_latent = cfg.model.latent_mode != "none"
    decoder = PoseDecoder(
        cfg.dim,
        cfg.latent_dim,
        {k: v for k, v in arrays.items() if k.startswith("decoder/")},
        cfg.model.kernel_width,
        cfg.trans_scale,
        use_latent=use_latent,
    )
    occupancy = OccupancyNet(cfg.dim, {k: v for k, v in arrays.items() if k.startswith("occupancy/")}, cfg.world_extent)
    latents = []
    while f"latent/{len(latents)}/raw" in arrays:
        latents.append(arrays[f"latent/{len(latents)}/raw"])
    if "latent/decay" not in arrays:
        raise reader.fail("checkpoint has no latent/decay array", start)
    return Checkpoint(cfg, decoder, occupancy, arrays["latent/decay"], latents)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    return _write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(_read_bytes(path), str(path))


# --- maps ----------------------------------------------------------------------------


def write_pgm(path: str | Path, env: EnvironmentMap) -> Path:
    """Binary P5 greymap, 0 = occupied, 255 = free, first row = y 0."""
    pixels = np.where(env.occupancy, 0, 255).astype(np.uint8)
    header = f"P5\n# {env.name}\n{env.width} {env.height}\n255\n".encode("ascii")
    return _write_bytes(path, header + pixels.tobytes())


def read_pgm(path: str | Path, name: Optional[str] = None) -> EnvironmentMap:
    data = _read_bytes(path)
    tokens: list[bytes] = []
    comment: Optional[str] = None
    offset = 0
    while len(tokens) < 4:
        if offset >= len(data):
            raise DatasetFormatError(f"{path}: truncated PGM header", offset)
        if data[offset : offset + 1] == b"#":
            end = data.find(b"\n", offset)
            comment = comment or data[offset + 1 : end].decode("ascii", "replace").strip()
            offset = end + 1
            continue
        if data[offset : offset + 1].isspace():
            offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        tokens.append(data[start:offset])
    offset += 1
    if tokens[0] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary PGM (P5) file", 0)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetFormatError(f"{path}: malformed PGM header", 0)
    if maxval != 255 or len(data) - offset != width * height:
        raise DatasetFormatError(f"{path}: PGM payload does not match {width}x{height} at maxval 255", offset)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(height, width)
    return EnvironmentMap(name or comment or Path(path).stem, pixels < 128)


# --- CSV -------------------------------------------------------------------------------


def _pose_columns(dim: int) -> list[str]:
    return ["frame"] + (["tx", "ty", "r0"] if dim == 2 else ["tx", "ty", "tz", "r0", "r1", "r2"])


def write_poses(path: str | Path, poses: Sequence[Pose]) -> Path:
    if not poses:
        raise UsageError("no poses to write")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_pose_columns(poses[0].dim))
    for i, pose in enumerate(poses):
        writer.writerow([i] + [repr(float(v)) for v in pose.params])
    return _write_bytes(path, buffer.getvalue().encode("utf-8"))


def read_poses(path: str | Path) -> list[Pose]:
    text = _read_bytes(path).decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise StrepIOError(f"{path}: empty pose file")
    header = rows[0]
    dim = 2 if header == _pose_columns(2) else 3 if header == _pose_columns(3) else None
    if dim is None:
        raise StrepIOError(f"{path}: unexpected pose header {header}")
    try:
        return [Pose.from_params([float(v) for v in row[1:]], dim) for row in rows[1:] if row]
    except (ValueError, UsageError) as e:
        raise StrepIOError(f"{path}: {e}")


HISTORY_FIELDS = ("iteration", "local_loss", "global_loss", "total", "ate", "point_dist")


def write_rows(path: str | Path, fields: Sequence[str], rows: Sequence[dict[str, Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return _write_bytes(path, buffer.getvalue().encode("utf-8"))


def write_history(path: str | Path, history: Sequence[Any]) -> Path:
    return write_rows(path, HISTORY_FIELDS, [record.as_row() for record in history])
