"""Per-frame latent chain with temporal fusion and the shared pose decoder.

The decoder concatenates the frame's fused latent to every point, runs a
per-point network, max-pools over points and regresses the pose from the pooled
feature. There is no encoder: the latents are free optimization variables.
"""

from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence

import numpy as np

from strep.diffengine import Graph, Node
from strep.errors import UsageError
from strep.geometry import ROTATION_PARAMS, PointSet, Pose

LatentMode = Literal["fused", "independent", "none"]

POINT_WIDTHS = (64, 256, 1024)
HEAD_WIDTHS = (512, 128)
DECAY_INIT = 0.5


@dataclass
class LatentChain:
    raw: np.ndarray  # (k, b)
    decay: np.ndarray  # (b,)

    def __post_init__(self):
        self.raw = np.array(self.raw, dtype=np.float64)
        self.decay = np.array(self.decay, dtype=np.float64).reshape(-1)
        if self.raw.ndim != 2 or self.raw.shape[0] < 1:
            raise UsageError(f"raw latents must be a non-empty (k, b) array, got {self.raw.shape}")
        if self.decay.shape != (self.raw.shape[1],):
            raise UsageError(f"decay has length {self.decay.shape[0]}, latents have b={self.raw.shape[1]}")

    @property
    def b(self) -> int:
        return int(self.raw.shape[1])

    def __len__(self) -> int:
        return int(self.raw.shape[0])


def fuse_nodes(graph: Graph, raw: Node, decay: Optional[Node], count: Optional[int] = None) -> list[Node]:
    """z_1 = raw_1, z_k = raw_k + decay * z_(k-1); `decay=None` keeps frames independent."""
    count = raw.shape[0] if count is None else count
    fused = [graph.gather(raw, 0)]
    for k in range(1, count):
        current = graph.gather(raw, k)
        if decay is not None:
            current = graph.add(current, graph.mul(decay, fused[-1]))
        fused.append(current)
    return fused


def fuse_latents(chain: LatentChain) -> list[np.ndarray]:
    graph = Graph()
    nodes = fuse_nodes(graph, graph.constant(chain.raw), graph.constant(chain.decay))
    return [node.value.copy() for node in nodes]


def _reflect(indices: np.ndarray, n: int) -> np.ndarray:
    indices = np.where(indices < 0, -indices, indices)
    indices = np.where(indices >= n, 2 * (n - 1) - indices, indices)
    return np.clip(indices, 0, n - 1)


class PoseDecoder:
    """Shared network g_theta: (frame points, fused latent) -> pose parameters."""

    def __init__(
        self,
        dim: int,
        latent_dim: int,
        weights: Mapping[str, np.ndarray],
        kernel_width: int = 1,
        trans_scale: float = 20.0,
        use_latent: bool = True,
        point_widths: Sequence[int] = POINT_WIDTHS,
        head_widths: Sequence[int] = HEAD_WIDTHS,
    ):
        if dim not in ROTATION_PARAMS:
            raise UsageError(f"dimension must be 2 or 3, got {dim}")
        if kernel_width < 1 or kernel_width % 2 == 0:
            raise UsageError(f"kernel_width must be an odd integer >= 1, got {kernel_width}")
        if trans_scale <= 0:
            raise UsageError("trans_scale must be positive")
        self.dim = dim
        self.latent_dim = latent_dim
        self.kernel_width = kernel_width
        self.trans_scale = float(trans_scale)
        self.use_latent = use_latent
        self.point_widths = tuple(point_widths)
        self.head_widths = tuple(head_widths)
        self.weights = {name: np.array(value, dtype=np.float64) for name, value in weights.items()}
        expected = self.weight_shapes(
            dim, latent_dim if use_latent else 0, kernel_width, self.point_widths, self.head_widths
        )
        for name, shape in expected.items():
            if name not in self.weights or self.weights[name].shape != shape:
                got = self.weights[name].shape if name in self.weights else None
                raise UsageError(f"decoder weight '{name}' should have shape {shape}, got {got}")
            if not np.all(np.isfinite(self.weights[name])):
                raise UsageError(f"decoder weight '{name}' is not finite")

    @property
    def out_dim(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @staticmethod
    def weight_shapes(
        dim: int,
        latent_dim: int,
        kernel_width: int = 1,
        point_widths: Sequence[int] = POINT_WIDTHS,
        head_widths: Sequence[int] = HEAD_WIDTHS,
    ) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        width = dim + latent_dim
        for i, out in enumerate(point_widths):
            shapes[f"decoder/point{i}/W"] = (kernel_width * width, out)
            shapes[f"decoder/point{i}/b"] = (out,)
            width = out
        for i, out in enumerate(tuple(head_widths) + (dim * (dim + 1) // 2,)):
            shapes[f"decoder/head{i}/W"] = (width, out)
            shapes[f"decoder/head{i}/b"] = (out,)
            width = out
        return shapes

    def bind(self, graph: Graph, trainable: bool = True) -> dict[str, Node]:
        if trainable:
            return {name: graph.param(name, value) for name, value in self.weights.items()}
        return {name: graph.constant(value) for name, value in self.weights.items()}

    def _neighbourhood(self, graph: Graph, x: Node) -> Node:
        if self.kernel_width == 1:
            return x
        n = x.shape[0]
        half = self.kernel_width // 2
        rows = np.arange(n)
        taps = [graph.gather(x, _reflect(rows + offset, n)) for offset in range(-half, half + 1)]
        stacked = taps[0]
        for tap in taps[1:]:
            stacked = graph.concat(stacked, tap)
        return stacked

    def forward(
        self,
        graph: Graph,
        params: Mapping[str, Node],
        points: np.ndarray,
        z: Optional[Node],
    ) -> tuple[Node, Node]:
        """Return (translation, rotation) nodes for one frame given its fused latent."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise UsageError(f"{self.dim}D decoder cannot take points of shape {points.shape}")
        if self.use_latent:
            if z is None or z.shape != (self.latent_dim,):
                raise UsageError(f"decoder expects a latent of length {self.latent_dim}")
            x = graph.concat(points, z)
        else:
            x = graph.constant(points)

        for i in range(len(self.point_widths)):
            x = graph.relu(
                graph.linear(params[f"decoder/point{i}/W"], params[f"decoder/point{i}/b"], self._neighbourhood(graph, x))
            )
        feature = graph.max_over_points(x)

        last = len(self.head_widths)
        for i in range(last + 1):
            feature = graph.linear(params[f"decoder/head{i}/W"], params[f"decoder/head{i}/b"], feature)
            if i < last:
                feature = graph.relu(feature)

        translation = graph.scale(graph.gather(feature, np.arange(self.dim)), self.trans_scale)
        rotation = graph.gather(feature, np.arange(self.dim, self.out_dim))
        return translation, rotation


def decode_pose(decoder: PoseDecoder, frame: PointSet, z: Optional[np.ndarray]) -> Pose:
    if frame.dim != decoder.dim:
        raise UsageError(f"{decoder.dim}D decoder cannot decode a {frame.dim}D frame")
    graph = Graph()
    params = decoder.bind(graph, trainable=False)
    z_node = graph.constant(z) if (decoder.use_latent and z is not None) else None
    translation, rotation = decoder.forward(graph, params, frame.points, z_node)
    return Pose(translation.value, rotation.value)


def init_decoder_weights(
    shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, drawn in name order of `shapes`."""
    weights = {}
    for name, shape in shapes.items():
        if name.endswith("/b"):
            weights[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def init_chain(num_frames: int, latent_dim: int, rng: np.random.Generator, decay: Optional[np.ndarray] = None) -> LatentChain:
    if latent_dim < 1:
        raise UsageError("latent dimension must be at least 1")
    raw = rng.standard_normal((num_frames, latent_dim))
    decay = np.full(latent_dim, DECAY_INIT) if decay is None else decay
    return LatentChain(raw=raw, decay=decay)


def init_model(
    dim: int,
    b: int,
    seed: int,
    num_frames: int = 1,
    kernel_width: int = 1,
    trans_scale: float = 20.0,
    latent_mode: LatentMode = "fused",
) -> tuple[PoseDecoder, LatentChain]:
    """Seeded decoder and latent chain; decoder draws do not depend on `num_frames`."""
    if b < 1:
        raise UsageError("latent dimension b must be at least 1")
    decoder_seq, latent_seq = np.random.SeedSequence(seed).spawn(2)
    use_latent = latent_mode != "none"
    shapes = PoseDecoder.weight_shapes(dim, b if use_latent else 0, kernel_width)
    weights = init_decoder_weights(shapes, np.random.default_rng(decoder_seq))
    decoder = PoseDecoder(dim, b, weights, kernel_width, trans_scale, use_latent=use_latent)
    chain = init_chain(num_frames, b, np.random.default_rng(latent_seq))
    if latent_mode != "fused":
        chain.decay = np.zeros(b)
    return decoder, chain


def decode_chain(decoder: PoseDecoder, chain: Optional[LatentChain], frames: Sequence[PointSet]) -> list[Pose]:
    """Poses of a whole sequence from its latent chain (forward pass only)."""
    if not decoder.use_latent:
        return [decode_pose(decoder, frame, None) for frame in frames]
    if chain is None or len(chain) != len(frames):
        raise UsageError("a latent chain with one latent per frame is required")
    return [decode_pose(decoder, frame, z) for frame, z in zip(frames, fuse_latents(chain))]
