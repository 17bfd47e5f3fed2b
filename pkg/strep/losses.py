"""Registration losses: pairwise Chamfer between neighbouring frames and the
occupancy (binary cross entropy) loss over the aligned global scene.

Every loss has a graph form (`*_term`, differentiable, used by the trainer) and a
plain form taking geometry objects (evaluation and tests). The plain forms run the
graph form on constants so both always agree.
"""

from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from strep.diffengine import Graph, Node
from strep.errors import NumericError, UsageError
from strep.geometry import GlobalScene, PointSet
from strep.strepmodel import init_decoder_weights

OCCUPANCY_WIDTHS = (64, 256, 512, 256, 128, 1)
BRUTE_FORCE_LIMIT = 256 * 256
FREE_RANGE = (0.05, 0.95)

SearchMethod = Literal["auto", "kdtree", "brute"]


@dataclass(frozen=True)
class NeighborSpec:
    radius: int = 1

    def __post_init__(self):
        if self.radius < 1:
            raise UsageError(f"neighbour radius must be >= 1, got {self.radius}")

    def pairs(self, count: int) -> list[tuple[int, int]]:
        """Ordered pairs (i, j) with 0 < |i - j| <= radius."""
        return [
            (i, j)
            for i in range(count)
            for j in range(max(0, i - self.radius), min(count, i + self.radius + 1))
            if i != j
        ]


# --- nearest neighbours ------------------------------------------------------


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between matched rows, summed coordinate by coordinate."""
    total = (a[:, 0] - b[:, 0]) ** 2
    for k in range(1, a.shape[1]):
        total = total + (a[:, k] - b[:, k]) ** 2
    return total


def _brute_nearest(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    total = (query[:, None, 0] - target[None, :, 0]) ** 2
    for k in range(1, query.shape[1]):
        total = total + (query[:, None, k] - target[None, :, k]) ** 2
    return np.argmin(total, axis=1)


def nearest_indices(
    query: np.ndarray, target: np.ndarray, method: SearchMethod = "auto", workers: int = 1
) -> np.ndarray:
    """Index into `target` of the nearest point to every query row (exact search)."""
    if method == "auto":
        method = "brute" if query.shape[0] * target.shape[0] <= BRUTE_FORCE_LIMIT else "kdtree"
    if method == "brute":
        return _brute_nearest(query, target)
    if method == "kdtree":
        _, idx = cKDTree(target).query(query, k=1, workers=workers)
        return np.asarray(idx, dtype=np.intp)
    raise UsageError(f"unknown nearest-neighbour method '{method}'")


def _coords(x: PointSet | np.ndarray) -> np.ndarray:
    return x.points if isinstance(x, PointSet) else np.asarray(x, dtype=np.float64)


def chamfer(
    a: PointSet | np.ndarray, b: PointSet | np.ndarray, method: SearchMethod = "auto", workers: int = 1
) -> float:
    """Sum over a of squared distance to the nearest b, plus the same from b to a."""
    pa, pb = _coords(a), _coords(b)
    if pa.size == 0 or pb.size == 0:
        raise UsageError("chamfer needs two non-empty point sets")
    if pa.shape[1] != pb.shape[1]:
        raise UsageError(f"chamfer between {pa.shape[1]}D and {pb.shape[1]}D points")
    forward = _squared_distances(pa, pb[nearest_indices(pa, pb, method, workers)]).sum()
    backward = _squared_distances(pb, pa[nearest_indices(pb, pa, method, workers)]).sum()
    return float(forward + backward)


def chamfer_term(graph: Graph, a: Node, b: Node, workers: int = 1) -> Node:
    """Differentiable Chamfer; nearest neighbours are fixed at their forward values."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise UsageError("chamfer needs two non-empty point sets")
    ab = nearest_indices(a.value, b.value, workers=workers)
    ba = nearest_indices(b.value, a.value, workers=workers)
    forward = graph.sum(graph.square(graph.sub(a, graph.gather(b, ab))))
    backward = graph.sum(graph.square(graph.sub(b, graph.gather(a, ba))))
    return graph.add(forward, backward)


def local_term(graph: Graph, frames: Sequence[Node], spec: NeighborSpec, workers: int = 1) -> Node:
    """Sum of Chamfer over ordered neighbour pairs; each unordered pair contributes twice."""
    if len(frames) < 2:
        raise UsageError("the local loss needs at least two frames")
    total: Optional[Node] = None
    for i, j in spec.pairs(len(frames)):
        if j < i:
            continue
        pair = graph.scale(chamfer_term(graph, frames[i], frames[j], workers), 2.0)
        total = pair if total is None else graph.add(total, pair)
    assert total is not None
    return total


def local_loss(globals: GlobalScene, spec: NeighborSpec, workers: int = 1) -> float:
    graph = Graph()
    frames = [graph.constant(frame.points) for frame in globals.frames]
    return float(local_term(graph, frames, spec, workers).value)


# --- free space ----------------------------------------------------------------


def free_space_fractions(count: int, s_per_beam: int, rng) -> np.ndarray:
    """(count, s) fractions stratified over FREE_RANGE, one draw inside each bin."""
    if s_per_beam < 1:
        raise UsageError(f"s_per_beam must be >= 1, got {s_per_beam}")
    low, high = FREE_RANGE
    width = (high - low) / s_per_beam
    jitter = np.asarray(rng.random(size=(count, s_per_beam)), dtype=np.float64)
    return low + (np.arange(s_per_beam) + jitter) * width


def free_space_samples(points: np.ndarray, origin: np.ndarray, s_per_beam: int, rng) -> np.ndarray:
    fractions = free_space_fractions(points.shape[0], s_per_beam, rng)
    rays = points - origin
    samples = origin + fractions[:, :, None] * rays[:, None, :]
    return samples.reshape(-1, points.shape[1])


def sample_free_space(frame_global: PointSet, origin_global: np.ndarray, s_per_beam: int, rng) -> PointSet:
    """Points strictly between the sensor origin and each measured point (label: free).

    The construction is affine, so sampling in the sensor frame and then moving the
    samples equals sampling in the world frame.
    """
    origin = np.asarray(origin_global, dtype=np.float64)
    return PointSet(free_space_samples(frame_global.points, origin, s_per_beam, rng), origin)


# --- occupancy network -------------------------------------------------------------


class OccupancyNet:
    """Coordinates -> occupancy logit; weights are the learnable part of the global loss."""

    def __init__(
        self,
        dim: int,
        weights: Mapping[str, np.ndarray],
        world_extent: float | Sequence[float],
        widths: Sequence[int] = OCCUPANCY_WIDTHS,
    ):
        if not widths or widths[-1] != 1:
            raise UsageError("the occupancy network must end in a single logit")
        self.dim = dim
        self.widths = tuple(widths)
        extent = np.broadcast_to(np.asarray(world_extent, dtype=np.float64), (dim,)).copy()
        if np.any(extent <= 0):
            raise UsageError("world_extent must be positive")
        self.world_extent = extent
        self.weights = {name: np.array(value, dtype=np.float64) for name, value in weights.items()}
        for name, shape in self.weight_shapes(dim, self.widths).items():
            if name not in self.weights or self.weights[name].shape != shape:
                raise UsageError(f"occupancy weight '{name}' should have shape {shape}")

    @staticmethod
    def weight_shapes(dim: int, widths: Sequence[int] = OCCUPANCY_WIDTHS) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        width = dim
        for i, out in enumerate(widths):
            shapes[f"occupancy/layer{i}/W"] = (width, out)
            shapes[f"occupancy/layer{i}/b"] = (out,)
            width = out
        return shapes

    @classmethod
    def initialize(
        cls, dim: int, world_extent: float, rng: np.random.Generator, widths: Sequence[int] = OCCUPANCY_WIDTHS
    ) -> "OccupancyNet":
        return cls(dim, init_decoder_weights(cls.weight_shapes(dim, widths), rng), world_extent, widths)

    @classmethod
    def zeros(cls, dim: int, world_extent: float) -> "OccupancyNet":
        return cls(dim, {name: np.zeros(shape) for name, shape in cls.weight_shapes(dim).items()}, world_extent)

    def bind(self, graph: Graph, trainable: bool = True) -> dict[str, Node]:
        if trainable:
            return {name: graph.param(name, value) for name, value in self.weights.items()}
        return {name: graph.constant(value) for name, value in self.weights.items()}

    def forward(self, graph: Graph, params: Mapping[str, Node], coords: Node) -> Node:
        x = graph.scale(coords, 1.0 / self.world_extent)
        last = len(self.widths) - 1
        for i in range(last + 1):
            x = graph.linear(params[f"occupancy/layer{i}/W"], params[f"occupancy/layer{i}/b"], x)
            if i < last:
                x = graph.relu(x)
        return x

    def logits(self, coords: np.ndarray) -> np.ndarray:
        graph = Graph()
        return self.forward(graph, self.bind(graph, trainable=False), graph.constant(coords)).value[:, 0]


def occupancy_frame_term(
    graph: Graph,
    net: OccupancyNet,
    params: Mapping[str, Node],
    occupied: Node,
    free: Node,
) -> Node:
    """mean BCE(occupied, 1) + mean BCE(free, 0) for one aligned frame."""
    hit = graph.mean(graph.sigmoid_bce(net.forward(graph, params, occupied), 1.0))
    miss = graph.mean(graph.sigmoid_bce(net.forward(graph, params, free), 0.0))
    return graph.add(hit, miss)


def occupancy_stacked_term(
    graph: Graph, net: OccupancyNet, params: Mapping[str, Node], samples: Node, occupied: int
) -> Node:
    """`occupancy_frame_term` for samples stacked as [occupied rows; free rows], in one network pass."""
    if not 0 < occupied < samples.shape[0]:
        raise UsageError(f"need occupied and free rows, got {occupied} of {samples.shape[0]} occupied")
    logits = net.forward(graph, params, samples)
    hit = graph.mean(graph.sigmoid_bce(graph.gather(logits, np.arange(occupied)), 1.0))
    miss = graph.mean(graph.sigmoid_bce(graph.gather(logits, np.arange(occupied, samples.shape[0])), 0.0))
    return graph.add(hit, miss)


def global_term(graph: Graph, per_frame: Sequence[Node]) -> Node:
    if not per_frame:
        raise UsageError("the global loss needs at least one frame")
    total = per_frame[0]
    for term in per_frame[1:]:
        total = graph.add(total, term)
    return graph.scale(total, 1.0 / len(per_frame))


def global_loss(scene: GlobalScene, net: OccupancyNet, s_per_beam: int, rng) -> float:
    if len(scene) == 0:
        raise UsageError("the global loss needs a non-empty scene")
    graph = Graph()
    params = net.bind(graph, trainable=False)
    terms = []
    for frame, origin in zip(scene.frames, scene.origins):
        free = sample_free_space(frame, origin, s_per_beam, rng)
        terms.append(
            occupancy_frame_term(graph, net, params, graph.constant(frame.points), graph.constant(free.points))
        )
    return float(global_term(graph, terms).value)


def total_loss(
    scene: GlobalScene,
    spec: NeighborSpec,
    net: OccupancyNet,
    lambda_global: float,
    s_per_beam: int,
    rng,
) -> float:
    if lambda_global < 0:
        raise UsageError("lambda_global must be non-negative")
    local = local_loss(scene, spec)
    if lambda_global == 0:
        return local
    value = local + lambda_global * global_loss(scene, net, s_per_beam, rng)
    if not np.isfinite(value):
        raise NumericError("total loss is not finite", term="total")
    return value
