"""Finite-difference suite for the gradient engine.

Each case is a scalar built from registered parameters: single primitives checked
with a fixed random weighting, and the composites the trainer differentiates
(decoder forward, latent fusion, Chamfer, occupancy loss, the full objective).
Points are redrawn until every ReLU input and every max-pool column is at least
KINK_MARGIN away from a kink, so the central differences never straddle one.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from strep.diffengine import Graph, Node, grad_check
from strep.errors import GenerationError
from strep.geometry import ROTATION_PARAMS
from strep.logs import ProgressCallback
from strep.losses import (
    NeighborSpec,
    OccupancyNet,
    chamfer_term,
    free_space_samples,
    global_term,
    local_term,
    occupancy_frame_term,
)
from strep.strepmodel import PoseDecoder, fuse_nodes

logger = logging.getLogger(__name__)

PRIMITIVE_TOL = 1e-5
DEEP_TOL = 1e-4
KINK_MARGIN = 1e-4
TIE_RETRIES = 50
COMPOSITE_ENTRIES = 4

SMALL_POINT_WIDTHS = (8, 16, 32)
SMALL_HEAD_WIDTHS = (16, 8)
SMALL_OCCUPANCY_WIDTHS = (8, 16, 8, 1)

Builder = Callable[[Graph, Mapping[str, Node]], Node]


@dataclass
class CheckCase:
    name: str
    builder: Builder
    params: dict[str, np.ndarray]
    tol: float = PRIMITIVE_TOL
    h: float = 1e-5
    max_entries: Optional[int] = None


@dataclass
class SuiteRow:
    name: str
    seeds: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def as_row(self) -> dict[str, object]:
        return {"case": self.name, "seeds": self.seeds, "max_rel_error": self.worst, "tol": self.tol, "passed": self.passed}


def _project(graph: Graph, node: Node, weights: np.ndarray) -> Node:
    return graph.sum(graph.mul(node, graph.constant(weights)))


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, size=shape)


def _angles(rng: np.random.Generator, dim: int) -> np.ndarray:
    if dim == 2:
        return rng.uniform(-np.pi, np.pi, size=1)
    # keep the pitch away from gimbal lock
    return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0), rng.uniform(-np.pi, np.pi)])


def kink_margin(graph: Graph) -> float:
    """Smallest distance of any ReLU input to 0 or of any max-pool winner to its runner-up.

    Pooled columns whose two largest entries are both exactly 0 are skipped: those
    are rows clamped by a ReLU, and their gradient is zero whichever row wins.
    """
    margin = np.inf
    for node in graph.nodes:
        if node.op_tag == "relu":
            margin = min(margin, float(np.min(np.abs(node.parents[0].value))))
        elif node.op_tag == "max_over_points" and node.parents[0].shape[0] > 1:
            top = np.sort(node.parents[0].value, axis=0)[-2:]
            live = (top[0] != 0.0) | (top[1] != 0.0)
            if np.any(live):
                margin = min(margin, float(np.min(top[1, live] - top[0, live])))
    return margin


def _margin_of(case: CheckCase) -> float:
    graph = Graph()
    nodes = {name: graph.param(name, value) for name, value in case.params.items()}
    case.builder(graph, nodes)
    return kink_margin(graph)


# --- primitives ---------------------------------------------------------------------


def _unary(name: str, op: Callable[[Graph, Node], Node], x: np.ndarray, rng: np.random.Generator) -> CheckCase:
    scratch = Graph()
    weights = rng.normal(size=np.shape(op(scratch, scratch.constant(x)).value))
    return CheckCase(name, lambda g, n: _project(g, op(g, n["x"]), weights), {"x": x})


def _binary(
    name: str, op: Callable[[Graph, Node, Node], Node], a: np.ndarray, b: np.ndarray, rng: np.random.Generator
) -> CheckCase:
    scratch = Graph()
    weights = rng.normal(size=np.shape(op(scratch, scratch.constant(a), scratch.constant(b)).value))
    return CheckCase(name, lambda g, n: _project(g, op(g, n["a"], n["b"]), weights), {"a": a, "b": b})


def primitive_cases(rng: np.random.Generator) -> list[CheckCase]:
    m = rng.normal(size=(5, 4))
    v = rng.normal(size=4)
    column = rng.uniform(0.5, 2.0, size=4)
    index = np.array([0, 2, 2, 4, 1])
    logits = rng.uniform(-8.0, 8.0, size=(6, 1))
    cases = [
        CheckCase(
            "linear",
            lambda g, n, p=rng.normal(size=(5, 3)): _project(g, g.linear(n["W"], n["b"], n["x"]), p),
            {"W": rng.normal(size=(4, 3)), "b": rng.normal(size=3), "x": m.copy()},
        ),
        CheckCase(
            "linear_vector",
            lambda g, n, p=rng.normal(size=3): _project(g, g.linear(n["W"], n["b"], n["x"]), p),
            {"W": rng.normal(size=(4, 3)), "b": rng.normal(size=3), "x": v.copy()},
        ),
        _unary("relu", lambda g, x: g.relu(x), _away_from_zero(rng, (5, 4)), rng),
        _unary("sin", lambda g, x: g.sin(x), m.copy(), rng),
        _unary("cos", lambda g, x: g.cos(x), m.copy(), rng),
        _binary("concat", lambda g, a, b: g.concat(a, b), m.copy(), rng.normal(size=(5, 2)), rng),
        _binary("concat_expand", lambda g, a, b: g.concat(a, b), m.copy(), rng.normal(size=3), rng),
        _unary("max_over_points", lambda g, x: g.max_over_points(x), rng.normal(size=(6, 4)), rng),
        _binary("add", lambda g, a, b: g.add(a, b), m.copy(), rng.normal(size=(5, 4)), rng),
        _binary("sub", lambda g, a, b: g.sub(a, b), m.copy(), rng.normal(size=(5, 4)), rng),
        _binary("mul", lambda g, a, b: g.mul(a, b), m.copy(), rng.normal(size=(5, 4)), rng),
        _unary("scale", lambda g, x: g.scale(x, 1.7), m.copy(), rng),
        _unary("scale_columns", lambda g, x: g.scale(x, column), m.copy(), rng),
        _unary("square", lambda g, x: g.square(x), m.copy(), rng),
        _unary("sum", lambda g, x: g.sum(x), m.copy(), rng),
        _unary("mean", lambda g, x: g.mean(x), m.copy(), rng),
        _unary("sigmoid_bce_occupied", lambda g, x: g.sigmoid_bce(x, 1.0), logits.copy(), rng),
        _unary("sigmoid_bce_free", lambda g, x: g.sigmoid_bce(x, 0.0), logits.copy(), rng),
        _unary("gather", lambda g, x: g.gather(x, index), m.copy(), rng),
    ]
    for dim in (2, 3):
        weights = rng.normal(size=(7, dim))
        cases.append(
            CheckCase(
                f"rigid_{dim}d",
                lambda g, n, p=weights: _project(g, g.rigid(n["translation"], n["angles"], n["points"]), p),
                {
                    "translation": rng.normal(size=dim),
                    "angles": _angles(rng, dim),
                    "points": rng.normal(size=(7, dim)),
                },
            )
        )
    return cases


# --- composites -------------------------------------------------------------------------


def _random_weights(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    for name, shape in shapes.items():
        if name.endswith("/b"):
            weights[name] = rng.normal(scale=0.1, size=shape)
        else:
            weights[name] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
    return weights


def _small_decoder(
    rng: np.random.Generator, dim: int, b: int, kernel_width: int = 1, trans_scale: float = 1.0, head_gain: float = 1.0
) -> PoseDecoder:
    shapes = PoseDecoder.weight_shapes(dim, b, kernel_width, SMALL_POINT_WIDTHS, SMALL_HEAD_WIDTHS)
    weights = _random_weights(shapes, rng)
    last = len(SMALL_HEAD_WIDTHS)
    for suffix in ("W", "b"):
        weights[f"decoder/head{last}/{suffix}"] *= head_gain
    return PoseDecoder(
        dim,
        b,
        weights,
        kernel_width,
        trans_scale,
        point_widths=SMALL_POINT_WIDTHS,
        head_widths=SMALL_HEAD_WIDTHS,
    )


def _jittered_grid(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Points about one unit apart, so nearest neighbours under small motion are unambiguous."""
    axes = [np.arange(4.0), np.arange(3.0)] + ([np.arange(2.0)] if dim == 3 else [])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    return grid + rng.uniform(-0.05, 0.05, size=grid.shape)


def decoder_case(rng: np.random.Generator, dim: int, kernel_width: int = 1) -> CheckCase:
    b = 3
    decoder = _small_decoder(rng, dim, b, kernel_width)
    points = rng.normal(size=(6, dim))
    weights_t = rng.normal(size=dim)
    weights_r = rng.normal(size=ROTATION_PARAMS[dim])

    def build(graph: Graph, nodes: Mapping[str, Node]) -> Node:
        translation, rotation = decoder.forward(graph, nodes, points, nodes["z"])
        return graph.add(_project(graph, translation, weights_t), _project(graph, rotation, weights_r))

    params = {**decoder.weights, "z": rng.normal(size=b)}
    return CheckCase(f"decoder_{dim}d_k{kernel_width}", build, params, h=1e-6, max_entries=COMPOSITE_ENTRIES)


def fusion_case(rng: np.random.Generator) -> CheckCase:
    k, b = 6, 4
    weights = rng.normal(size=(k, b))

    def build(graph: Graph, nodes: Mapping[str, Node]) -> Node:
        fused = fuse_nodes(graph, nodes["raw"], nodes["decay"])
        total = _project(graph, fused[0], weights[0])
        for i in range(1, k):
            total = graph.add(total, _project(graph, fused[i], weights[i]))
        return total

    return CheckCase("latent_fusion", build, {"raw": rng.normal(size=(k, b)), "decay": rng.uniform(-0.9, 0.9, size=b)})


def chamfer_case(rng: np.random.Generator, dim: int) -> CheckCase:
    a = _jittered_grid(rng, dim)
    keep = rng.permutation(len(a))[: len(a) - 3]
    b = a[keep] + rng.uniform(-0.1, 0.1, size=(len(keep), dim))
    return CheckCase(f"chamfer_{dim}d", lambda g, n: chamfer_term(g, n["a"], n["b"]), {"a": a, "b": b})


def occupancy_case(rng: np.random.Generator, dim: int) -> CheckCase:
    weights = _random_weights(OccupancyNet.weight_shapes(dim, SMALL_OCCUPANCY_WIDTHS), rng)
    net = OccupancyNet(dim, weights, 4.0, SMALL_OCCUPANCY_WIDTHS)
    hits = rng.normal(scale=2.0, size=(5, dim))
    free = free_space_samples(hits, np.zeros(dim), 3, rng)

    def build(graph: Graph, nodes: Mapping[str, Node]) -> Node:
        moved_hits = graph.rigid(nodes["translation"], nodes["angles"], hits)
        moved_free = graph.rigid(nodes["translation"], nodes["angles"], free)
        return occupancy_frame_term(graph, net, nodes, moved_hits, moved_free)

    params = {**weights, "translation": rng.normal(size=dim), "angles": _angles(rng, dim)}
    return CheckCase(f"global_loss_{dim}d", build, params, h=1e-6, max_entries=COMPOSITE_ENTRIES)


def total_case(rng: np.random.Generator, dim: int, lambda_global: float = 0.5) -> CheckCase:
    """Latents through fusion, decoder, rigid motion, Chamfer and the occupancy term."""
    k, b = 3, 3
    # near-identity poses keep every frame's nearest neighbours fixed under the finite-difference steps
    decoder = _small_decoder(rng, dim, b, trans_scale=0.05, head_gain=0.02)
    net_widths = SMALL_OCCUPANCY_WIDTHS
    occupancy_weights = _random_weights(OccupancyNet.weight_shapes(dim, net_widths), rng)
    net = OccupancyNet(dim, occupancy_weights, 4.0, net_widths)
    base = _jittered_grid(rng, dim)
    frames = [base + rng.uniform(-0.05, 0.05, size=base.shape) for _ in range(k)]
    origin = base.mean(axis=0)
    free = [free_space_samples(frame, origin, 2, rng) for frame in frames]
    spec = NeighborSpec(1)

    def build(graph: Graph, nodes: Mapping[str, Node]) -> Node:
        fused = fuse_nodes(graph, nodes["latent/raw"], nodes["latent/decay"])
        moved, terms = [], []
        for frame, samples, z in zip(frames, free, fused):
            translation, rotation = decoder.forward(graph, nodes, frame, z)
            moved.append(graph.rigid(translation, rotation, frame))
            terms.append(occupancy_frame_term(graph, net, nodes, moved[-1], graph.rigid(translation, rotation, samples)))
        return graph.add(local_term(graph, moved, spec), graph.scale(global_term(graph, terms), lambda_global))

    params = {
        **decoder.weights,
        **occupancy_weights,
        "latent/raw": rng.normal(size=(k, b)),
        "latent/decay": rng.uniform(0.2, 0.8, size=b),
    }
    return CheckCase(f"total_loss_{dim}d", build, params, tol=DEEP_TOL, h=1e-6, max_entries=COMPOSITE_ENTRIES)


def composite_cases(rng: np.random.Generator) -> list[CheckCase]:
    return [
        decoder_case(rng, 2),
        decoder_case(rng, 3),
        decoder_case(rng, 2, kernel_width=3),
        fusion_case(rng),
        chamfer_case(rng, 2),
        chamfer_case(rng, 3),
        occupancy_case(rng, 2),
        occupancy_case(rng, 3),
        total_case(rng, 2),
        total_case(rng, 3),
    ]


def _tie_free(factory: Callable[[np.random.Generator], list[CheckCase]], rng: np.random.Generator) -> list[CheckCase]:
    cases = factory(rng)
    for i, case in enumerate(cases):
        tries = 0
        while _margin_of(case) < KINK_MARGIN:
            tries += 1
            if tries > TIE_RETRIES:
                raise GenerationError(f"could not draw a kink-free point for '{case.name}'")
            case = factory(rng)[i]
        cases[i] = case
    return cases


def run_suite(
    seeds: Iterable[int] = range(20),
    composites: bool = True,
    on_progress: Optional[ProgressCallback] = None,
) -> list[SuiteRow]:
    """Worst relative error of every case over all seeds."""
    seeds = list(seeds)
    rows: dict[str, SuiteRow] = {}
    for done, seed in enumerate(seeds, start=1):
        rng = np.random.default_rng(seed)
        cases = _tie_free(primitive_cases, rng)
        if composites:
            cases += _tie_free(composite_cases, rng)
        for case in cases:
            report = grad_check(case.builder, case.params, tol=case.tol, h=case.h, max_entries=case.max_entries, seed=seed)
            row = rows.setdefault(case.name, SuiteRow(case.name, 0, 0.0, case.tol))
            row.seeds += 1
            row.worst = max(row.worst, report.worst)
            logger.debug(f"seed {seed} {case.name}: {report.worst:.2e}")
        if on_progress is not None:
            on_progress(done, len(seeds), f"seed {seed}")
    return list(rows.values())


def format_table(rows: Iterable[SuiteRow]) -> str:
    rows = list(rows)
    width = max((len(row.name) for row in rows), default=4)
    lines = [f"{'case':<{width}}  {'max rel err':>12}  {'tol':>8}  result"]
    for row in rows:
        lines.append(f"{row.name:<{width}}  {row.worst:>12.3e}  {row.tol:>8.0e}  {'PASS' if row.passed else 'FAIL'}")
    return "\n".join(lines)
