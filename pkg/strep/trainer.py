"""Adam and the two optimization regimes.

`train` jointly optimizes the decoder weights, the occupancy weights, every raw
latent and the shared decay vector. `adapt` freezes everything learned by a
checkpoint and re-optimizes fresh raw latents for a new sequence only.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from strep.config import RunConfig, TrainConfig
from strep.datafiles import Checkpoint
from strep.diffengine import Graph, Node
from strep.errors import NumericError, UsageError
from strep.geometry import PointSet, Pose
from strep.logs import ProgressCallback
from strep.losses import (
    NeighborSpec,
    OccupancyNet,
    free_space_samples,
    global_term,
    local_term,
    occupancy_stacked_term,
)
from strep.metrics import evaluate
from strep.simulator import SequenceDataset
from strep.strepmodel import (
    DECAY_INIT,
    LatentChain,
    PoseDecoder,
    decode_chain,
    fuse_nodes,
    init_chain,
    init_model,
)

logger = logging.getLogger(__name__)

# child streams of SeedSequence(seed)
_DECODER, _LATENTS, _OCCUPANCY, _BATCHES, _ADAPT = range(5)


@dataclass
class AdamState:
    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        """Learning rate by exact parameter name, else by its group (text before the first '/')."""
        if name in self.lrs:
            return self.lrs[name]
        group = name.split("/", 1)[0]
        if group in self.lrs:
            return self.lrs[group]
        raise UsageError(f"no learning rate for parameter '{name}'")


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place to `params` (which is also returned)."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise UsageError(f"gradient for '{name}' has shape {g.shape}, parameter has {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        value -= state.lr_for(name) * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class HistoryRecord:
    iteration: int
    local_loss: float
    global_loss: float
    total: float
    ate: Optional[float] = None
    point_dist: Optional[float] = None

    def as_row(self) -> dict[str, object]:
        return {
            "iteration": self.iteration,
            "local_loss": self.local_loss,
            "global_loss": self.global_loss,
            "total": self.total,
            "ate": self.ate,
            "point_dist": self.point_dist,
        }


@dataclass
class TrainResult:
    decoder: PoseDecoder
    occupancy: OccupancyNet
    chains: list[LatentChain]
    history: list[HistoryRecord]
    config: RunConfig

    def checkpoint(self) -> Checkpoint:
        decay = self.chains[0].decay if self.chains else np.zeros(self.config.latent_dim)
        return Checkpoint(self.config, self.decoder, self.occupancy, decay, [chain.raw for chain in self.chains])

    def poses(self, datasets: Sequence[SequenceDataset]) -> list[list[Pose]]:
        return [decode_chain(self.decoder, chain, ds.frames) for chain, ds in zip(self.chains, datasets)]


@dataclass
class AdaptResult:
    chain: LatentChain
    poses: list[Pose]
    history: list[HistoryRecord]


@dataclass
class _Objective:
    total: Node
    local: Node
    global_: Optional[Node]


def _diverged(e: NumericError, iteration: int, term: str) -> NumericError:
    return NumericError(f"{term} loss diverged at iteration {iteration}: {e}", op=e.op, iteration=iteration, term=term)


def occupancy_frame_sample(
    graph: Graph,
    net: OccupancyNet,
    params: Mapping[str, Node],
    frame: PointSet,
    translation: Node,
    rotation: Node,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Node:
    """Occupancy term of one frame on `occupancy_beams` sampled hits and their free-space samples.

    Samples are drawn in the sensor frame, moved with the frame's pose and scored in
    one pass of the network.
    """
    count = min(cfg.occupancy_beams, len(frame))
    pick = np.sort(rng.choice(len(frame), size=count, replace=False))
    hits = frame.points[pick]
    free = free_space_samples(hits, frame.sensor_origin, cfg.s_per_beam, rng)
    samples = graph.rigid(translation, rotation, np.vstack([hits, free]))
    return occupancy_stacked_term(graph, net, params, samples, count)


def frame_rng(seed: int, iteration: int, sequence: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, sequence, frame])


class _Problem:
    """Builds the loss graph of one batch window for one sequence."""

    def __init__(
        self,
        cfg: RunConfig,
        decoder: PoseDecoder,
        occupancy: OccupancyNet,
        train_decoder: bool,
        train_decay: bool,
    ):
        self.cfg = cfg
        self.decoder = decoder
        self.occupancy = occupancy
        self.train_decoder = train_decoder
        self.train_decay = train_decay
        self.mode = cfg.model.latent_mode
        self.spec = NeighborSpec(cfg.train.neighbor_radius)

    def build(
        self,
        graph: Graph,
        dataset: SequenceDataset,
        chain: Optional[LatentChain],
        seq_index: int,
        window: range,
        iteration: int,
        train_latents: bool = True,
    ) -> _Objective:
        cfg = self.cfg.train
        dec = self.decoder.bind(graph, trainable=self.train_decoder)
        occ = self.occupancy.bind(graph, trainable=self.train_decoder) if cfg.lambda_global > 0 else {}

        fused: list[Optional[Node]] = [None] * window.stop
        if self.mode != "none":
            assert chain is not None
            raw_name = f"latent/{seq_index}/raw"
            raw = graph.param(raw_name, chain.raw) if train_latents else graph.constant(chain.raw)
            decay = None
            if self.mode == "fused":
                decay = graph.param("latent/decay", chain.decay) if self.train_decay else graph.constant(chain.decay)
            # the recurrence always starts at frame 0, even when the window does not
            fused = list(fuse_nodes(graph, raw, decay, count=window.stop))

        poses, moved = [], []
        try:
            for i in window:
                translation, rotation = self.decoder.forward(graph, dec, dataset.frames[i].points, fused[i])
                poses.append((translation, rotation))
                moved.append(graph.rigid(translation, rotation, dataset.frames[i].points))
        except NumericError as e:
            raise _diverged(e, iteration, "pose")

        try:
            local = local_term(graph, moved, self.spec, workers=cfg.threads)
        except NumericError as e:
            raise _diverged(e, iteration, "local")

        if cfg.lambda_global == 0:
            return _Objective(total=local, local=local, global_=None)

        try:
            terms = [
                occupancy_frame_sample(
                    graph,
                    self.occupancy,
                    occ,
                    dataset.frames[i],
                    translation,
                    rotation,
                    cfg,
                    frame_rng(self.cfg.seed, iteration, seq_index, i),
                )
                for (translation, rotation), i in zip(poses, window)
            ]
            glob = global_term(graph, terms)
            total = graph.add(local, graph.scale(glob, cfg.lambda_global))
        except NumericError as e:
            raise _diverged(e, iteration, "global")
        return _Objective(total=total, local=local, global_=glob)


def _window(rng: np.random.Generator, length: int, batch_frames: int) -> range:
    size = min(batch_frames, length)
    start = int(rng.integers(0, length - size + 1))
    return range(start, start + size)


def _check_gradients(grads: Mapping[str, np.ndarray], iteration: int) -> None:
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(
                f"gradient of '{name}' is not finite at iteration {iteration}", iteration=iteration, term="gradient"
            )


def _clip(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor


def _eval_metrics(
    decoder: PoseDecoder, chains: Sequence[Optional[LatentChain]], datasets: Sequence[SequenceDataset], anchor: str
) -> tuple[Optional[float], Optional[float]]:
    ates, dists = [], []
    for chain, ds in zip(chains, datasets):
        if ds.gt_poses is None:
            continue
        report = evaluate(decode_chain(decoder, chain, ds.frames), ds.gt_poses, ds.frames, anchor)  # type: ignore[arg-type]
        ates.append(report.ate)
        dists.append(report.point_dist)
    if not ates:
        return None, None
    return float(np.mean(ates)), float(np.mean(dists))


def _record(
    objective: _Objective,
    iteration: int,
    decoder: PoseDecoder,
    chains: Sequence[Optional[LatentChain]],
    datasets: Sequence[SequenceDataset],
    cfg: RunConfig,
) -> HistoryRecord:
    ate, dist = _eval_metrics(decoder, chains, datasets, cfg.train.anchor)
    record = HistoryRecord(
        iteration=iteration,
        local_loss=float(objective.local.value),
        global_loss=float(objective.global_.value) if objective.global_ is not None else 0.0,
        total=float(objective.total.value),
        ate=ate,
        point_dist=dist,
    )
    extra = f" ate={ate:.3f}" if ate is not None else ""
    logger.info(f"iter {iteration}: local={record.local_loss:.4g} global={record.global_loss:.4g}{extra}")
    return record


def _check_sequences(datasets: Sequence[SequenceDataset], cfg: RunConfig) -> None:
    if not datasets:
        raise UsageError("training needs at least one sequence")
    for i, ds in enumerate(datasets):
        if len(ds) < 2:
            raise UsageError(f"sequence {i} has {len(ds)} frame(s); at least 2 are required")
        if ds.dim != cfg.dim:
            raise UsageError(f"sequence {i} is {ds.dim}D but the run is configured for {cfg.dim}D")


def _initial_state(
    datasets: Sequence[SequenceDataset], cfg: RunConfig, warm_start: Optional[Checkpoint]
) -> tuple[PoseDecoder, OccupancyNet, list[LatentChain]]:
    mode = cfg.model.latent_mode
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    if warm_start is None:
        decoder, _ = init_model(
            cfg.dim,
            cfg.latent_dim,
            cfg.seed,
            kernel_width=cfg.model.kernel_width,
            trans_scale=cfg.trans_scale,
            latent_mode=mode,
        )
        occupancy = OccupancyNet.initialize(cfg.dim, cfg.world_extent, np.random.default_rng(streams[_OCCUPANCY]))
        decay = np.full(cfg.latent_dim, DECAY_INIT) if mode == "fused" else np.zeros(cfg.latent_dim)
        stored: list[np.ndarray] = []
    else:
        if warm_start.config.dim != cfg.dim or warm_start.config.resolved().model != cfg.resolved().model:
            raise UsageError("the warm-start checkpoint was trained with a different model configuration")
        decoder = copy.deepcopy(warm_start.decoder)
        occupancy = copy.deepcopy(warm_start.occupancy)
        decay = warm_start.decay.copy() if mode == "fused" else np.zeros(cfg.latent_dim)
        stored = warm_start.latents

    # stored latents are reused only when they line up with the sequences one to one
    reuse = len(stored) == len(datasets) and all(len(raw) == len(ds) for raw, ds in zip(stored, datasets))
    chains: list[LatentChain] = []
    for s, seq_stream in enumerate(streams[_LATENTS].spawn(len(datasets))):
        if reuse:
            chain = LatentChain(raw=stored[s], decay=decay)
        else:
            chain = init_chain(len(datasets[s]), cfg.latent_dim, np.random.default_rng(seq_stream))
        chain.decay = decay  # one decay vector shared by every sequence
        chains.append(chain)
    return decoder, occupancy, chains


def train(
    datasets: Sequence[SequenceDataset],
    cfg: RunConfig,
    on_progress: Optional[ProgressCallback] = None,
    warm_start: Optional[Checkpoint] = None,
) -> TrainResult:
    """Joint optimization of decoder, occupancy net, raw latents and decay.

    Each iteration draws one sequence and a contiguous window of `batch_frames`
    frames from it; the loss covers the neighbour pairs inside the window plus the
    occupancy term of the window's frames. `warm_start` resumes from a checkpoint.
    """
    _check_sequences(datasets, cfg)
    tc = cfg.train
    mode = cfg.model.latent_mode
    decoder, occupancy, chains = _initial_state(datasets, cfg, warm_start)

    params: dict[str, np.ndarray] = {**decoder.weights}
    if tc.lambda_global > 0:
        params.update(occupancy.weights)
    if mode != "none":
        params.update({f"latent/{s}/raw": chain.raw for s, chain in enumerate(chains)})
    if mode == "fused":
        params["latent/decay"] = chains[0].decay
    state = AdamState(lrs={"decoder": tc.lr_net, "occupancy": tc.lr_net, "latent": tc.lr_latent})

    problem = _Problem(cfg, decoder, occupancy, train_decoder=True, train_decay=mode == "fused")
    batches = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[_BATCHES])
    history: list[HistoryRecord] = []
    logger.info(f"training on {len(datasets)} sequence(s) for {tc.iters} iterations, latent mode '{mode}'")

    for it in range(tc.iters):
        s = int(batches.integers(len(datasets)))
        window = _window(batches, len(datasets[s]), cfg.batch_frames)
        graph = Graph(matmul_dtype=tc.matmul_precision)
        objective = problem.build(graph, datasets[s], chains[s], s, window, it)
        grads = graph.backward(objective.total)
        _check_gradients(grads, it)
        if it % tc.eval_every == 0 or it == tc.iters - 1:
            history.append(_record(objective, it, decoder, chains, datasets, cfg))
        step_grads = {name: grads[name] for name in graph.params}
        _clip(step_grads, tc.clip_norm)
        adam_step(state, {name: params[name] for name in graph.params}, step_grads)
        if on_progress is not None:
            on_progress(it + 1, tc.iters, f"iteration {it + 1}/{tc.iters} loss={float(objective.total.value):.4g}")

    return TrainResult(decoder=decoder, occupancy=occupancy, chains=chains, history=history, config=cfg)


def global_objective(
    dataset: SequenceDataset, poses: Sequence[Pose], net: OccupancyNet, cfg: RunConfig, iteration: int = 0
) -> float:
    """Occupancy loss of a sequence under fixed poses, with the sampling of `iteration`."""
    graph = Graph()
    params = net.bind(graph, trainable=False)
    terms = [
        occupancy_frame_sample(
            graph,
            net,
            params,
            frame,
            graph.constant(pose.translation),
            graph.constant(pose.rotation),
            cfg.train,
            frame_rng(cfg.seed, iteration, 0, i),
        )
        for i, (frame, pose) in enumerate(zip(dataset.frames, poses))
    ]
    return float(global_term(graph, terms).value)


def fit_occupancy(
    dataset: SequenceDataset,
    poses: Sequence[Pose],
    cfg: RunConfig,
    steps: int,
    net: Optional[OccupancyNet] = None,
) -> tuple[OccupancyNet, list[float]]:
    """Optimize only the occupancy weights with every pose held fixed.

    Returns the fitted network and the loss before each step.
    """
    if len(poses) != len(dataset):
        raise UsageError(f"{len(poses)} poses for {len(dataset)} frames")
    if net is None:
        stream = np.random.SeedSequence(cfg.seed).spawn(5)[_OCCUPANCY]
        net = OccupancyNet.initialize(cfg.dim, cfg.world_extent, np.random.default_rng(stream))
    state = AdamState(lrs={"occupancy": cfg.train.lr_net})
    losses = []
    for it in range(steps):
        graph = Graph(matmul_dtype=cfg.train.matmul_precision)
        params = net.bind(graph)
        terms = [
            occupancy_frame_sample(
                graph,
                net,
                params,
                frame,
                graph.constant(pose.translation),
                graph.constant(pose.rotation),
                cfg.train,
                frame_rng(cfg.seed, it, 0, i),
            )
            for i, (frame, pose) in enumerate(zip(dataset.frames, poses))
        ]
        try:
            loss = global_term(graph, terms)
        except NumericError as e:
            raise _diverged(e, it, "global")
        grads = graph.backward(loss)
        _check_gradients(grads, it)
        adam_step(state, net.weights, grads)
        losses.append(float(loss.value))
    return net, losses


def adapt(
    dataset: SequenceDataset,
    frozen: Checkpoint,
    cfg: RunConfig,
    on_progress: Optional[ProgressCallback] = None,
) -> AdaptResult:
    """Optimize only fresh raw latents for `dataset` against a frozen checkpoint."""
    model_cfg = frozen.config
    if dataset.dim != model_cfg.dim:
        raise UsageError(f"checkpoint is {model_cfg.dim}D but the sequence is {dataset.dim}D")
    if len(dataset) < 2:
        raise UsageError("adaptation needs a sequence of at least 2 frames")
    # model shape comes from the checkpoint, optimization settings from the caller
    run_cfg = model_cfg.model_copy(update={"train": cfg.train, "seed": cfg.seed})
    tc = run_cfg.train
    mode = model_cfg.model.latent_mode
    stream = np.random.SeedSequence(cfg.seed).spawn(5)[_ADAPT]
    chain = init_chain(len(dataset), model_cfg.latent_dim, np.random.default_rng(stream), decay=frozen.decay.copy())

    problem = _Problem(run_cfg, frozen.decoder, frozen.occupancy, train_decoder=False, train_decay=False)
    state = AdamState(lrs={"latent": tc.lr_latent})
    history: list[HistoryRecord] = []
    iters = tc.iters
    if mode == "none" and iters:
        logger.warning("checkpoint has no latents; adaptation reduces to a single decoding pass")
        iters = 0

    window = range(len(dataset))
    for it in range(iters):
        graph = Graph(matmul_dtype=tc.matmul_precision)
        objective = problem.build(graph, dataset, chain, 0, window, it)
        grads = graph.backward(objective.total)
        _check_gradients(grads, it)
        if it % tc.eval_every == 0 or it == iters - 1:
            history.append(_record(objective, it, frozen.decoder, [chain], [dataset], run_cfg))
        adam_step(state, {"latent/0/raw": chain.raw}, {"latent/0/raw": grads["latent/0/raw"]})
        if on_progress is not None:
            on_progress(it + 1, iters, f"iteration {it + 1}/{iters} loss={float(objective.total.value):.4g}")

    poses = decode_chain(frozen.decoder, chain if mode != "none" else None, dataset.frames)
    return AdaptResult(chain=chain, poses=poses, history=history)


def objective_value(
    dataset: SequenceDataset,
    decoder: PoseDecoder,
    occupancy: OccupancyNet,
    chain: Optional[LatentChain],
    cfg: RunConfig,
    iteration: int = 0,
) -> tuple[float, float]:
    """(local, global) loss of the whole sequence under the current parameters."""
    problem = _Problem(cfg, decoder, occupancy, train_decoder=False, train_decay=False)
    graph = Graph()
    objective = problem.build(graph, dataset, chain, 0, range(len(dataset)), iteration, train_latents=False)
    glob = float(objective.global_.value) if objective.global_ is not None else 0.0
    return float(objective.local.value), glob
