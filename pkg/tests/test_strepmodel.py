import numpy as np
import pytest

from strep.diffengine import Graph
from strep.errors import UsageError
from strep.geometry import PointSet
from strep.strepmodel import (
    LatentChain,
    PoseDecoder,
    decode_chain,
    decode_pose,
    fuse_latents,
    fuse_nodes,
    init_chain,
    init_decoder_weights,
    init_model,
)


def test_fused_latents_match_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(1, 33))
        b = int(rng.integers(1, 9))
        chain = LatentChain(raw=rng.normal(size=(k, b)), decay=rng.uniform(-1.0, 1.0, size=b))
        fused = fuse_latents(chain)
        for i in range(k):
            expected = sum(chain.decay ** (i - j) * chain.raw[j] for j in range(i + 1))
            np.testing.assert_allclose(fused[i], expected, rtol=0, atol=1e-12)


def test_zero_decay_keeps_frames_independent(rng):
    chain = LatentChain(raw=rng.normal(size=(5, 3)), decay=np.zeros(3))
    np.testing.assert_array_equal(np.stack(fuse_latents(chain)), chain.raw)


def test_latent_chain_shape_checks():
    with pytest.raises(UsageError):
        LatentChain(raw=np.zeros((3, 4)), decay=np.zeros(3))
    with pytest.raises(UsageError):
        LatentChain(raw=np.zeros(4), decay=np.zeros(4))


@pytest.mark.parametrize("dim, rot", [(2, 1), (3, 3)])
def test_decoder_output_shapes(dim, rot, rng):
    decoder, chain = init_model(dim, 6, seed=1, num_frames=2)
    pose = decode_pose(decoder, PointSet(rng.normal(size=(20, dim))), fuse_latents(chain)[0])
    assert pose.translation.shape == (dim,)
    assert pose.rotation.shape == (rot,)


def test_decoder_is_permutation_invariant(rng):
    decoder, chain = init_model(2, 8, seed=4)
    points = rng.normal(scale=10.0, size=(40, 2))
    z = chain.raw[0]
    a = decode_pose(decoder, PointSet(points), z)
    b = decode_pose(decoder, PointSet(points[rng.permutation(40)]), z)
    np.testing.assert_allclose(a.params, b.params, rtol=0, atol=1e-12)


def test_latent_changes_the_pose(rng):
    decoder, _ = init_model(2, 8, seed=4)
    frame = PointSet(rng.normal(scale=10.0, size=(30, 2)))
    a = decode_pose(decoder, frame, rng.normal(size=8))
    b = decode_pose(decoder, frame, rng.normal(size=8))
    assert not np.allclose(a.params, b.params)


def test_trans_scale_multiplies_translation_only(rng):
    shapes = PoseDecoder.weight_shapes(2, 4)
    weights = init_decoder_weights(shapes, rng)
    frame = PointSet(rng.normal(size=(10, 2)))
    z = rng.normal(size=4)
    unit = decode_pose(PoseDecoder(2, 4, weights, trans_scale=1.0), frame, z)
    scaled = decode_pose(PoseDecoder(2, 4, weights, trans_scale=20.0), frame, z)
    np.testing.assert_allclose(scaled.translation, 20.0 * unit.translation, rtol=1e-12)
    np.testing.assert_array_equal(scaled.rotation, unit.rotation)


def test_spatial_only_decoder_takes_bare_points(rng):
    decoder, _ = init_model(2, 8, seed=0, latent_mode="none")
    assert decoder.weights["decoder/point0/W"].shape == (2, 64)
    pose = decode_pose(decoder, PointSet(rng.normal(size=(10, 2))), None)
    assert pose.dim == 2


def test_wider_kernel_sees_neighbouring_points(rng):
    decoder, chain = init_model(2, 4, seed=2, kernel_width=3)
    assert decoder.weights["decoder/point0/W"].shape == (3 * 6, 64)
    pose = decode_pose(decoder, PointSet(rng.normal(size=(12, 2))), chain.raw[0])
    assert np.all(np.isfinite(pose.params))


def test_even_kernel_width_rejected(rng):
    shapes = PoseDecoder.weight_shapes(2, 4, kernel_width=2)
    with pytest.raises(UsageError):
        PoseDecoder(2, 4, init_decoder_weights(shapes, rng), kernel_width=2)


def test_wrong_weight_shape_rejected(rng):
    weights = init_decoder_weights(PoseDecoder.weight_shapes(2, 4), rng)
    weights["decoder/head0/W"] = np.zeros((3, 3))
    with pytest.raises(UsageError):
        PoseDecoder(2, 4, weights)


def test_decoder_dimension_mismatch(rng):
    decoder, chain = init_model(2, 4, seed=0)
    with pytest.raises(UsageError):
        decode_pose(decoder, PointSet(rng.normal(size=(5, 3))), chain.raw[0])


def test_init_model_is_seeded():
    a, chain_a = init_model(2, 4, seed=11, num_frames=3)
    b, chain_b = init_model(2, 4, seed=11, num_frames=5)
    for name in a.weights:
        np.testing.assert_array_equal(a.weights[name], b.weights[name])
    np.testing.assert_array_equal(chain_a.decay, np.full(4, 0.5))
    c, _ = init_model(2, 4, seed=12)
    assert not np.array_equal(a.weights["decoder/point0/W"], c.weights["decoder/point0/W"])


def test_independent_mode_starts_with_zero_decay():
    _, chain = init_model(2, 4, seed=0, num_frames=3, latent_mode="independent")
    np.testing.assert_array_equal(chain.decay, np.zeros(4))


def test_init_decoder_weights_bounds(rng):
    weights = init_decoder_weights({"x/W": (100, 5), "x/b": (5,)}, rng)
    assert np.all(np.abs(weights["x/W"]) <= 0.1)
    np.testing.assert_array_equal(weights["x/b"], np.zeros(5))


@pytest.mark.parametrize("decay, coupled", [(0.5, True), (0.0, False)])
def test_first_latent_reaches_later_poses_only_through_decay(decay, coupled, rng):
    decoder, _ = init_model(2, 4, seed=5)
    frames = [rng.normal(scale=5.0, size=(15, 2)) for _ in range(3)]
    graph = Graph()
    params = decoder.bind(graph, trainable=False)
    raw = graph.param("raw", rng.normal(size=(3, 4)))
    fused = fuse_nodes(graph, raw, graph.constant(np.full(4, decay)))
    translation, rotation = decoder.forward(graph, params, frames[2], fused[2])
    grads = graph.backward(graph.add(graph.sum(translation), graph.sum(rotation)))
    assert np.any(grads["raw"][2] != 0.0)
    assert np.any(grads["raw"][0] != 0.0) == coupled


def test_decode_chain_needs_one_latent_per_frame(rng):
    decoder, _ = init_model(2, 4, seed=0)
    chain = init_chain(2, 4, rng)
    frames = [PointSet(rng.normal(size=(5, 2))) for _ in range(3)]
    with pytest.raises(UsageError):
        decode_chain(decoder, chain, frames)
    poses = decode_chain(decoder, init_chain(3, 4, rng), frames)
    assert len(poses) == 3
