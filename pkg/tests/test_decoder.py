import numpy as np
import pytest
import torch

from conftest import FD_TOL, gradient_errors, small_graph
from signface.decoder import (
    Decoder,
    DecoderBlock,
    GraphConv,
    MLPDecoder,
    SpatialUpsample,
    TemporalUpsample,
    build_decoder,
    decode,
    graph_conv,
    load_decoder,
    normalized_adjacency,
    save_decoder,
    spatial_upsample,
    temporal_upsample,
)
from signface.errors import ContractError, ShapeError, VersionMismatchError
from signface.topology import FaceGraph, build_pyramid, default_pyramid


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_latent(seed):
    return unit(np.random.default_rng(seed).normal(size=1536))


# -- spatial upsample -------------------------------------------------------------


def test_spatial_upsample_copy():
    masks = np.zeros((2, 2, 1))
    masks[0, :, 0] = 1
    out = spatial_upsample(torch.tensor([[[1.0]], [[2.0]]]), masks, np.ones_like(masks))
    np.testing.assert_array_equal(out[:, 0, :].T.numpy(), [[1, 2], [1, 2]])


def test_spatial_upsample_weighted():
    masks = np.zeros((2, 2, 1))
    masks[0, :, 0] = 1
    weights = np.zeros_like(masks)
    weights[0, :, 0] = [0.5, 2.0]
    out = spatial_upsample(torch.tensor([[[1.0]], [[2.0]]]), masks, weights)
    np.testing.assert_allclose(out[:, 0, :].T.numpy(), [[0.5, 1.0], [2.0, 4.0]])


def test_spatial_upsample_zero_weights_and_shape_error():
    masks = default_pyramid().inter_level_adjacency[1]
    x = torch.randn(3, 2, 7, dtype=torch.float64)
    assert torch.count_nonzero(spatial_upsample(x, masks, np.zeros_like(masks))) == 0
    with pytest.raises(ShapeError):
        spatial_upsample(torch.randn(3, 2, 6, dtype=torch.float64), masks, masks)


def test_spatial_upsample_matches_explicit_sum():
    rng = np.random.default_rng(3)
    masks = default_pyramid().inter_level_adjacency[1]
    weights = rng.normal(size=masks.shape)
    x = rng.normal(size=(3, 2, 7))
    expected = np.zeros((3, 2, 16))
    for b in range(masks.shape[0]):
        for i in range(16):
            for j in range(7):
                expected[:, :, i] += masks[b, i, j] * weights[b, i, j] * x[:, :, j]
    np.testing.assert_allclose(spatial_upsample(x, masks, weights).numpy(), expected, atol=1e-12)


def test_masked_weight_perturbation_is_invisible():
    masks = default_pyramid().inter_level_adjacency[2]
    layer = SpatialUpsample(masks).double()
    x = torch.randn(1, 3, 2, 16, dtype=torch.float64)
    before = layer(x)
    with torch.no_grad():
        layer.weight[torch.as_tensor(masks) == 0] = 123.0
    assert torch.equal(before, layer(x))


def test_vertex_bias_starts_at_zero():
    masks = default_pyramid().inter_level_adjacency[1]
    layer = SpatialUpsample(masks, channels=3).double()
    x = torch.randn(1, 3, 2, 7, dtype=torch.float64)
    assert torch.equal(layer(x), spatial_upsample(x, masks, masks))


def test_masked_weights_stay_zero_under_training():
    masks = default_pyramid().inter_level_adjacency[1]
    layer = SpatialUpsample(masks)
    opt = torch.optim.Adam(layer.parameters(), lr=0.1)
    for _ in range(5):
        loss = layer(torch.randn(2, 3, 2, 7)).pow(2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert torch.all(layer.weight[torch.as_tensor(masks) == 0] == 0)


# -- temporal upsample -------------------------------------------------------------


@pytest.mark.parametrize("t", [1, 4, 8])
def test_temporal_upsample_doubles(t):
    layer = TemporalUpsample(3, 5)
    assert temporal_upsample(torch.randn(3, t, 2), layer).shape == (5, 2 * t, 2)


def test_temporal_upsample_zero_in_zero_out():
    layer = TemporalUpsample(3, 5)
    torch.nn.init.zeros_(layer.conv.bias)
    assert torch.count_nonzero(temporal_upsample(torch.zeros(3, 4, 2), layer)) == 0


def test_four_doublings_reach_64_frames():
    dec = build_decoder(default_pyramid())
    assert dec.initial_frames * 2 ** len(dec.blocks) == 64


# -- graph conv ----------------------------------------------------------------


def test_graph_conv_single_vertex_identity():
    gc = GraphConv(3, 3, FaceGraph(1, frozenset()), temporal_kernel=1).double()
    with torch.no_grad():
        gc.spatial.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
        gc.temporal.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
        gc.temporal.bias.zero_()
    x = torch.randn(3, 4, 1, dtype=torch.float64)
    np.testing.assert_allclose(graph_conv(x, gc).detach().numpy(), torch.nn.functional.leaky_relu(x, 0.2).numpy())


def test_graph_conv_constant_on_regular_graph():
    # 6-cycle: every vertex has degree 2
    cycle = FaceGraph(6, frozenset({(i, (i + 1) % 6) if i < 5 else (0, 5) for i in range(6)}))
    a = normalized_adjacency(cycle)
    np.testing.assert_allclose(a @ np.ones(6), np.ones(6))
    gc = GraphConv(2, 4, cycle).double()
    x = torch.randn(2, 5, 1, dtype=torch.float64).repeat(1, 1, 6)
    out = graph_conv(x, gc).detach().numpy()
    np.testing.assert_allclose(out, np.repeat(out[:, :, :1], 6, axis=2), atol=1e-12)


def test_graph_conv_shape_contract():
    pyr = default_pyramid()
    gc = GraphConv(64, 64, pyr.levels[2])
    assert graph_conv(torch.randn(64, 8, 16), gc).shape == (64, 8, 16)
    with pytest.raises(ShapeError):
        graph_conv(torch.randn(64, 8, 15), gc)


def test_normalized_adjacency_is_symmetric_with_self_loops():
    g = small_graph(7, 0)
    a = normalized_adjacency(g)
    np.testing.assert_allclose(a, a.T)
    deg = g.adjacency().sum(1) + 1
    np.testing.assert_allclose(np.diag(a), 1 / deg)


# -- gradients against central differences -----------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_gradient_temporal_upsample(seed):
    torch.manual_seed(seed)
    layer = TemporalUpsample(3, 4).double()
    x = torch.randn(1, 3, 4, 5, dtype=torch.float64, requires_grad=True)
    errs = gradient_errors(lambda: layer(x), {"x": x, "w": layer.conv.weight, "b": layer.conv.bias}, seed)
    assert max(errs.values()) < FD_TOL, errs


@pytest.mark.parametrize("seed", range(5))
def test_gradient_spatial_upsample(seed):
    torch.manual_seed(seed)
    masks = default_pyramid().inter_level_adjacency[1]
    layer = SpatialUpsample(masks, channels=4).double()
    with torch.no_grad():
        layer.weight.mul_(torch.rand_like(layer.weight) + 0.5)
        layer.vertex_bias.normal_()
    x = torch.randn(1, 4, 3, 7, dtype=torch.float64, requires_grad=True)
    errs = gradient_errors(lambda: layer(x), {"x": x, "w": layer.weight, "b": layer.vertex_bias}, seed)
    assert max(errs.values()) < FD_TOL, errs


@pytest.mark.parametrize("seed", range(5))
def test_gradient_graph_conv(seed):
    torch.manual_seed(seed)
    gc = GraphConv(3, 4, small_graph(7, seed)).double()
    x = torch.randn(1, 3, 4, 7, dtype=torch.float64, requires_grad=True)
    params = {"x": x, "spatial": gc.spatial.weight, "temporal": gc.temporal.weight, "bias": gc.temporal.bias}
    errs = gradient_errors(lambda: gc(x), params, seed)
    assert max(errs.values()) < FD_TOL, errs


@pytest.mark.parametrize("seed", range(5))
def test_gradient_decoder_block(seed):
    torch.manual_seed(seed)
    pyr = default_pyramid()
    block = DecoderBlock(4, 3, pyr.inter_level_adjacency[0], pyr.levels[1]).double()
    x = torch.randn(1, 4, 2, 1, dtype=torch.float64, requires_grad=True)
    params = {"x": x, **{n: p for n, p in block.named_parameters()}}
    errs = gradient_errors(lambda: block(x), params, seed)
    assert max(errs.values()) < FD_TOL, errs


# -- full decoder ----------------------------------------------------------------


def test_decode_shape_and_determinism():
    dec = build_decoder(default_pyramid(), seed=0)
    z = random_latent(0)
    a, b = decode(z, dec), decode(z, dec)
    assert a.shape == (64, 69, 2)
    assert np.array_equal(a, b)


def test_decode_rejects_non_unit_latent():
    dec = build_decoder(default_pyramid())
    with pytest.raises(ContractError):
        decode(2 * random_latent(0), dec)


def test_bias_only_output_is_constant():
    dec = build_decoder(default_pyramid())
    with torch.no_grad():
        for name, p in dec.named_parameters():
            if not name.endswith("bias"):
                p.zero_()
    out = decode(random_latent(1), dec)
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=0)


def test_fresh_decoder_masked_weights_zero():
    dec = build_decoder(default_pyramid())
    for block in dec.blocks:
        assert torch.all(block.spatial.weight[block.spatial.mask == 0] == 0)
        assert torch.all(block.spatial.weight[block.spatial.mask == 1] == 1)


def test_lipschitz_probe():
    dec = build_decoder(default_pyramid())
    z = random_latent(2)
    direction = unit(np.random.default_rng(9).normal(size=1536))
    diffs = []
    for eps in (1e-3, 1e-4, 1e-5):
        z2 = unit(z + eps * direction)
        diffs.append(np.abs(decode(z2, dec) - decode(z, dec)).max())
    assert diffs[0] < 1.0
    assert diffs[0] > diffs[1] > diffs[2]


def test_mlp_decoder_shape():
    dec = MLPDecoder()
    z = torch.as_tensor(random_latent(0)[None], dtype=torch.float32)
    assert dec(z).shape == (1, 64, 69, 2)


def test_decoder_checkpoint_round_trip(tmp_path):
    pyr = default_pyramid()
    dec = build_decoder(pyr, seed=4)
    ckpt = save_decoder(tmp_path / "d.safetensors", dec, seed=4)
    assert len(ckpt) == 64
    back, meta = load_decoder(tmp_path / "d.safetensors", pyr)
    z = random_latent(5)
    assert np.array_equal(decode(z, dec), decode(z, back))
    assert meta["topology_version"] == pyr.version and meta["seed"] == 4


def test_decoder_checkpoint_rejects_other_topology(tmp_path):
    dec = build_decoder(default_pyramid())
    save_decoder(tmp_path / "d.safetensors", dec, seed=0)
    with pytest.raises(VersionMismatchError):
        load_decoder(tmp_path / "d.safetensors", build_pyramid(k=0))


def test_decoder_rejects_mismatched_channel_count():
    with pytest.raises(ShapeError):
        Decoder(default_pyramid(), channels=(512, 256, 128))
