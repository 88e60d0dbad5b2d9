import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FD_TOL, gradient_errors
from signface.decoder import build_decoder
from signface.errors import ConfigError, DegenerateVectorError, VersionMismatchError
from signface.glo import project_to_sphere
from signface.sampler import (
    SamplerConfig,
    SamplingNetwork,
    cosine_loss,
    infer,
    init_sampler,
    load_sampler,
    nearest_neighbor_heuristic,
    sample_latent,
    save_sampler,
    train_sampler,
)
from signface.text_features import FEATURE_DIM, SentenceFeatures, sentence_features, stub_backend
from signface.topology import default_pyramid


def test_cosine_loss_examples():
    v = np.array([1.0, 2.0, 3.0])
    assert cosine_loss(v, v) == pytest.approx(0.0, abs=1e-15)
    assert cosine_loss(v, -v) == pytest.approx(2.0)
    assert cosine_loss([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    with pytest.raises(DegenerateVectorError):
        cosine_loss(np.zeros(3), v)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_loss_scale_invariant_and_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p, z = rng.normal(size=8), rng.normal(size=8)
    loss = cosine_loss(p, z)
    assert 0 <= loss <= 2
    assert cosine_loss(scale * p, z) == pytest.approx(loss, abs=1e-12)


def test_cosine_loss_torch_matches_numpy():
    rng = np.random.default_rng(0)
    p, z = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    got = cosine_loss(torch.as_tensor(p), torch.as_tensor(z)).numpy()
    np.testing.assert_allclose(got, [cosine_loss(a, b) for a, b in zip(p, z)], atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_sampler_layers(seed):
    torch.manual_seed(seed)
    net = SamplingNetwork(in_dim=8, hidden=6, out_dim=5).double()
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    params = {"x": x, **dict(net.named_parameters())}
    errs = gradient_errors(lambda: net(x), params, seed)
    assert max(errs.values()) < FD_TOL, errs


@pytest.mark.parametrize("seed", range(5))
def test_gradient_cosine_loss(seed):
    rng = np.random.default_rng(seed)
    p = torch.as_tensor(rng.normal(size=(2, 7)), dtype=torch.float64).requires_grad_(True)
    z = torch.as_tensor(rng.normal(size=(2, 7)), dtype=torch.float64)
    errs = gradient_errors(lambda: cosine_loss(p, z), {"p": p}, seed)
    assert errs["p"] < FD_TOL


def test_sampler_shapes():
    net = SamplingNetwork()
    assert [tuple(l.weight.shape) for l in net.layers] == [(1536, 1536)] * 4
    assert net(torch.zeros(2, 2 * FEATURE_DIM)).shape == (2, 1536)


def _features(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=FEATURE_DIM), rng.normal(size=FEATURE_DIM)


def test_wo_sem_ignores_only_semantic_branch():
    torch.manual_seed(0)
    net = SamplingNetwork(wo_sem=True).double()
    sem_a, sent_a = _features(0)
    sem_b, sent_b = _features(1)

    def run(sem, sent):
        return net(torch.as_tensor(np.concatenate([sem, sent])[None]))

    assert torch.equal(run(sem_a, sent_a), run(sem_b, sent_a))
    assert not torch.allclose(run(sem_a, sent_a), run(sem_a, sent_b))


def test_wo_sent_ignores_only_sentiment_branch():
    torch.manual_seed(0)
    net = SamplingNetwork(wo_sent=True).double()
    sem_a, sent_a = _features(0)
    sem_b, sent_b = _features(1)

    def run(sem, sent):
        return net(torch.as_tensor(np.concatenate([sem, sent])[None]))

    assert torch.equal(run(sem_a, sent_a), run(sem_a, sent_b))
    assert not torch.allclose(run(sem_a, sent_a), run(sem_b, sent_a))


def _pairs(n, seed=0):
    be = stub_backend(0)
    rng = np.random.default_rng(seed)
    texts = [f"sentence number {i} about happy things" for i in range(n)]
    return [(sentence_features(t, be), project_to_sphere(rng.normal(size=1536))) for t in texts]


def test_zero_steps_keeps_initial_parameters():
    cfg = SamplerConfig(steps=0, seed=5)
    state = train_sampler(_pairs(2), cfg)
    fresh = init_sampler(cfg)
    for a, b in zip(state.model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


def test_short_training_reduces_loss():
    state = train_sampler(_pairs(4), SamplerConfig(steps=60, lr=1e-4))
    assert state.history[-1][1] < state.history[0][1]
    assert state.final_loss < 0.5


def test_empty_pairs_rejected():
    with pytest.raises(ConfigError):
        train_sampler([], SamplerConfig())


def test_sample_latent_is_unit_norm():
    f = sentence_features("hello there", stub_backend(0))
    z = sample_latent(f, init_sampler(SamplerConfig()))
    assert abs(np.linalg.norm(z) - 1) < 1e-12


def test_infer_shape_and_label():
    dec = build_decoder(default_pyramid())
    seq, info = infer("I am so happy", stub_backend(0), init_sampler(SamplerConfig()), dec, return_info=True)
    assert seq.shape == (64, 69, 2)
    assert info["sentiment_label"] == "joy"
    forced = infer("I am so happy", stub_backend(0), init_sampler(SamplerConfig()), dec, force_label="anger")
    assert np.abs(forced - seq).mean() > 0


def test_nearest_neighbor_heuristic():
    be = stub_backend(0)
    texts = ["I am so happy about the garden", "I am so happy about the weather", "the tax form is due"]
    latents = [project_to_sphere(np.random.default_rng(i).normal(size=1536)) for i in range(3)]
    bank = [(sentence_features(t, be), z) for t, z in zip(texts, latents)]
    z = nearest_neighbor_heuristic(sentence_features(texts[0], be), bank)
    mid = project_to_sphere(latents[0] + latents[1])  # slerp midpoint of the two nearest
    np.testing.assert_allclose(z, mid, atol=1e-12)
    assert np.array_equal(nearest_neighbor_heuristic(bank[2][0], bank[:1]), latents[0])
    with pytest.raises(ConfigError):
        nearest_neighbor_heuristic(bank[0][0], [])


def test_sampler_checkpoint_round_trip(tmp_path):
    state = train_sampler(_pairs(2), SamplerConfig(steps=3, wo_sent=True))
    state.glo_checkpoint_id = "abc"
    save_sampler(tmp_path / "s.safetensors", state)
    back, _, meta = load_sampler(tmp_path / "s.safetensors", expected_glo_id="abc")
    assert meta["wo_sent"] is True and back.config.wo_sent
    x = torch.randn(2, 2 * FEATURE_DIM)
    assert torch.equal(back.model(x), state.model(x))
    with pytest.raises(VersionMismatchError, match="abc"):
        load_sampler(tmp_path / "s.safetensors", expected_glo_id="other")


def test_sentence_features_validate_dimension():
    with pytest.raises(Exception):
        SentenceFeatures(np.zeros(10), np.zeros(FEATURE_DIM))
