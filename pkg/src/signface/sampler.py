"""Sampling network: sentence features -> latent code, trained with cosine
distance against the GLO-optimized latents. Also hosts the text-to-face
inference path and the non-learned nearest-neighbour baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint, state_to_tensors, tensors_to_state
from .decoder import LATENT_DIM, decode
from .errors import ConfigError, DegenerateVectorError, NumericalError, ShapeError, VersionMismatchError
from .glo import interpolate_latents, project_to_sphere
from .text_features import FEATURE_DIM, SentenceFeatures, sentence_features


def cosine_loss(predicted, target, eps=1e-12):
    """1 - cos(predicted, target), in [0, 2]."""
    if isinstance(predicted, torch.Tensor) or isinstance(target, torch.Tensor):
        p, z = torch.as_tensor(predicted), torch.as_tensor(target, dtype=torch.as_tensor(predicted).dtype)
        if p.shape != z.shape:
            raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
        pn, zn = torch.linalg.vector_norm(p, dim=-1), torch.linalg.vector_norm(z, dim=-1)
        if torch.any(pn < eps) or torch.any(zn < eps):
            raise DegenerateVectorError("cosine distance undefined for zero vectors")
        return 1 - (p * z).sum(-1) / (pn * zn)
    p, z = np.asarray(predicted, dtype=float), np.asarray(target, dtype=float)
    if p.shape != z.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {z.shape}")
    pn, zn = np.linalg.norm(p), np.linalg.norm(z)
    if pn < eps or zn < eps:
        raise DegenerateVectorError("cosine distance undefined for zero vectors")
    return float(1 - p @ z / (pn * zn))


class SamplingNetwork(nn.Module):
    """Four fully connected layers; tanh after each hidden layer, linear output."""

    def __init__(self, in_dim=2 * FEATURE_DIM, hidden=LATENT_DIM, out_dim=LATENT_DIM,
                 wo_sem=False, wo_sent=False):
        super().__init__()
        self.wo_sem, self.wo_sent = wo_sem, wo_sent
        self.layers = nn.ModuleList([
            nn.Linear(in_dim, hidden), nn.Linear(hidden, hidden),
            nn.Linear(hidden, hidden), nn.Linear(hidden, out_dim),
        ])
        mask = torch.ones(in_dim)
        if wo_sem:
            mask[:FEATURE_DIM] = 0
        if wo_sent:
            mask[FEATURE_DIM:] = 0
        self.register_buffer("input_mask", mask)

    def forward(self, x):
        x = x * self.input_mask.to(x.dtype)
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


@dataclass
class SamplerConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    wo_sem: bool = False
    wo_sent: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("sampler lr and batch size must be positive, steps non-negative")


@dataclass
class SamplerState:
    model: SamplingNetwork
    config: SamplerConfig
    history: list = field(default_factory=list)  # (step, mean cosine loss over the batch)
    final_loss: float | None = None
    glo_checkpoint_id: str | None = None


def _feature_matrix(features):
    return torch.as_tensor(np.stack([f.concat() for f in features]), dtype=torch.float32)


def init_sampler(config: SamplerConfig) -> SamplingNetwork:
    torch.manual_seed(config.seed)
    return SamplingNetwork(wo_sem=config.wo_sem, wo_sent=config.wo_sent)


def mean_cosine_loss(model, features, latents) -> float:
    with torch.no_grad():
        pred = model(_feature_matrix(features))
        return float(cosine_loss(pred, torch.as_tensor(np.asarray(latents), dtype=torch.float32)).mean())


def train_sampler(pairs, config: SamplerConfig) -> SamplerState:
    """Fit the network on ``(SentenceFeatures, latent)`` pairs."""
    if not pairs:
        raise ConfigError("sampler training needs at least one pair")
    features = [f for f, _ in pairs]
    latents = np.stack([np.asarray(z, dtype=float) for _, z in pairs])
    if latents.ndim != 2 or latents.shape[1] != LATENT_DIM:
        raise ShapeError(f"latents must be (n, {LATENT_DIM}), got {latents.shape}")
    x = _feature_matrix(features)
    z = torch.as_tensor(latents, dtype=torch.float32)
    model = init_sampler(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    state = SamplerState(model, config)
    n, perm = len(pairs), []
    model.train()
    for step in range(config.steps):
        batch = []
        while len(batch) < min(config.batch_size, n):
            if not perm:
                perm = torch.randperm(n, generator=gen).tolist()
            batch.append(perm.pop(0))
        loss = cosine_loss(model(x[batch]), z[batch]).mean()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite sampler loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.history.append((step + 1, loss.item()))
    model.eval()
    state.final_loss = mean_cosine_loss(model, features, latents)
    return state


def sample_latent(features: SentenceFeatures, model: SamplingNetwork) -> np.ndarray:
    with torch.no_grad():
        raw = model(_feature_matrix([features]))[0].double().numpy()
    return project_to_sphere(raw)


def infer(text: str, backend, sampler: SamplingNetwork, decoder, force_label=None, return_info=False):
    """Text -> features -> sampler -> unit sphere -> decoder."""
    feats = sentence_features(text, backend, force_label)
    z = sample_latent(feats, sampler)
    seq = decode(z, decoder)
    if return_info:
        return seq, {"sentiment_label": feats.sentiment_label, "latent": z, "features": feats}
    return seq


def nearest_neighbor_heuristic(features: SentenceFeatures, bank) -> np.ndarray:
    """Blend the latents of the two bank sentences closest in cosine distance."""
    if not bank:
        raise ConfigError("nearest-neighbour bank is empty")
    if len(bank) == 1:
        return project_to_sphere(bank[0][1])
    q = features.concat()
    dists = [cosine_loss(q, f.concat()) for f, _ in bank]
    first, second = np.argsort(dists, kind="stable")[:2]
    z1, z2 = project_to_sphere(bank[first][1]), project_to_sphere(bank[second][1])
    return interpolate_latents(z1, z2, 3)[1]


def train_end_to_end(features, targets, decoder, config: SamplerConfig, lr_decoder=1e-3):
    """Sampler and decoder trained jointly on l1 reconstruction, no latent table.

    ``targets`` is (n, 64, 69, 2). The sampler output is projected to the unit
    sphere before decoding, as at inference time.
    """
    model = init_sampler(config)
    x = _feature_matrix(features)
    y = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    opt = torch.optim.Adam([
        {"params": model.parameters(), "lr": config.lr},
        {"params": decoder.parameters(), "lr": lr_decoder},
    ])
    gen = torch.Generator().manual_seed(config.seed)
    state = SamplerState(model, config)
    n, perm = len(features), []
    model.train()
    decoder.train()
    for step in range(config.steps):
        batch = []
        while len(batch) < min(config.batch_size, n):
            if not perm:
                perm = torch.randperm(n, generator=gen).tolist()
            batch.append(perm.pop(0))
        raw = model(x[batch])
        z = raw / torch.linalg.vector_norm(raw, dim=1, keepdim=True).clamp_min(1e-12)
        loss = (decoder(z) - y[batch]).abs().mean()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite end-to-end loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.history.append((step + 1, loss.item()))
    model.eval()
    decoder.eval()
    with torch.no_grad():
        raw = model(x)
        z = raw / torch.linalg.vector_norm(raw, dim=1, keepdim=True)
        state.final_loss = float((decoder(z) - y).abs().mean())
    return state


def save_sampler(path, state: SamplerState, extra_tensors=None, extra_meta=None) -> str:
    tensors = state_to_tensors("sampler", state.model)
    tensors.update(extra_tensors or {})
    meta = {
        "config": asdict(state.config),
        "final_loss": state.final_loss,
        "glo_checkpoint_id": state.glo_checkpoint_id,
        "wo_sem": state.config.wo_sem,
        "wo_sent": state.config.wo_sent,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, "sampler", meta)


def load_sampler(path, expected_glo_id: str | None = None):
    tensors, meta = load_checkpoint(path, "sampler")
    if expected_glo_id is not None and meta.get("glo_checkpoint_id") != expected_glo_id:
        raise VersionMismatchError(
            f"sampler was trained against GLO checkpoint {meta.get('glo_checkpoint_id')}, "
            f"but {expected_glo_id} is loaded")
    config = SamplerConfig(**meta["config"])
    model = SamplingNetwork(wo_sem=config.wo_sem, wo_sent=config.wo_sent)
    model.load_state_dict(tensors_to_state("sampler", tensors))
    model.eval()
    state = SamplerState(model, config, final_loss=meta.get("final_loss"),
                         glo_checkpoint_id=meta.get("glo_checkpoint_id"))
    return state, tensors, meta
