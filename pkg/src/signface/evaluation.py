"""Fréchet Expression Distance, region-wise landmark distances and the
average-landmark-distance distribution."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint, state_to_tensors, tensors_to_state
from .errors import ConfigError, NumericalError, ShapeError

log = logging.getLogger(__name__)

FEATURE_DIM = 32
FRAME_CHANNELS = 69 * 2

REGIONS = {
    "mouth": tuple(range(48, 68)),
    "eyebrows": tuple(range(17, 27)),
    "jaw_lips": tuple(range(0, 17)) + tuple(range(48, 68)),
}


# -- Fréchet distance -------------------------------------------------------


def _psd_sqrt(mat, tol):
    w, v = np.linalg.eigh(mat)
    if w.min() < -tol:
        return None
    # round-off eigenvalues of a rank-deficient matrix would otherwise grow to ~1e-8 under the root
    floor = max(w.max(), 0.0) * len(w) * 1e-13
    w = np.where(w > floor, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, eps=1e-6) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2) for Gaussians.

    The trace of (S1 S2)^1/2 is evaluated as Tr((S1^1/2 S2 S1^1/2)^1/2), which
    stays real for positive semi-definite inputs. If either covariance has an
    eigenvalue below -tolerance, ``eps * I`` is added to both and the
    computation retried once.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=float)), np.atleast_1d(np.asarray(mu2, dtype=float))
    s1, s2 = np.atleast_2d(np.asarray(cov1, dtype=float)), np.atleast_2d(np.asarray(cov2, dtype=float))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (len(mu1), len(mu1)):
        raise ShapeError("mean/covariance shapes disagree")
    for s in (s1, s2):
        if not np.allclose(s, s.T, rtol=1e-8, atol=1e-12):
            raise ShapeError("covariance matrices must be symmetric")
    s1, s2 = (s1 + s1.T) / 2, (s2 + s2.T) / 2
    scale = max(np.abs(s1).max(), np.abs(s2).max(), 1e-300)
    tol = 1e-10 * scale * len(mu1)
    for attempt in range(2):
        root1 = _psd_sqrt(s1, tol)
        inner = None if root1 is None else _psd_sqrt(root1 @ s2 @ root1, tol)
        if inner is not None and np.all(np.isfinite(inner)):
            break
        if attempt == 0:
            log.info("covariance not PSD within tolerance; adding %.1e * I", eps)
            s1 = s1 + eps * np.eye(len(s1))
            s2 = s2 + eps * np.eye(len(s2))
    else:
        raise NumericalError(
            f"matrix square root failed after stabilization (cond {np.linalg.cond(s1):.3g}, "
            f"{np.linalg.cond(s2):.3g})")
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(inner))
    if value < 0:
        if value < -1e-9 * max(1.0, scale):
            raise NumericalError(f"negative Fréchet distance {value}")
        value = 0.0
    return value


def gaussian_stats(features: np.ndarray):
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) < 2:
        raise NumericalError("need at least two feature vectors to fit a covariance")
    return features.mean(0), np.cov(features, rowvar=False)


# -- autoencoder --------------------------------------------------------------


class ExpressionAutoencoder(nn.Module):
    """Temporal-convolution autoencoder over per-frame landmark vectors.

    Input is (N, 64, 69, 2); it is viewed as (N, 138, 64) so the 138 flattened
    coordinates are channels and convolution runs along time.
    """

    def __init__(self, feature_dim=FEATURE_DIM, width=64, frames=64):
        super().__init__()
        self.feature_dim = feature_dim
        self.frames = frames
        self.width = width
        self.register_buffer("mean", torch.zeros(FRAME_CHANNELS, 1))
        self.encoder_conv = nn.Sequential(
            nn.Conv1d(FRAME_CHANNELS, width, 5, stride=2, padding=2), nn.LeakyReLU(0.2),
            nn.Conv1d(width, width, 5, stride=2, padding=2), nn.LeakyReLU(0.2),
        )
        self.encoder_fc = nn.Linear(width * frames // 4, feature_dim)
        self.decoder_fc = nn.Linear(feature_dim, width * frames // 4)
        self.decoder_conv = nn.Sequential(
            nn.LeakyReLU(0.2),
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.ConvTranspose1d(width, FRAME_CHANNELS, 4, stride=2, padding=1),
        )

    def _channels(self, seqs):
        if seqs.shape[1:] != (self.frames, 69, 2):
            raise ShapeError(f"expected (N, {self.frames}, 69, 2), got {tuple(seqs.shape)}")
        return seqs.reshape(len(seqs), self.frames, FRAME_CHANNELS).transpose(1, 2)

    def encode(self, seqs):
        x = self._channels(seqs) - self.mean.to(seqs.dtype)
        return self.encoder_fc(self.encoder_conv(x).flatten(1))

    def decode(self, feats):
        h = self.decoder_fc(feats).view(len(feats), self.width, self.frames // 4)
        x = self.decoder_conv(h) + self.mean.to(feats.dtype)
        return x.transpose(1, 2).reshape(len(feats), self.frames, 69, 2)

    def forward(self, seqs):
        return self.decode(self.encode(seqs))


@dataclass
class FedConfig:
    lr: float = 1e-3
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0 or self.feature_dim < 1:
            raise ConfigError("invalid FED autoencoder config")


@dataclass
class FedModel:
    autoencoder: ExpressionAutoencoder
    config: FedConfig
    dataset_id: str = ""
    final_mse: float | None = None
    history: list = field(default_factory=list)

    @property
    def feature_dim(self):
        return self.autoencoder.feature_dim

    def encode(self, sequences) -> np.ndarray:
        x = torch.as_tensor(np.asarray(sequences), dtype=torch.float32)
        with torch.no_grad():
            return self.autoencoder.encode(x).double().numpy()

    def reconstruction_mse(self, sequences) -> float:
        x = torch.as_tensor(np.asarray(sequences), dtype=torch.float32)
        with torch.no_grad():
            return float(((self.autoencoder(x) - x) ** 2).mean())


def train_fed_autoencoder(sequences, config: FedConfig | None = None, dataset_id="") -> FedModel:
    config = config or FedConfig()
    data = np.asarray(sequences, dtype=float)
    if data.ndim != 4 or len(data) < 2:
        raise ConfigError("the FED autoencoder needs at least two (64, 69, 2) sequences")
    torch.manual_seed(config.seed)
    ae = ExpressionAutoencoder(config.feature_dim, frames=data.shape[1])
    x = torch.as_tensor(data, dtype=torch.float32)
    ae.mean.copy_(ae._channels(x).mean(dim=(0, 2)).unsqueeze(1))
    opt = torch.optim.Adam(ae.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    model = FedModel(ae, config, dataset_id)
    perm, n = [], len(x)
    ae.train()
    for it in range(config.iterations):
        batch = []
        while len(batch) < min(config.batch_size, n):
            if not perm:
                perm = torch.randperm(n, generator=gen).tolist()
            batch.append(perm.pop(0))
        loss = ((ae(x[batch]) - x[batch]) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite autoencoder loss at iteration {it}, batch {batch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.history.append((it + 1, loss.item()))
    ae.eval()
    model.final_mse = model.reconstruction_mse(data)
    return model


def save_fed_model(path, model: FedModel) -> str:
    meta = {"config": asdict(model.config), "dataset_id": model.dataset_id,
            "final_mse": model.final_mse, "frames": model.autoencoder.frames}
    return save_checkpoint(path, state_to_tensors("fed", model.autoencoder), "fed", meta)


def load_fed_model(path) -> FedModel:
    tensors, meta = load_checkpoint(path, "fed")
    config = FedConfig(**meta["config"])
    ae = ExpressionAutoencoder(config.feature_dim, frames=meta.get("frames", 64))
    ae.load_state_dict(tensors_to_state("fed", tensors))
    ae.eval()
    return FedModel(ae, config, meta.get("dataset_id", ""), meta.get("final_mse"))


def fed(generated, reference, model: FedModel) -> float:
    """Fréchet distance between Gaussians fitted to autoencoder features."""
    gen, ref = np.asarray(generated), np.asarray(reference)
    if len(gen) < 2 or len(ref) < 2:
        raise NumericalError("FED needs at least two sequences in each set")
    if min(len(gen), len(ref)) < model.feature_dim:
        warnings.warn(f"FED on fewer samples than feature dimensions ({model.feature_dim}); "
                      "covariances are rank deficient", RuntimeWarning, stacklevel=2)
    mu1, s1 = gaussian_stats(model.encode(gen))
    mu2, s2 = gaussian_stats(model.encode(ref))
    return frechet_distance(mu1, s1, mu2, s2)


# -- landmark distances -----------------------------------------------------------


def region_distances(generated, reference) -> dict:
    """Mean per-landmark Euclidean distance within each facial region."""
    g, r = np.asarray(generated, dtype=float), np.asarray(reference, dtype=float)
    if g.shape != r.shape or g.shape[-1] != 2:
        raise ShapeError(f"shape mismatch {g.shape} vs {r.shape}")
    dist = np.linalg.norm(g - r, axis=-1)
    return {name: float(dist[..., list(idx)].mean()) for name, idx in REGIONS.items()}


def average_landmark_distance(generated, reference) -> float:
    g, r = np.asarray(generated, dtype=float), np.asarray(reference, dtype=float)
    if g.shape != r.shape:
        raise ShapeError(f"shape mismatch {g.shape} vs {r.shape}")
    return float(np.linalg.norm(g - r, axis=-1).mean())


def avg_landmark_distance_distribution(pairs, bins=20) -> dict:
    if not pairs:
        raise ConfigError("need at least one (generated, reference) pair")
    values = np.array([average_landmark_distance(g, r) for g, r in pairs])
    hi = values.max() if values.max() > 0 else 1.0
    counts, edges = np.histogram(values, bins=bins, range=(0.0, hi))
    return {"values": values.tolist(), "counts": counts.tolist(), "edges": edges.tolist(),
            "mean": float(values.mean())}


@dataclass
class EvalReport:
    fed: float | None
    regions: dict
    avg_landmark_distance: dict
    n_samples: int
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = list(self.regions.values()) + ([self.fed] if self.fed is not None else [])
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise NumericalError(f"invalid evaluation values {vals}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(generated, reference, model: FedModel | None, artifacts=None, bins=20) -> EvalReport:
    """Aggregate metrics over matched (generated[i], reference[i]) sequences."""
    gen, ref = np.asarray(generated, dtype=float), np.asarray(reference, dtype=float)
    if gen.shape != ref.shape or len(gen) == 0:
        raise ShapeError(f"generated {gen.shape} and reference {ref.shape} must match and be non-empty")
    per = [region_distances(g, r) for g, r in zip(gen, ref)]
    regions = {k: float(np.mean([p[k] for p in per])) for k in REGIONS}
    score = None
    if model is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            score = fed(gen, ref, model)
    dist = avg_landmark_distance_distribution(list(zip(gen, ref)), bins)
    return EvalReport(score, regions, dist, len(gen), dict(artifacts or {}))
