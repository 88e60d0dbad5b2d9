"""Residual spatio-temporal graph-convolutional decoder.

A unit-norm latent code enters as a single graph node; four blocks each
double the time axis, refine the graph one pyramid level (1 -> 7 -> 16 ->
43 -> 69 vertices) and apply a spatio-temporal graph convolution. The
result is a (64, 69, 2) landmark sequence.

Tensors follow the (batch, channels, time, vertices) layout.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint, state_to_tensors, tensors_to_state
from .errors import ContractError, ShapeError, VersionMismatchError
from .topology import FaceGraph, GraphPyramid

LATENT_DIM = 1536  # 2C with C = 768
CHANNELS = (512, 256, 128, 64, 64)
INITIAL_FRAMES = 4
NUM_FRAMES = 64
NUM_VERTICES = 69
LEAKY_SLOPE = 0.2
UNIT_NORM_TOL = 1e-6


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def normalized_adjacency(graph: FaceGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    a = graph.adjacency() + np.eye(graph.num_vertices)
    d = 1.0 / np.sqrt(a.sum(1))
    return a * d[:, None] * d[None, :]


def spatial_upsample(features, masks, weights):
    """Aggregate coarse-vertex features onto the finer graph.

    ``f_i = sum_{b,j} (masks * weights)[b, i, j] f_j`` for every channel and
    frame. ``features`` is (..., C, T, |V|), ``masks``/``weights`` are
    (B, |V'|, |V|).
    """
    features = _as_tensor(features)
    masks, weights = _as_tensor(masks, features), _as_tensor(weights, features)
    if masks.shape != weights.shape or masks.ndim != 3:
        raise ShapeError(f"mask {tuple(masks.shape)} and weight {tuple(weights.shape)} disagree")
    if features.shape[-1] != masks.shape[2]:
        raise ShapeError(f"features have {features.shape[-1]} vertices, level expects {masks.shape[2]}")
    agg = (masks * weights).sum(0)
    return torch.einsum("...tj,ij->...ti", features, agg)


class SpatialUpsample(nn.Module):
    """Masked inter-level aggregation.

    With ``channels`` set, a per-vertex, per-channel bias (zero at init) is
    added after aggregation. Without it every fine vertex starts as a scalar
    multiple of coarse features, which makes vertex-specific output slow to
    learn.
    """

    def __init__(self, masks, channels=None):
        super().__init__()
        masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
        self.register_buffer("mask", masks)
        # masked-out entries receive zero gradient and therefore stay exactly zero
        self.weight = nn.Parameter(masks.clone())
        if channels is None:
            self.vertex_bias = None
        else:
            self.vertex_bias = nn.Parameter(torch.zeros(channels, 1, masks.shape[1]))

    def forward(self, x):
        out = spatial_upsample(x, self.mask, self.weight)
        if self.vertex_bias is not None:
            out = out + self.vertex_bias
        return out


class TemporalUpsample(nn.Module):
    """Transposed convolution along time only; exactly doubles T."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.ConvTranspose2d(c_in, c_out, kernel_size=(4, 1), stride=(2, 1), padding=(1, 0))

    def forward(self, x):
        return self.conv(x)


def temporal_upsample(features, module: TemporalUpsample):
    features = _as_tensor(features)
    squeeze = features.ndim == 3
    out = module(features.unsqueeze(0) if squeeze else features)
    return out.squeeze(0) if squeeze else out


class GraphConv(nn.Module):
    """Spatial aggregation over the normalized adjacency, then a temporal
    convolution, then a leaky rectifier."""

    def __init__(self, c_in, c_out, graph: FaceGraph, temporal_kernel=3, slope=LEAKY_SLOPE):
        super().__init__()
        if temporal_kernel % 2 != 1:
            raise ValueError("temporal kernel must be odd to preserve T")
        self.num_vertices = graph.num_vertices
        self.register_buffer("adj", torch.as_tensor(normalized_adjacency(graph), dtype=torch.float32))
        self.spatial = nn.Conv2d(c_in, c_out, kernel_size=1, bias=False)
        self.temporal = nn.Conv2d(c_out, c_out, kernel_size=(temporal_kernel, 1),
                                  padding=(temporal_kernel // 2, 0))
        self.slope = slope

    def forward(self, x):
        if x.shape[-1] != self.num_vertices:
            raise ShapeError(f"expected {self.num_vertices} vertices, got {x.shape[-1]}")
        x = self.spatial(x)
        x = torch.einsum("nctj,ij->ncti", x, self.adj.to(x.dtype))
        return F.leaky_relu(self.temporal(x), self.slope)


def graph_conv(features, module: GraphConv):
    features = _as_tensor(features)
    squeeze = features.ndim == 3
    out = module(features.unsqueeze(0) if squeeze else features)
    return out.squeeze(0) if squeeze else out


class DecoderBlock(nn.Module):
    def __init__(self, c_in, c_out, masks, graph, temporal_kernel=3, slope=LEAKY_SLOPE):
        super().__init__()
        self.temporal = TemporalUpsample(c_in, c_out)
        self.residual = nn.Conv2d(c_in, c_out, kernel_size=1) if c_in != c_out else nn.Identity()
        self.spatial = SpatialUpsample(masks, c_out)
        self.gcn = GraphConv(c_out, c_out, graph, temporal_kernel, slope)
        self.slope = slope

    def forward(self, x):
        skip = self.residual(torch.repeat_interleave(x, 2, dim=2))
        x = F.leaky_relu(self.temporal(x) + skip, self.slope)
        x = self.spatial(x)
        # identity skip around the graph conv so its neighbour averaging does not blur vertex detail
        return self.gcn(x) + x


def check_unit_norm(z: torch.Tensor, tol=UNIT_NORM_TOL):
    norms = torch.linalg.vector_norm(z.detach().double(), dim=-1)
    if not torch.all(torch.isfinite(norms)) or torch.any((norms - 1).abs() > tol):
        raise ContractError(f"latent codes must be unit norm (got norms {norms.flatten()[:4].tolist()})")


class Decoder(nn.Module):
    """Latent code (N, 1536) -> expression sequence (N, 64, 69, 2)."""

    kind = "stgcn"

    def __init__(self, pyramid: GraphPyramid, latent_dim=LATENT_DIM, channels=CHANNELS,
                 initial_frames=INITIAL_FRAMES, temporal_kernel=3, slope=LEAKY_SLOPE):
        super().__init__()
        if len(channels) != len(pyramid.levels):
            raise ShapeError("need one channel width per pyramid level")
        if pyramid.sizes[0] != 1:
            raise ShapeError("decoder starts from a single-vertex level")
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.initial_frames = initial_frames
        self.topology_version = pyramid.version
        self.slope = slope
        self.project = nn.Linear(latent_dim, channels[0] * initial_frames)
        self.blocks = nn.ModuleList(
            DecoderBlock(channels[i], channels[i + 1], pyramid.inter_level_adjacency[i],
                         pyramid.levels[i + 1], temporal_kernel, slope)
            for i in range(len(channels) - 1)
        )
        self.out = nn.Conv2d(channels[-1], 2, kernel_size=1)

    @property
    def num_frames(self):
        return self.initial_frames * 2 ** len(self.blocks)

    def forward(self, z):
        x = F.leaky_relu(self.project(z), self.slope)
        x = x.view(z.shape[0], self.channels[0], self.initial_frames, 1)
        for block in self.blocks:
            x = block(x)
        return self.out(x).permute(0, 2, 3, 1)

    def config(self):
        return {"channels": list(self.channels), "initial_frames": self.initial_frames,
                "latent_dim": self.latent_dim}


class MLPDecoder(nn.Module):
    """Graph-free baseline: three fully connected layers."""

    kind = "mlp"

    def __init__(self, latent_dim=LATENT_DIM, hidden=1024, num_frames=NUM_FRAMES,
                 num_vertices=NUM_VERTICES, topology_version="none", slope=LEAKY_SLOPE):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.shape = (num_frames, num_vertices, 2)
        self.topology_version = topology_version
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.LeakyReLU(slope),
            nn.Linear(hidden, hidden), nn.LeakyReLU(slope),
            nn.Linear(hidden, int(np.prod(self.shape))),
        )

    @property
    def num_frames(self):
        return self.shape[0]

    def forward(self, z):
        return self.net(z).view(z.shape[0], *self.shape)

    def config(self):
        return {"hidden": self.hidden, "latent_dim": self.latent_dim}


def build_decoder(pyramid: GraphPyramid, kind="stgcn", seed=0, **kwargs):
    torch.manual_seed(seed)
    if kind == "stgcn":
        return Decoder(pyramid, **kwargs)
    if kind == "mlp":
        return MLPDecoder(topology_version=pyramid.version, **kwargs)
    raise ValueError(f"unknown decoder kind {kind!r}")


def decode(z, decoder: nn.Module) -> np.ndarray:
    """Decode one unit-norm latent (or a batch) into (64, 69, 2) sequence(s)."""
    z = torch.as_tensor(np.asarray(z) if not isinstance(z, torch.Tensor) else z)
    single = z.ndim == 1
    z = z.reshape(-1, decoder.latent_dim).to(next(decoder.parameters()).dtype)
    check_unit_norm(z)
    with torch.no_grad():
        out = decoder(z).double().numpy()
    return out[0] if single else out


def decoder_tensors(decoder: nn.Module) -> dict:
    return state_to_tensors("decoder", decoder)


def decoder_meta(decoder: nn.Module, seed: int) -> dict:
    return {"decoder_kind": decoder.kind, "decoder_config": decoder.config(),
            "topology_version": decoder.topology_version, "seed": seed}


def save_decoder(path, decoder: nn.Module, seed: int) -> str:
    return save_checkpoint(path, decoder_tensors(decoder), "decoder", decoder_meta(decoder, seed))


def restore_decoder(tensors: dict, meta: dict, pyramid: GraphPyramid) -> nn.Module:
    if meta.get("decoder_kind", "stgcn") == "stgcn" and meta.get("topology_version") != pyramid.version:
        raise VersionMismatchError(
            f"checkpoint topology {meta.get('topology_version')} != loaded topology {pyramid.version}")
    cfg = dict(meta.get("decoder_config", {}))
    if meta.get("decoder_kind") == "mlp":
        dec = MLPDecoder(latent_dim=cfg.get("latent_dim", LATENT_DIM), hidden=cfg.get("hidden", 1024),
                         topology_version=meta.get("topology_version", "none"))
    else:
        dec = Decoder(pyramid, latent_dim=cfg.get("latent_dim", LATENT_DIM),
                      channels=tuple(cfg.get("channels", CHANNELS)),
                      initial_frames=cfg.get("initial_frames", INITIAL_FRAMES))
    dec.load_state_dict(tensors_to_state("decoder", tensors))
    dec.eval()
    return dec


def load_decoder(path, pyramid: GraphPyramid):
    tensors, meta = load_checkpoint(path, "decoder")
    return restore_decoder(tensors, meta, pyramid), meta
