"""Generative Latent Optimization: decoder weights and one free unit-norm
latent per training sample are fitted jointly under an l1 reconstruction
loss."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint, tensors_to_state
from .decoder import LATENT_DIM, build_decoder, decoder_meta, decoder_tensors, restore_decoder
from .errors import ConfigError, ContractError, DegenerateVectorError, NumericalError, ShapeError
from .topology import GraphPyramid

log = logging.getLogger(__name__)

SEQUENCE_SHAPE = (64, 69, 2)


@dataclass
class TrainingConfig:
    lr_theta: float = 1e-4
    lr_z: float = 1e-2
    batch_size: int = 8
    iterations: int = 2000
    loss: str = "l1"
    seed: int = 0
    checkpoint_every: int = 0
    decoder: str = "stgcn"  # "mlp" for the graph-free ablation
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.lr_theta <= 0 or self.lr_z < 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.iterations < 0 or self.checkpoint_every < 0:
            raise ConfigError("batch size must be >= 1 and budgets non-negative")
        if self.loss != "l1":
            raise ConfigError("only the l1 reconstruction loss is supported")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    def theta_lr(self, iteration):
        """Decoder rate at ``iteration``; cosine decays to zero over the budget."""
        if self.lr_schedule == "constant" or self.iterations == 0:
            return self.lr_theta
        return 0.5 * self.lr_theta * (1 + math.cos(math.pi * min(iteration, self.iterations) / self.iterations))


def glo_loss(predicted, target):
    """Mean absolute difference over every coordinate."""
    if tuple(predicted.shape) != tuple(target.shape):
        raise ShapeError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    if isinstance(predicted, torch.Tensor) or isinstance(target, torch.Tensor):
        return (torch.as_tensor(predicted) - torch.as_tensor(target)).abs().mean()
    return float(np.mean(np.abs(np.asarray(predicted) - np.asarray(target))))


def project_to_sphere(v, eps=1e-12):
    """v / ||v||; raises on (near-)zero vectors."""
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractError("vector must be finite")
    norm = np.linalg.norm(arr)
    if norm < eps:
        raise DegenerateVectorError(f"cannot project a vector of norm {norm:.3g} onto the sphere")
    return arr / norm


def random_latents(n, dim=LATENT_DIM, generator=None):
    z = torch.randn(n, dim, dtype=torch.float64, generator=generator)
    return z / torch.linalg.vector_norm(z, dim=1, keepdim=True)


def interpolate_latents(z_a, z_b, steps: int) -> list:
    """Spherical interpolation from z_a to z_b, endpoints included."""
    z_a, z_b = np.asarray(z_a, dtype=float), np.asarray(z_b, dtype=float)
    if steps < 2:
        raise ContractError("need at least two interpolation steps")
    for z in (z_a, z_b):
        if abs(np.linalg.norm(z) - 1) > 1e-6:
            raise ContractError("interpolation endpoints must be unit norm")
    dot = float(np.clip(z_a @ z_b, -1.0, 1.0))
    if dot < -1 + 1e-9:
        raise DegenerateVectorError("antipodal endpoints: the great-circle path is ambiguous")
    omega = np.arccos(dot)
    out = [z_a.copy()]
    for t in np.linspace(0.0, 1.0, steps)[1:-1]:
        if omega < 1e-9:
            out.append(z_a.copy())
            continue
        v = (np.sin((1 - t) * omega) * z_a + np.sin(t * omega) * z_b) / np.sin(omega)
        out.append(project_to_sphere(v))
    out.append(z_b.copy())
    return out


@dataclass
class GloState:
    decoder: nn.Module
    latents: torch.Tensor  # (n, 2C) float64, rows unit-norm
    sample_ids: list
    optimizer: torch.optim.Optimizer
    config: TrainingConfig
    iteration: int = 0
    history: list = field(default_factory=list)  # (iteration, batch_l1, wallclock)
    final_l1: float | None = None
    _perm: list = field(default_factory=list, repr=False)
    _gen: torch.Generator | None = field(default=None, repr=False)

    def latent(self, sample_id) -> np.ndarray:
        return self.latents[self.sample_ids.index(sample_id)].numpy().copy()

    def latent_table(self) -> dict:
        return {sid: self.latents[i].numpy().copy() for i, sid in enumerate(self.sample_ids)}

    def reconstruct(self, batch_size=16) -> np.ndarray:
        dtype = next(self.decoder.parameters()).dtype
        outs = []
        with torch.no_grad():
            for i in range(0, len(self.latents), batch_size):
                outs.append(self.decoder(self.latents[i:i + batch_size].to(dtype)).double().numpy())
        return np.concatenate(outs)


def _stack(dataset):
    ids, arrs = [], []
    for sid, seq in dataset:
        arr = np.asarray(getattr(seq, "coords", seq), dtype=float)
        if arr.shape != SEQUENCE_SHAPE:
            raise ShapeError(f"sample {sid}: expected {SEQUENCE_SHAPE}, got {arr.shape}")
        ids.append(sid)
        arrs.append(arr)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sample ids in GLO dataset")
    return ids, np.stack(arrs)


def init_glo(dataset, config: TrainingConfig, pyramid: GraphPyramid) -> GloState:
    ids, _ = _stack(dataset)
    if not ids:
        raise ConfigError("GLO needs at least one training sample")
    gen = torch.Generator().manual_seed(config.seed)
    decoder = build_decoder(pyramid, config.decoder, seed=config.seed)
    latents = random_latents(len(ids), decoder.latent_dim, gen)
    opt = torch.optim.Adam(decoder.parameters(), lr=config.lr_theta)
    return GloState(decoder, latents, ids, opt, config, _gen=gen)


def _next_batch(state: GloState, n, batch_size):
    # uniform sampling without replacement within each epoch
    batch = []
    while len(batch) < min(batch_size, n):
        if not state._perm:
            state._perm = torch.randperm(n, generator=state._gen).tolist()
        batch.append(state._perm.pop(0))
    return batch


def reconstruction_l1(state: GloState, targets: np.ndarray) -> float:
    return float(np.mean(np.abs(state.reconstruct() - targets)))


def train_glo(dataset, config: TrainingConfig, pyramid: GraphPyramid, state: GloState | None = None,
              on_checkpoint=None) -> GloState:
    """Run ``config.iterations`` joint steps on (decoder, latents).

    ``dataset`` is a list of ``(sample_id, sequence)`` with sequences shaped
    (64, 69, 2). ``on_checkpoint(state)`` is called every
    ``config.checkpoint_every`` iterations and at the end.
    """
    ids, targets = _stack(dataset)
    if not ids:
        raise ConfigError("GLO needs at least one training sample")
    state = state or init_glo(dataset, config, pyramid)
    if state.sample_ids != ids:
        raise ConfigError("state latents do not match the dataset sample ids")
    dtype = next(state.decoder.parameters()).dtype
    y = torch.as_tensor(targets, dtype=dtype)
    state.decoder.train()
    t0 = time.perf_counter()
    for _ in range(config.iterations):
        batch = _next_batch(state, len(ids), config.batch_size)
        for group in state.optimizer.param_groups:
            group["lr"] = config.theta_lr(state.iteration)
        z = state.latents[batch].clone().requires_grad_(True)
        loss = glo_loss(state.decoder(z.to(dtype)), y[batch])
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite GLO loss at iteration {state.iteration}, batch {[ids[i] for i in batch]}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        with torch.no_grad():
            z_new = z - config.lr_z * z.grad
            for row, i in zip(z_new, batch):
                try:
                    state.latents[i] = torch.as_tensor(project_to_sphere(row.numpy()))
                except DegenerateVectorError:
                    log.warning("latent %s collapsed to zero norm; re-randomizing", ids[i])
                    state.latents[i] = random_latents(1, state.latents.shape[1], state._gen)[0]
        state.iteration += 1
        state.history.append((state.iteration, loss.item(), time.perf_counter() - t0))
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0 and on_checkpoint:
            on_checkpoint(state)
    state.decoder.eval()
    state.final_l1 = reconstruction_l1(state, targets)
    if on_checkpoint:
        on_checkpoint(state)
    return state


def write_history_csv(state: GloState, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "batch_l1", "wallclock"])
        for it, l1, wall in state.history:
            w.writerow([it, f"{l1:.9g}", f"{wall:.4f}"])


def _optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, steps = {}, {}
    for idx, st in sd["state"].items():
        for key in ("exp_avg", "exp_avg_sq"):
            tensors[f"optim.{idx}.{key}"] = st[key]
        steps[str(idx)] = float(st["step"])
    return tensors, steps


def save_glo(path, state: GloState) -> str:
    tensors = decoder_tensors(state.decoder)
    tensors["latents"] = state.latents
    opt_tensors, steps = _optimizer_tensors(state.optimizer)
    tensors.update(opt_tensors)
    meta = decoder_meta(state.decoder, state.config.seed)
    meta.update({
        "sample_ids": state.sample_ids,
        "iteration": state.iteration,
        "config": asdict(state.config),
        "final_l1": state.final_l1,
        "optimizer_steps": steps,
    })
    return save_checkpoint(path, tensors, "glo", meta)


def load_glo(path, pyramid: GraphPyramid) -> GloState:
    tensors, meta = load_checkpoint(path, "glo")
    decoder = restore_decoder(tensors, meta, pyramid)
    config = TrainingConfig(**meta["config"])
    opt = torch.optim.Adam(decoder.parameters(), lr=config.lr_theta)
    osd = opt.state_dict()
    state_entries = {}
    for idx, step in meta.get("optimizer_steps", {}).items():
        state_entries[int(idx)] = {
            "step": torch.tensor(step),
            "exp_avg": tensors[f"optim.{idx}.exp_avg"],
            "exp_avg_sq": tensors[f"optim.{idx}.exp_avg_sq"],
        }
    osd["state"] = state_entries
    opt.load_state_dict(osd)
    gen = torch.Generator().manual_seed(config.seed)
    st = GloState(decoder, tensors["latents"].double(), list(meta["sample_ids"]), opt, config,
                  iteration=int(meta["iteration"]), final_l1=meta.get("final_l1"), _gen=gen)
    st.checkpoint_meta = meta
    return st
