"""Stage orchestration shared by the CLI and the ablation harness.

Each stage reads its inputs from a RunConfig, writes a checkpoint under the
run's output directory and returns where it went. ``run_experiment`` chains
all of them and scores the result.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint, state_to_tensors
from .config import RunConfig
from .decoder import build_decoder, decode, restore_decoder
from .errors import ConfigError, VersionMismatchError
from .evaluation import EvalReport, evaluate, load_fed_model, save_fed_model, train_fed_autoencoder
from .glo import load_glo, save_glo, train_glo, write_history_csv
from .preprocessing import DatasetManifest, LandmarkSequence, load_landmarks
from .sampler import (
    load_sampler,
    nearest_neighbor_heuristic,
    sample_latent,
    save_sampler,
    train_end_to_end,
    train_sampler,
)
from .text_features import CachedBackend, HttpBackend, SentenceFeatures, sentence_features, stub_backend
from .topology import GraphPyramid, build_pyramid, default_pyramid

log = logging.getLogger(__name__)


def resolve_pyramid(cfg: RunConfig) -> GraphPyramid:
    if cfg.paths.topology:
        return GraphPyramid.load(cfg.paths.topology)
    if cfg.ablation.wo_knn:
        return build_pyramid(k=0)
    return default_pyramid()


def make_backend(cfg: RunConfig):
    b = cfg.backend
    if b.kind == "http":
        backend = HttpBackend(b.endpoint or None, timeout=b.timeout, retries=b.retries)
    else:
        backend = stub_backend(b.seed)
    if cfg.paths.feature_cache:
        backend = CachedBackend(backend, cfg.paths.feature_cache)
    return backend


def load_dataset(manifest_path, split: str | None = "train") -> list[LandmarkSequence]:
    """Conditioned sequences listed in a manifest (optionally one split only)."""
    if not manifest_path:
        raise ConfigError("no dataset manifest configured (paths.manifest)")
    manifest = DatasetManifest.load(manifest_path)
    records = manifest.records if split is None else manifest.split(split)
    seqs = []
    for rec in records:
        seq = load_landmarks(manifest.resolve(rec))
        seq.sample_id, seq.text = rec.sample_id, rec.text or seq.text
        seq.sentiment_label = rec.sentiment_label or seq.sentiment_label
        seqs.append(seq)
    if not seqs:
        raise ConfigError(f"manifest {manifest_path} has no {split or 'usable'} samples")
    return seqs


def _require(path: Path, what: str):
    if not Path(path).exists():
        raise ConfigError(f"missing prerequisite {what}: {path} (run that stage first)")


def train_glo_stage(cfg: RunConfig, seqs) -> tuple[Path, str]:
    if cfg.ablation.wo_glo:
        raise ConfigError("wo_glo has no GLO stage; the sampler stage trains the decoder end-to-end")
    out = cfg.artifact("glo")
    out.parent.mkdir(parents=True, exist_ok=True)
    state = train_glo([(s.sample_id, s.coords) for s in seqs], cfg.glo, resolve_pyramid(cfg))
    ckpt = save_glo(out, state)
    write_history_csv(state, out.with_suffix(".history.csv"))
    log.info("GLO: final l1 %.5f, checkpoint %s", state.final_l1, ckpt[:12])
    return out, ckpt


def _features(seqs, backend) -> list[SentenceFeatures]:
    return [sentence_features(s.text, backend) for s in seqs]


def train_sampler_stage(cfg: RunConfig, seqs, backend=None) -> tuple[Path, str]:
    """Sampler stage; its checkpoint also carries whatever inference needs
    beyond the GLO checkpoint (an end-to-end decoder, or the latent bank)."""
    backend = backend or make_backend(cfg)
    out = cfg.artifact("sampler")
    out.parent.mkdir(parents=True, exist_ok=True)
    feats = _features(seqs, backend)
    if cfg.ablation.wo_glo:
        pyramid = resolve_pyramid(cfg)
        decoder = build_decoder(pyramid, cfg.glo.decoder, seed=cfg.glo.seed)
        state = train_end_to_end(feats, np.stack([s.coords for s in seqs]), decoder, cfg.sampler,
                                 lr_decoder=cfg.glo.lr_theta)
        extra = state_to_tensors("decoder", decoder)
        meta = {"mode": "end_to_end", "decoder_kind": decoder.kind, "decoder_config": decoder.config(),
                "topology_version": decoder.topology_version, "seed": cfg.glo.seed}
        ckpt = save_sampler(out, state, extra, meta)
        return out, ckpt
    glo_path = cfg.artifact("glo")
    _require(glo_path, "GLO checkpoint")
    glo_id = checkpoint_id(glo_path)
    glo = load_glo(glo_path, resolve_pyramid(cfg))
    latents = [glo.latent(s.sample_id) for s in seqs]
    if cfg.ablation.wo_sn:
        # no learned sampler: store the (features, latent) bank for nearest-neighbour lookup
        tensors = {
            "bank.semantic": torch.as_tensor(np.stack([f.semantic for f in feats])),
            "bank.sentiment": torch.as_tensor(np.stack([f.sentiment for f in feats])),
            "bank.latents": torch.as_tensor(np.stack(latents)),
        }
        meta = {"mode": "nn_bank", "config": cfg.sampler.__dict__, "glo_checkpoint_id": glo_id,
                "bank_ids": [s.sample_id for s in seqs]}
        return out, save_checkpoint(out, tensors, "sampler", meta)
    state = train_sampler(list(zip(feats, latents)), cfg.sampler)
    state.glo_checkpoint_id = glo_id
    ckpt = save_sampler(out, state, extra_meta={"mode": "network"})
    log.info("sampler: mean cosine loss %.5f", state.final_loss)
    return out, ckpt


def train_fed_stage(cfg: RunConfig, seqs) -> tuple[Path, str]:
    out = cfg.artifact("fed")
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_id = ",".join(s.sample_id for s in seqs)
    model = train_fed_autoencoder(np.stack([s.coords for s in seqs]), cfg.fed, dataset_id)
    return out, save_fed_model(out, model)


@dataclass
class Generator:
    """Text -> (64, 69, 2) sequence using whatever the run's ablation trained."""

    cfg: RunConfig
    backend: object
    decoder: torch.nn.Module
    sampler: object | None
    bank: list | None
    versions: dict

    def latent(self, text, force_label=None):
        feats = sentence_features(text, self.backend, force_label)
        if self.bank is not None:
            return nearest_neighbor_heuristic(feats, self.bank), feats
        return sample_latent(feats, self.sampler), feats

    def __call__(self, text, force_label=None, return_info=False):
        z, feats = self.latent(text, force_label)
        seq = decode(z, self.decoder)
        if return_info:
            return seq, {"sentiment_label": feats.sentiment_label, "latent": z}
        return seq


def load_generator(cfg: RunConfig, backend=None) -> Generator:
    backend = backend or make_backend(cfg)
    pyramid = resolve_pyramid(cfg)
    sampler_path = cfg.artifact("sampler")
    _require(sampler_path, "sampler checkpoint")
    tensors, meta = load_checkpoint(sampler_path, "sampler")
    mode = meta.get("mode", "network")
    versions = {"sampler": checkpoint_id(sampler_path), "topology": pyramid.version}
    if mode == "end_to_end":
        decoder = restore_decoder({k: v for k, v in tensors.items() if k.startswith("decoder.")}, meta, pyramid)
        state, _, _ = load_sampler(sampler_path)
        return Generator(cfg, backend, decoder, state.model, None, versions)
    glo_path = cfg.artifact("glo")
    _require(glo_path, "GLO checkpoint")
    glo_id = checkpoint_id(glo_path)
    if meta.get("glo_checkpoint_id") != glo_id:
        raise VersionMismatchError(
            f"sampler was trained against GLO checkpoint {meta.get('glo_checkpoint_id')}, "
            f"but {glo_id} is loaded")
    versions["glo"] = glo_id
    decoder = load_glo(glo_path, pyramid).decoder
    if mode == "nn_bank":
        bank = [(SentenceFeatures(sem.numpy(), sen.numpy(), None, sid), z.numpy())
                for sem, sen, z, sid in zip(tensors["bank.semantic"], tensors["bank.sentiment"],
                                            tensors["bank.latents"], meta["bank_ids"])]
        return Generator(cfg, backend, decoder, None, bank, versions)
    state, _, _ = load_sampler(sampler_path, glo_id)
    return Generator(cfg, backend, decoder, state.model, None, versions)


def run_experiment(cfg: RunConfig, eval_split: str | None = None) -> EvalReport:
    """Train every stage the configuration needs, generate each evaluation
    sentence and score it against its reference.

    Evaluation uses ``eval_split`` when given, otherwise the test split if the
    manifest has one and the training split if not.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out / "config.resolved.toml")
    train = load_dataset(cfg.paths.manifest, "train")
    if eval_split is None:
        manifest = DatasetManifest.load(cfg.paths.manifest)
        eval_split = "test" if manifest.split("test") else "train"
    test = load_dataset(cfg.paths.manifest, eval_split)
    backend = make_backend(cfg)
    if not cfg.ablation.wo_glo:
        train_glo_stage(cfg, train)
    train_sampler_stage(cfg, train, backend)
    train_fed_stage(cfg, train)
    gen = load_generator(cfg, backend)
    generated = np.stack([gen(s.text) for s in test])
    reference = np.stack([s.coords for s in test])
    artifacts = dict(gen.versions, fed=checkpoint_id(cfg.artifact("fed")),
                     ablation=",".join(cfg.ablation.active()) or "full")
    report = evaluate(generated, reference, load_fed_model(cfg.artifact("fed")), artifacts)
    (out / "report.json").write_text(report.to_json())
    return report


def report_table(report: EvalReport) -> str:
    rows = [("FED", report.fed), ("mouth", report.regions["mouth"]),
            ("eyebrows", report.regions["eyebrows"]), ("jaw-lips", report.regions["jaw_lips"])]
    width = max(len(k) for k, _ in rows)
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ---------"]
    for k, v in rows:
        lines.append(f"{k:<{width}}  {'n/a' if v is None else f'{v:.6f}'}")
    return "\n".join(lines)


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
