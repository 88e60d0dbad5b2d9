"""``signface`` command line.

Exit codes: 0 success, 1 user/config error, 2 numerical failure,
3 backend/transport failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, RunConfig, config_from_dict, load_config
from .errors import ConfigError, SignFaceError
from .text_features import SENTIMENT_LABELS

log = logging.getLogger("signface")


def _resolved_config(args, out_is_run_dir=False) -> RunConfig:
    cfg = load_config(args.config)
    data = cfg.to_dict()
    for name in args.ablation or []:
        data["ablation"][name] = True
    if getattr(args, "manifest", None):
        data["paths"]["manifest"] = str(args.manifest)
    if out_is_run_dir and getattr(args, "out", None):
        data["paths"]["output_dir"] = str(args.out)
    cfg = config_from_dict(data)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


# -- rendering ---------------------------------------------------------------


def render_animation(frames, path, edges=None, fps=24, titles=None):
    """Landmark scatter with face-graph edges, one image per frame."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.animation import FuncAnimation, PillowWriter

    from .topology import canonical_base_edges

    frames = np.asarray(frames)
    edges = sorted(edges if edges is not None else canonical_base_edges())
    fig, ax = plt.subplots(figsize=(4, 4))
    lo, hi = frames.reshape(-1, 2).min(0), frames.reshape(-1, 2).max(0)
    pad = 0.05 * float((hi - lo).max())
    ax.set_xlim(lo[0] - pad, hi[0] + pad)
    ax.set_ylim(hi[1] + pad, lo[1] - pad)  # image coordinates: y grows downwards
    ax.set_aspect("equal")
    ax.axis("off")
    lines = [ax.plot([], [], "-", color="0.6", lw=0.8)[0] for _ in edges]
    dots = ax.plot([], [], "o", color="C3", ms=2.5)[0]
    label = ax.set_title("")

    def draw(t):
        f = frames[t]
        for ln, (a, b) in zip(lines, edges):
            ln.set_data([f[a, 0], f[b, 0]], [f[a, 1], f[b, 1]])
        dots.set_data(f[:, 0], f[:, 1])
        label.set_text(titles[t] if titles else f"frame {t + 1}/{len(frames)}")
        return lines + [dots, label]

    anim = FuncAnimation(fig, draw, frames=len(frames), blit=False)
    anim.save(str(path), writer=PillowWriter(fps=fps))
    plt.close(fig)
    return len(frames)


def render_histogram(dist: dict, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = np.asarray(dist["edges"])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(edges[:-1], dist["counts"], width=np.diff(edges), align="edge", color="C0", edgecolor="k")
    ax.axvline(dist["mean"], color="C3", ls="--", label=f"mean {dist['mean']:.4f}")
    ax.set_xlabel("average landmark distance")
    ax.set_ylabel("samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- commands ----------------------------------------------------------------


def cmd_synth_data(args):
    from .preprocessing import generate_synthetic_dataset, write_dataset

    manifest, seqs = generate_synthetic_dataset(args.n, args.seed if args.seed is not None else 0)
    path = write_dataset(manifest, seqs, args.out)
    print(f"wrote {len(seqs)} synthetic samples, manifest {path}")
    return 0


def cmd_preprocess(args):
    from .preprocessing import (
        DatasetManifest,
        ManifestRecord,
        condition,
        load_landmarks,
        preprocessing_fingerprint,
        save_landmarks,
    )

    if args.out is None:
        raise ConfigError("preprocess needs --out")
    cfg = _resolved_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(args.manifest)
    if args.split:
        kind, _, value = args.split.partition(":")
        if kind != "speaker" or not value:
            raise ConfigError(f"--split must look like speaker:<id>, got {args.split!r}")
        manifest = manifest.speaker_split(value)
    p = cfg.preprocess
    params = {"frames": p.frames, "min_cutoff": p.min_cutoff, "beta": p.beta, "d_cutoff": p.d_cutoff}
    fingerprint = preprocessing_fingerprint(params)
    done, failures = [], []
    for rec in manifest.records:
        try:
            seq = load_landmarks(manifest.resolve(rec))
            seq = condition(seq, p.frames, p.min_cutoff, p.beta, p.d_cutoff)
            seq.sample_id, seq.text, seq.sentiment_label = rec.sample_id, rec.text, rec.sentiment_label
            save_landmarks(seq, out / f"{rec.sample_id}.json", {"fingerprint": fingerprint, **params})
            done.append(ManifestRecord(rec.sample_id, rec.speaker_id, rec.text, rec.sentiment_label,
                                       f"{rec.sample_id}.json", rec.split))
        except (SignFaceError, ValueError, KeyError) as exc:
            log.warning("skipping %s: %s", rec.sample_id, exc)
            failures.append(rec.sample_id)
    DatasetManifest(done, out).save(out / "manifest.jsonl")
    cfg.paths.manifest = str(out / "manifest.jsonl")
    cfg.write_snapshot(out / "config.resolved.toml")
    (out / "fingerprint.json").write_text(json.dumps({"fingerprint": fingerprint, **params}, sort_keys=True))
    total = len(manifest.records)
    print(f"conditioned {len(done)}/{total} samples (fingerprint {fingerprint}, {len(failures)} warnings)")
    if total and len(failures) > 0.1 * total:
        print(f"error: {len(failures)} of {total} samples failed: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args):
    from . import experiment as ex

    cfg = _resolved_config(args, out_is_run_dir=True)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    seqs = ex.load_dataset(cfg.paths.manifest, "train")
    if args.stage == "glo":
        path, ckpt = ex.train_glo_stage(cfg, seqs)
    elif args.stage == "sampler":
        path, ckpt = ex.train_sampler_stage(cfg, seqs)
    else:
        path, ckpt = ex.train_fed_stage(cfg, seqs)
    cfg.write_snapshot(cfg.output_dir / f"config.{args.stage}.toml")
    print(f"{args.stage}: {path} ({ckpt})")
    return 0


def cmd_infer(args):
    from . import experiment as ex

    cfg = _resolved_config(args)
    gen = ex.load_generator(cfg)
    seq, info = gen(args.text, force_label=args.sentiment, return_info=True)
    out = Path(args.out) if args.out else cfg.output_dir / "infer"
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "text": args.text,
        "sentiment_label": info["sentiment_label"],
        "sentiment_override": args.sentiment,
        "artifacts": gen.versions,
        "ablation": cfg.ablation.active(),
    }
    (out / "sequence.json").write_text(json.dumps({"coords": seq.tolist(), "meta": meta}))
    np.save(out / "sequence.npy", seq)
    cfg.write_snapshot(out / "config.resolved.toml")
    if not args.no_animation:
        n = render_animation(seq, out / "animation.gif")
        print(f"animation: {out / 'animation.gif'} ({n} frames)")
    print(f"sequence: {out / 'sequence.json'} (sentiment {info['sentiment_label']})")
    return 0


def _load_dir(path):
    from .preprocessing import load_landmarks

    out = {}
    for f in sorted(Path(path).glob("*.json")):
        try:
            seq = load_landmarks(f)
        except (SignFaceError, KeyError):
            continue
        out[seq.sample_id or f.stem] = seq.coords
    return out


def cmd_evaluate(args):
    from .evaluation import evaluate, load_fed_model
    from .experiment import report_table

    cfg = _resolved_config(args)
    gen, ref = _load_dir(args.generated), _load_dir(args.reference)
    shared = sorted(set(gen) & set(ref))
    excluded = sorted(set(gen) ^ set(ref))
    if excluded:
        log.warning("unmatched sample ids excluded: %s", ", ".join(excluded))
    if not shared:
        print("error: no sample ids in common between generated and reference", file=sys.stderr)
        return 1
    fed_path = args.fed or (cfg.artifact("fed") if cfg.artifact("fed").exists() else None)
    model = load_fed_model(fed_path) if fed_path else None
    report = evaluate(np.stack([gen[k] for k in shared]), np.stack([ref[k] for k in shared]), model,
                      {"generated": str(args.generated), "reference": str(args.reference),
                       "fed_checkpoint": str(fed_path or ""), "excluded": excluded})
    out = Path(args.out) if args.out else cfg.output_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    render_histogram(report.avg_landmark_distance, out / "avg_landmark_distance.png")
    cfg.write_snapshot(out / "config.resolved.toml")
    print(report_table(report))
    return 0


def cmd_interpolate(args):
    from .checkpoint import checkpoint_id
    from .decoder import decode
    from .experiment import resolve_pyramid
    from .glo import interpolate_latents, load_glo

    cfg = _resolved_config(args)
    glo_path = cfg.artifact("glo")
    if not glo_path.exists():
        raise ConfigError(f"missing prerequisite GLO checkpoint: {glo_path}")
    state = load_glo(glo_path, resolve_pyramid(cfg))
    for sid in (args.source, args.target):
        if sid not in state.sample_ids:
            raise ConfigError(f"unknown sample id {sid!r}; known: {', '.join(state.sample_ids)}")
    path = interpolate_latents(state.latent(args.source), state.latent(args.target), args.steps)
    seqs = decode(np.stack(path), state.decoder)
    out = Path(args.out) if args.out else cfg.output_dir / "interpolate"
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "morph.npy", seqs)
    cfg.write_snapshot(out / "config.resolved.toml")
    (out / "meta.json").write_text(json.dumps({"source": args.source, "target": args.target,
                                               "steps": args.steps, "glo": checkpoint_id(glo_path)}))
    if not args.no_animation:
        # show the middle frame of each step so the morph reads as one clip
        mid = seqs[:, seqs.shape[1] // 2]
        render_animation(mid, out / "morph.gif", fps=4, titles=[f"step {i + 1}/{len(mid)}" for i in range(len(mid))])
    print(f"morph: {out} ({args.steps} steps)")
    return 0


def cmd_experiment(args):
    from .experiment import report_table, run_experiment

    cfg = _resolved_config(args, out_is_run_dir=True)
    report = run_experiment(cfg)
    render_histogram(report.avg_landmark_distance, cfg.output_dir / "avg_landmark_distance.png")
    print(f"ablation: {', '.join(cfg.ablation.active()) or 'none'}")
    print(report_table(report))
    return 0


# -- parser ------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--ablation", action="append", choices=ABLATIONS, help="enable an ablation (repeatable)")
    p.add_argument("--out", type=Path, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="signface", description="Sentiment-aware facial expression generation from text")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a procedural landmark dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="condition raw landmark files")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", help="speaker:<id> for a person-specific split")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one stage")
    _common(p)
    p.add_argument("--stage", choices=("glo", "sampler", "fed"), required=True)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate a sequence for a sentence")
    _common(p)
    p.add_argument("--text", required=True)
    p.add_argument("--sentiment", choices=SENTIMENT_LABELS, help="force a sentiment prototype")
    p.add_argument("--no-animation", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score generated sequences against references")
    _common(p)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--fed", type=Path, help="FED autoencoder checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("interpolate", help="morph between two training latents")
    _common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--no-animation", action="store_true")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("experiment", help="train all stages and evaluate (ablations via --ablation)")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SignFaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
