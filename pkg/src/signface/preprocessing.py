"""Landmark conditioning: frontalization, one-euro smoothing, uniform
resampling, bounding-box normalization, plus dataset I/O and a procedural
synthetic dataset generator."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateFrameError,
    FrontalizationError,
    InvalidParameterError,
    ShapeError,
    VersionMismatchError,
)

LANDMARK_FILE_VERSION = 1
MANIFEST_VERSION = 1
SENTIMENTS = ("joy", "sadness", "anger")
FRONTAL_ANCHORS = (36, 45, 33, 48, 54)
SEQUENCE_LENGTH = 64


@dataclass
class LandmarkSequence:
    coords: np.ndarray  # (T, 69, 2)
    fps: float = 24.0
    sample_id: str = ""
    speaker_id: str = ""
    text: str = ""
    sentiment_label: str | None = None
    flagged_frames: tuple = field(default=())

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 3 or self.coords.shape[1:] != (69, 2) or len(self.coords) < 1:
            raise ShapeError(f"landmark sequence must be (T, 69, 2), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ShapeError(f"non-finite coordinates in sample {self.sample_id!r}")

    @property
    def num_frames(self):
        return len(self.coords)

    def with_coords(self, coords, **changes):
        return replace(self, coords=coords, **changes)


# -- frontalization ---------------------------------------------------------


def similarity_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (scale, rotation, translation) mapping src onto dst.

    Returns ``(scale, R, t)`` with ``dst ~ scale * src @ R.T + t``. Reflections
    are excluded.
    """
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum()
    if var_s < 1e-12:
        raise FrontalizationError("anchor points coincide")
    cov = xd.T @ xs
    u, sv, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    # a rank-1 anchor set (collinear points) leaves rotation underdetermined
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise FrontalizationError("anchor points are collinear")
    s = np.diag([1.0, d])
    rot = u @ s @ vt
    scale = (sv * np.diag(s)).sum() / var_s
    return scale, rot, mu_d - scale * mu_s @ rot.T


def frontalize(seq: LandmarkSequence, template=None, strict=False) -> LandmarkSequence:
    """Remove the per-frame similarity pose by aligning five stable anchors
    (eye corners, nose tip, mouth corners) onto the frontal template.

    The identity-specific shape survives because only a similarity transform
    is removed. Degenerate frames are left untouched and reported in
    ``flagged_frames``; with ``strict=True`` they raise instead.
    """
    from .topology import canonical_template

    template = canonical_template() if template is None else np.asarray(template)
    target = template[list(FRONTAL_ANCHORS)]
    out = np.empty_like(seq.coords)
    flagged = []
    for t, frame in enumerate(seq.coords):
        try:
            scale, rot, shift = similarity_fit(frame[list(FRONTAL_ANCHORS)], target)
        except FrontalizationError:
            flagged.append(t)
            out[t] = frame
            continue
        out[t] = scale * frame @ rot.T + shift
    if flagged and strict:
        raise FrontalizationError(f"degenerate anchors in frames {flagged}", flagged)
    return seq.with_coords(out, flagged_frames=tuple(flagged))


# -- one-euro filter ---------------------------------------------------------


def _smoothing_factor(te, cutoff):
    tau = 1.0 / (2 * math.pi * cutoff)
    return 1.0 / (1.0 + tau / te)


def one_euro(signal: np.ndarray, fps: float, min_cutoff=1.0, beta=0.007, d_cutoff=1.0) -> np.ndarray:
    """One-euro filter along axis 0, independently for every other element."""
    if fps <= 0:
        raise InvalidParameterError("fps must be positive")
    if min_cutoff <= 0 or d_cutoff <= 0:
        raise InvalidParameterError("cutoff frequencies must be positive")
    if beta < 0:
        raise InvalidParameterError("beta must be non-negative")
    x = np.asarray(signal, dtype=float)
    out = np.empty_like(x)
    te = 1.0 / fps
    a_d = _smoothing_factor(te, d_cutoff)
    x_hat = out[0] = x[0]
    dx_hat = np.zeros_like(x[0])
    for t in range(1, len(x)):
        dx = (x[t] - x_hat) * fps
        dx_hat = a_d * dx + (1 - a_d) * dx_hat
        a = _smoothing_factor(te, min_cutoff + beta * np.abs(dx_hat))
        x_hat = a * x[t] + (1 - a) * x_hat
        out[t] = x_hat
    return out


def one_euro_filter(seq: LandmarkSequence, min_cutoff=1.0, beta=0.007, d_cutoff=1.0) -> LandmarkSequence:
    return seq.with_coords(one_euro(seq.coords, seq.fps, min_cutoff, beta, d_cutoff))


# -- resampling / normalization ---------------------------------------------


def resample_indices(num_frames: int, n: int) -> np.ndarray:
    if num_frames < 1 or n < 1:
        raise InvalidParameterError("frame counts must be >= 1")
    if n == 1:
        return np.zeros(1, dtype=int)
    # floor(x + 0.5) rounds halves up; np.round would round them to even
    return np.floor(np.arange(n) * (num_frames - 1) / (n - 1) + 0.5).astype(int)


def resample_uniform(seq: LandmarkSequence, n: int = SEQUENCE_LENGTH) -> LandmarkSequence:
    idx = resample_indices(seq.num_frames, n)
    fps = seq.fps
    if seq.num_frames > 1 and n > 1:
        fps = seq.fps * (n - 1) / (seq.num_frames - 1)
    return seq.with_coords(seq.coords[idx], fps=fps)


def normalize_bbox(frame: np.ndarray) -> np.ndarray:
    """Center on the bounding box and scale by its diagonal; works on (..., P, 2)."""
    frame = np.asarray(frame, dtype=float)
    lo = frame.min(axis=-2, keepdims=True)
    extent = frame.max(axis=-2, keepdims=True) - lo
    diag = np.sqrt((extent ** 2).sum(-1, keepdims=True))
    if np.any(diag == 0):
        raise DegenerateFrameError("bounding box has zero extent")
    return (frame - lo - extent / 2) / diag + 0.5


def normalize_sequence(seq: LandmarkSequence) -> LandmarkSequence:
    return seq.with_coords(normalize_bbox(seq.coords))


def condition(seq: LandmarkSequence, n=SEQUENCE_LENGTH, min_cutoff=1.0, beta=0.007, d_cutoff=1.0):
    """frontalize -> one-euro -> resample -> normalize."""
    seq = frontalize(seq)
    seq = one_euro_filter(seq, min_cutoff, beta, d_cutoff)
    seq = resample_uniform(seq, n)
    return normalize_sequence(seq)


def preprocessing_fingerprint(params: dict) -> str:
    payload = json.dumps({"pipeline": "frontalize/one_euro/resample/normalize", **params}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# -- file formats ------------------------------------------------------------


def landmark_to_json(seq: LandmarkSequence, extra=None) -> dict:
    doc = {
        "version": LANDMARK_FILE_VERSION,
        "sample_id": seq.sample_id,
        "speaker_id": seq.speaker_id,
        "text": seq.text,
        "sentiment": seq.sentiment_label,
        "fps": seq.fps,
        "coords": seq.coords.tolist(),
    }
    if extra:
        doc["meta"] = extra
    return doc


def save_landmarks(seq: LandmarkSequence, path, extra=None):
    Path(path).write_text(json.dumps(landmark_to_json(seq, extra)))


def load_landmarks(path) -> LandmarkSequence:
    """Read a landmark file; 68-point coordinates get the centroid appended."""
    from .topology import append_centroid

    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read landmark file {path}: {exc}") from exc
    if doc.get("version") != LANDMARK_FILE_VERSION:
        raise VersionMismatchError(f"{path}: unsupported landmark file version {doc.get('version')!r}")
    coords = np.asarray(doc["coords"], dtype=float)
    if coords.ndim == 3 and coords.shape[1] == 68:
        coords = append_centroid(coords)
    return LandmarkSequence(
        coords=coords,
        fps=float(doc.get("fps", 24.0)),
        sample_id=str(doc.get("sample_id", "")),
        speaker_id=str(doc.get("speaker_id", "")),
        text=doc.get("text", ""),
        sentiment_label=doc.get("sentiment"),
    )


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    speaker_id: str
    text: str
    sentiment_label: str | None
    path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate sample ids in manifest")
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ConfigError(f"bad split tag {r.split!r} for {r.sample_id}")

    def resolve(self, record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def split(self, tag):
        return [r for r in self.records if r.split == tag]

    def speaker_split(self, speaker_id, test_fraction=0.25):
        """Person-specific split: keep one speaker, hold out the last fraction as test."""
        mine = sorted((r for r in self.records if r.speaker_id == speaker_id), key=lambda r: r.sample_id)
        if not mine:
            raise ConfigError(f"no samples for speaker {speaker_id!r}")
        n_test = int(round(len(mine) * test_fraction)) if len(mine) > 1 else 0
        cut = len(mine) - n_test
        recs = [replace(r, split="train" if i < cut else "test") for i, r in enumerate(mine)]
        return DatasetManifest(recs, self.root)

    def save(self, path):
        lines = [json.dumps({"manifest_version": MANIFEST_VERSION})]
        for r in self.records:
            lines.append(json.dumps({
                "sample_id": r.sample_id,
                "speaker_id": r.speaker_id,
                "text": r.text,
                "sentiment": r.sentiment_label,
                "path": r.path,
                "split": r.split,
            }))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise ConfigError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("manifest_version") != MANIFEST_VERSION:
            raise VersionMismatchError(f"unsupported manifest version {header.get('manifest_version')!r}")
        recs = []
        for ln in lines[1:]:
            d = json.loads(ln)
            recs.append(ManifestRecord(d["sample_id"], d.get("speaker_id", ""), d.get("text", ""),
                                       d.get("sentiment"), d["path"], d.get("split", "train")))
        return cls(recs, path.parent)


# -- synthetic data ------------------------------------------------------------

_SUBJECTS = ("the garden", "my new job", "the weather", "our trip", "the meeting",
             "the test results", "the old car", "the neighbours", "the concert",
             "the late train", "dinner tonight", "the letter")
_PHRASES = {
    "joy": "I am so happy about {}",
    "sadness": "I feel sad about {}",
    "anger": "I am angry about {}",
}
LEFT_CORNER, RIGHT_CORNER = 48, 54
UPPER_LIP, LOWER_LIP = 51, 57
INNER_BROWS = (20, 21, 22, 23)


def _sentiment_field(label, base, strength):
    """Static displacement (y down) that characterises each sentiment regime."""
    d = np.zeros_like(base)
    if label == "joy":
        for idx, w in ((48, 1.0), (54, 1.0), (49, 0.5), (53, 0.5), (59, 0.5), (55, 0.5), (60, 0.6), (64, 0.6)):
            d[idx, 1] -= strength * w
    elif label == "sadness":
        for idx, w in ((48, 1.0), (54, 1.0), (49, 0.4), (53, 0.4), (59, 0.4), (55, 0.4), (60, 0.5), (64, 0.5)):
            d[idx, 1] += strength * w
        for idx in (37, 38, 43, 44):
            d[idx, 1] += 0.5 * strength
    elif label == "anger":
        for idx, w in ((20, 0.6), (21, 1.0), (22, 1.0), (23, 0.6)):
            d[idx, 1] += strength * w
        d[21, 0] += 0.3 * strength
        d[22, 0] -= 0.3 * strength
    return d


def mouth_corner_lift(coords: np.ndarray) -> float:
    """Mean height of the mouth corners above the lip midline (positive = raised)."""
    c = np.asarray(coords)
    mid = 0.5 * (c[..., UPPER_LIP, 1] + c[..., LOWER_LIP, 1])
    corners = 0.5 * (c[..., LEFT_CORNER, 1] + c[..., RIGHT_CORNER, 1])
    return float(np.mean(mid - corners))


def synthetic_sequence(label, rng: np.random.Generator, n_frames=SEQUENCE_LENGTH, fps=24.0):
    from .topology import _template68, append_centroid

    base = _template68()
    identity = rng.normal(scale=0.01, size=base.shape)
    strength = rng.uniform(0.06, 0.09)
    t = np.arange(n_frames) / fps
    f_mouth, f_brow = rng.uniform(1.5, 3.0), rng.uniform(0.4, 1.0)
    ph_mouth, ph_brow = rng.uniform(0, 2 * np.pi, size=2)
    ramp = 0.5 + 0.5 * np.sin(np.pi * np.arange(n_frames) / (n_frames - 1))
    frames = np.empty((n_frames, 68, 2))
    senti = _sentiment_field(label, base, strength)
    for i in range(n_frames):
        f = base + identity + ramp[i] * senti
        opening = 0.05 * (0.5 + 0.5 * np.sin(2 * np.pi * f_mouth * t[i] + ph_mouth))
        f[[56, 57, 58, 65, 66, 67], 1] += opening
        f[[55, 59], 1] += 0.6 * opening
        f[6:11, 1] += 0.5 * opening
        brow = 0.02 * np.sin(2 * np.pi * f_brow * t[i] + ph_brow)
        f[17:27, 1] -= brow
        frames[i] = f
    return normalize_bbox(append_centroid(frames))


def generate_synthetic_dataset(n_samples: int, seed: int = 0, speaker_id="synthetic"):
    """Procedural 64-frame sequences paired with templated sentences.

    Sentiments cycle joy, sadness, anger. Returns ``(manifest, sequences)``;
    manifest paths are ``<sample_id>.json`` relative to wherever the caller
    writes the sequences.
    """
    if n_samples < 1:
        raise InvalidParameterError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    records, seqs = [], []
    for i in range(n_samples):
        label = SENTIMENTS[i % len(SENTIMENTS)]
        text = _PHRASES[label].format(_SUBJECTS[i % len(_SUBJECTS)])
        sid = f"syn{i:04d}"
        seq = LandmarkSequence(synthetic_sequence(label, rng), 24.0, sid, speaker_id, text, label)
        records.append(ManifestRecord(sid, speaker_id, text, label, f"{sid}.json", "train"))
        seqs.append(seq)
    return DatasetManifest(records), seqs


def write_dataset(manifest: DatasetManifest, sequences, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        save_landmarks(seq, out_dir / f"{seq.sample_id}.json")
    path = out_dir / "manifest.jsonl"
    DatasetManifest(manifest.records, out_dir).save(path)
    return path
