"""Feature-file I/O, dataset descriptors, batching, and the synthetic
planted-anomaly benchmark.

Feature files are a small self-describing binary format:

    magic "DAMSFEAT" | version u16 LE | rank u8 | extents u32 LE each
    | payload float64 LE row-major | crc32(payload) u32 LE

Datasets on disk are a directory of feature files plus `manifest.jsonl`,
one JSON object per video with relative feature paths, a "normal" /
"anomalous" label, and optional frame ground truth and pseudo-probabilities.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .amtpn import ConfigError

FEATURE_MAGIC = b"DAMSFEAT"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"


class FeatureFileError(ValueError):
    """Base class for feature-file format violations."""
    code = "format"


class BadMagicError(FeatureFileError):
    code = "bad-magic"


class BadVersionError(FeatureFileError):
    code = "bad-version"


class ChecksumError(FeatureFileError):
    code = "bad-checksum"


class TruncatedFileError(FeatureFileError):
    code = "truncated"


def write_feature_file(path, tensor):
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim < 1 or tensor.ndim > 3:
        raise FeatureFileError(f"rank must be 1..3, got {tensor.ndim}")
    if any(e < 1 for e in tensor.shape):
        raise FeatureFileError(f"empty extent in shape {tensor.shape}")
    payload = np.ascontiguousarray(tensor).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<H", FEATURE_VERSION))
        fh.write(struct.pack("<B", tensor.ndim))
        for e in tensor.shape:
            fh.write(struct.pack("<I", e))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_feature_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(FEATURE_MAGIC) + 3:
        raise TruncatedFileError(f"{path}: too short for a header")
    if blob[:8] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:8]!r}")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != FEATURE_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    rank = blob[10]
    if rank < 1 or rank > 3:
        raise FeatureFileError(f"{path}: bad rank {rank}")
    off = 11
    if len(blob) < off + 4 * rank:
        raise TruncatedFileError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(shape))
    need = off + 8 * count + 4
    if len(blob) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, got {len(blob)}")
    payload = blob[off:off + 8 * count]
    (crc,) = struct.unpack_from("<I", blob, off + 8 * count)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


# ---------------------------------------------------------------------------
# records and manifests
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class VideoRecord:
    id: str
    crops: list                      # >= 1 arrays [Din, T], shared (Din, T)
    label: str                       # LABEL_NORMAL | LABEL_ANOMALOUS
    frame_gt: np.ndarray = None      # optional binary [T]
    pseudo_probs: np.ndarray = None  # optional real [T]

    def __post_init__(self):
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ConfigError(f"bad label {self.label!r}")
        if not self.crops:
            raise ConfigError(f"{self.id}: needs at least one crop")
        shape = self.crops[0].shape
        if any(c.shape != shape for c in self.crops):
            raise ConfigError(f"{self.id}: crops disagree on shape")
        t = shape[1]
        for name, arr in (("frame_gt", self.frame_gt),
                          ("pseudo_probs", self.pseudo_probs)):
            if arr is not None and len(arr) != t:
                raise ConfigError(f"{self.id}: {name} length {len(arr)} != T {t}")

    @property
    def is_anomalous(self):
        return self.label == LABEL_ANOMALOUS

    @property
    def num_frames(self):
        return self.crops[0].shape[1]

    @property
    def input_dim(self):
        return self.crops[0].shape[0]


def save_dataset(records, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            paths = []
            for i, crop in enumerate(rec.crops):
                rel = f"{rec.id}_crop{i}.feat"
                write_feature_file(out_dir / rel, crop)
                paths.append(rel)
            row = {"id": rec.id, "feature_files": paths, "label": rec.label}
            if rec.frame_gt is not None:
                row["frame_gt"] = [int(v) for v in rec.frame_gt]
            if rec.pseudo_probs is not None:
                row["pseudo_probs"] = [float(v) for v in rec.pseudo_probs]
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    manifest = in_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {in_dir}")
    records = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            crops = [read_feature_file(in_dir / rel) for rel in row["feature_files"]]
            records.append(VideoRecord(
                id=row["id"], crops=crops, label=row["label"],
                frame_gt=(np.asarray(row["frame_gt"], dtype=np.float64)
                          if "frame_gt" in row else None),
                pseudo_probs=(np.asarray(row["pseudo_probs"], dtype=np.float64)
                              if "pseudo_probs" in row else None)))
    return records


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 200
    t_min: int = 64
    t_max: int = 128
    input_dim: int = 64
    anomaly_fraction: float = 0.5
    anomaly_durations: tuple = (2, 6, 18, 54)
    snr: float = 3.0
    label_noise: float = 0.1
    num_crops: int = 1
    smoothing: float = 0.7   # AR(1) coefficient of the background process
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.input_dim < 1 or self.num_crops < 1:
            raise ConfigError("num_videos/input_dim/num_crops must be positive")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError("need 1 <= t_min <= t_max")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ConfigError("anomaly_fraction must lie in [0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError("label_noise must lie in [0, 1]")
        if self.snr < 0:
            raise ConfigError("snr must be >= 0")
        if not self.anomaly_durations:
            raise ConfigError("need at least one anomaly duration")


def anomaly_directions(spec: SyntheticSpec):
    """Unit direction per planted anomaly class, fixed by the spec seed."""
    rng = np.random.default_rng([spec.seed, 0xD1])
    dirs = rng.standard_normal((len(spec.anomaly_durations), spec.input_dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _background(rng, dim, t, smoothing):
    """AR(1)-smoothed Gaussian process, stationary unit marginal variance."""
    white = rng.standard_normal((dim, t))
    if smoothing <= 0:
        return white
    out = np.empty_like(white)
    scale = math.sqrt(1.0 - smoothing ** 2)
    out[:, 0] = white[:, 0]
    for i in range(1, t):
        out[:, i] = smoothing * out[:, i - 1] + scale * white[:, i]
    return out


def synthesize_dataset(spec: SyntheticSpec):
    """Deterministic planted-anomaly videos.

    Normal frames follow a smoothed Gaussian background; anomalous videos
    carry 1-3 planted segments whose frames add a class direction scaled by
    snr. Pseudo-probabilities emulate offline vision-language labels: the
    frame ground truth with a label_noise flip rate, mapped into (0, 1).
    """
    dirs = anomaly_directions(spec)
    n_abn = round(spec.num_videos * spec.anomaly_fraction)
    records = []
    for v in range(spec.num_videos):
        rng = np.random.default_rng([spec.seed, 0xA0, v])
        t = int(rng.integers(spec.t_min, spec.t_max + 1))
        base = _background(rng, spec.input_dim, t, spec.smoothing)
        gt = np.zeros(t)
        anomalous = v < n_abn
        if anomalous:
            for _ in range(int(rng.integers(1, 4))):
                cls = int(rng.integers(len(spec.anomaly_durations)))
                dur = min(spec.anomaly_durations[cls], t)
                start = int(rng.integers(0, t - dur + 1))
                base[:, start:start + dur] += spec.snr * dirs[cls][:, None]
                gt[start:start + dur] = 1.0
        flip = rng.random(t) < spec.label_noise
        noisy = np.where(flip, 1.0 - gt, gt)
        pseudo = np.where(noisy > 0.5,
                          rng.uniform(0.55, 0.95, t),
                          rng.uniform(0.05, 0.45, t))
        crops = [base]
        for _ in range(spec.num_crops - 1):
            crops.append(base + 0.1 * rng.standard_normal(base.shape))
        records.append(VideoRecord(
            id=f"video{v:04d}",
            crops=crops,
            label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
            frame_gt=gt,
            pseudo_probs=pseudo))
    return records


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Batch:
    video_ids: list
    features: np.ndarray     # [B, Din, Tmax], zero-padded, first crop
    mask: np.ndarray         # [B, Tmax], 1 on real frames
    labels: np.ndarray       # [B], 1 = anomalous
    pseudo_probs: np.ndarray # [B, Tmax], 0 outside mask / when absent
    has_pseudo: np.ndarray   # [B]
    records: list


def _collate(records):
    b = len(records)
    din = records[0].input_dim
    tmax = max(r.num_frames for r in records)
    feats = np.zeros((b, din, tmax))
    mask = np.zeros((b, tmax))
    labels = np.zeros(b)
    pseudo = np.zeros((b, tmax))
    has_pseudo = np.zeros(b)
    for i, r in enumerate(records):
        if r.input_dim != din:
            raise ConfigError("batch mixes feature dimensions")
        t = r.num_frames
        feats[i, :, :t] = r.crops[0]
        mask[i, :t] = 1.0
        labels[i] = 1.0 if r.is_anomalous else 0.0
        if r.pseudo_probs is not None:
            pseudo[i, :t] = r.pseudo_probs
            has_pseudo[i] = 1.0
    return Batch([r.id for r in records], feats, mask, labels, pseudo,
                 has_pseudo, list(records))


def _rebalance(chunks, labels):
    """Swap videos between chunks so each holds both classes when possible."""
    for ci, chunk in enumerate(chunks):
        present = {labels[i] for i in chunk}
        if len(present) > 1 or len(chunk) < 2:
            continue
        (only,) = present
        for cj, other in enumerate(chunks):
            if cj == ci:
                continue
            donors = [k for k, i in enumerate(other) if labels[i] != only]
            if len(donors) >= 2:
                k = donors[0]
                chunk[0], other[k] = other[k], chunk[0]
                break
    return chunks


def batch_iter(records, batch_size, seed=0, mode="eval", epoch=0):
    """Batches of collated videos.

    Train mode shuffles with a permutation derived from (seed, epoch) and
    rebalances so every batch contains both classes when possible; eval mode
    preserves input order. Fully deterministic.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"bad batch mode {mode!r}")
    idx = list(range(len(records)))
    if mode == "train":
        rng = np.random.default_rng([seed, 0xB5, epoch])
        idx = list(rng.permutation(len(records)))
        chunks = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        labels = [1 if records[i].is_anomalous else 0 for i in range(len(records))]
        chunks = _rebalance(chunks, labels)
    else:
        chunks = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    for chunk in chunks:
        yield _collate([records[i] for i in chunk])


def tencrop_aggregate(per_crop_scores):
    """Elementwise mean of per-crop frame score curves."""
    if len(per_crop_scores) < 1:
        raise ConfigError("tencrop_aggregate: no crops")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in per_crop_scores])
    return stack.mean(axis=0)
