"""Frozen-feature extraction with a per-video binary cache.

Frames are deterministically preprocessed (resize shorter side, center crop,
no augmentation) and encoded with the EMA target encoder, grouped by video in
frame order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..dataio import DatasetManifest, load_images
from ..exceptions import CheckpointError, ManifestError
from ..trainer import load_train_state
from ..views import patchify, resize_bilinear

FEATURE_MAGIC = b"MSNFEAT1"
FEATURE_FORMAT_VERSION = 1


@dataclass
class FeatureSequence:
    """Per-video frozen frame embeddings (T x d) plus frame labels."""

    video_id: str
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("embeddings must be a non-empty T x d array")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("labels must align with embedding rows")


def preprocess_frame(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic eval-time preprocessing: shorter-side resize + center crop."""
    h, w = image.shape[:2]
    if h == size and w == size:
        return image.astype(np.float32)
    short = min(h, w)
    top = (h - short) // 2
    left = (w - short) // 2
    square = image[top:top + short, left:left + short]
    return resize_bilinear(square, size)


def write_feature_cache(path: Path, seq: FeatureSequence) -> None:
    emb = np.ascontiguousarray(seq.embeddings, dtype="<f4")
    vid = seq.video_id.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_FORMAT_VERSION))
        fh.write(struct.pack("<I", len(vid)))
        fh.write(vid)
        fh.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        fh.write(emb.tobytes())


def read_feature_cache(path: Path, labels: np.ndarray) -> FeatureSequence:
    blob = path.read_bytes()
    offset = len(FEATURE_MAGIC)
    if blob[:offset] != FEATURE_MAGIC:
        raise CheckpointError(f"{path} is not a feature cache file")
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != FEATURE_FORMAT_VERSION:
        raise CheckpointError(f"unsupported feature cache version {version}")
    (vid_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    video_id = blob[offset:offset + vid_len].decode("utf-8")
    offset += vid_len
    t, d = struct.unpack_from("<II", blob, offset)
    offset += 8
    emb = np.frombuffer(blob, dtype="<f4", count=t * d, offset=offset).reshape(t, d)
    return FeatureSequence(video_id, emb.copy(), labels)


def extract_features(
    checkpoint_path: Path | str,
    manifest: DatasetManifest,
    cache_dir: Path | str | None = None,
    batch_size: int = 256,
) -> list[FeatureSequence]:
    """Encode every labeled frame with the target encoder, grouped by video.

    With ``cache_dir`` set, per-video caches are written on first use and
    reused afterwards.
    """
    if not manifest.is_fully_labeled():
        raise ManifestError("feature extraction requires a fully labeled manifest")
    state, _ = load_train_state(checkpoint_path)
    encoder = state.target
    encoder.eval()
    input_size = state.vit_config.max_grid * state.vit_config.patch_size
    patch = state.vit_config.patch_size
    cache_dir = Path(cache_dir) if cache_dir is not None else None

    sequences: list[FeatureSequence] = []
    groups = manifest.by_video()
    entry_index = {id(e): i for i, e in enumerate(manifest.entries)}
    for video_id in manifest.video_ids():
        entries = groups[video_id]
        labels = np.array([e.label for e in entries], dtype=np.int64)
        cache_path = cache_dir / f"{video_id}.bin" if cache_dir is not None else None
        if cache_path is not None and cache_path.exists():
            sequences.append(read_feature_cache(cache_path, labels))
            continue
        rows = []
        indices = [entry_index[id(e)] for e in entries]
        for lo in range(0, len(indices), batch_size):
            batch = load_images(manifest, indices[lo:lo + batch_size])
            seqs = [
                patchify(preprocess_frame(img, input_size), patch)
                for img in batch.data
            ]
            with torch.no_grad():
                rows.append(encoder.encode_sequences(seqs).cpu().numpy())
        seq = FeatureSequence(video_id, np.concatenate(rows, axis=0), labels)
        if cache_path is not None:
            write_feature_cache(cache_path, seq)
        sequences.append(seq)
    return sequences
