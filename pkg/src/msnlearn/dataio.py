"""On-disk datasets: manifests, image loading, and a synthetic video generator.

The synthetic generator replaces real procedure video with phase-structured
procedural textures: each phase has a distinct base hue, brightness-gradient
style, and shape motif, perturbed per frame by ``noise_level`` (motif
position/scale jitter, hue jitter, a global illumination factor, and additive
pixel noise). At ``noise_level == 0`` a frame is a pure function of its phase.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigError, DatasetWriteError, ImageDecodeError, ManifestError
from .rng import named_stream
from .validation import check_image_stack

MANIFEST_NAME = "manifest.csv"
META_NAME = "meta.json"
FRAMES_DIR = "frames"
_SPLITS = ("train", "val", "test")

_MOTIFS = ("rings", "boxes", "hstripes", "vstripes", "checker", "dots", "cross")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic phase-structured video dataset.

    ``label_mode`` selects between temporally contiguous phase segments
    ("phases", the surgical-workflow analog) and per-frame i.i.d. labels
    ("iid", the binary polyp-characterization analog, typically with
    ``n_phases=2``).
    """

    n_videos: int
    frames_per_video: int
    n_phases: int = 7
    image_size: int = 64
    noise_level: float = 0.2
    seed: int = 0
    label_mode: str = "phases"

    def __post_init__(self) -> None:
        if self.n_videos < 1:
            raise ConfigError("n_videos must be >= 1")
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if self.n_phases < 1:
            raise ConfigError("n_phases must be >= 1")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError("noise_level must be in [0, 1]")
        if self.label_mode not in ("phases", "iid"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.label_mode == "phases" and self.frames_per_video < self.n_phases:
            raise ConfigError(
                "frames_per_video must be >= n_phases so every phase gets a frame"
            )


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    frame_index: int
    image_path: str
    label: int | None


@dataclass
class DatasetManifest:
    """Validated list of (video, frame, path, label) rows plus class metadata."""

    entries: list[ManifestEntry]
    class_names: list[str]
    split: str = "train"
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.split not in _SPLITS:
            raise ManifestError(f"split must be one of {_SPLITS}, got {self.split!r}")
        seen: set[tuple[str, int]] = set()
        frames: dict[str, list[int]] = {}
        for e in self.entries:
            key = (e.video_id, e.frame_index)
            if key in seen:
                raise ManifestError(f"duplicate (video_id, frame_index) pair {key}")
            seen.add(key)
            if e.frame_index < 0:
                raise ManifestError(f"negative frame_index in video {e.video_id!r}")
            frames.setdefault(e.video_id, []).append(e.frame_index)
            if e.label is not None and not 0 <= e.label < len(self.class_names):
                raise ManifestError(
                    f"label {e.label} out of range for {len(self.class_names)} "
                    f"classes (video {e.video_id!r}, frame {e.frame_index})"
                )
        for vid, idxs in frames.items():
            if sorted(idxs) != list(range(len(idxs))):
                raise ManifestError(
                    f"frame_index values of video {vid!r} are not consecutive from 0"
                )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def video_ids(self) -> list[str]:
        ordered: list[str] = []
        seen: set[str] = set()
        for e in self.entries:
            if e.video_id not in seen:
                seen.add(e.video_id)
                ordered.append(e.video_id)
        return ordered

    def by_video(self) -> dict[str, list[ManifestEntry]]:
        groups: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.video_id, []).append(e)
        for vid in groups:
            groups[vid] = sorted(groups[vid], key=lambda e: e.frame_index)
        return groups

    def subset_videos(self, video_ids: list[str], split: str | None = None) -> "DatasetManifest":
        keep = set(video_ids)
        entries = [e for e in self.entries if e.video_id in keep]
        return DatasetManifest(
            entries=entries,
            class_names=list(self.class_names),
            split=split if split is not None else self.split,
            root=self.root,
        )

    def is_fully_labeled(self) -> bool:
        return all(e.label is not None for e in self.entries)


@dataclass
class ImageBatch:
    """B x H x W x 3 float32 pixels in [0, 1] plus per-image identifiers."""

    data: np.ndarray
    ids: list[str]

    def __post_init__(self) -> None:
        self.data = check_image_stack(self.data, "ImageBatch.data").astype(np.float32)
        if len(self.ids) != self.data.shape[0]:
            raise ValueError("ImageBatch ids must align with data rows")


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, s, v = np.broadcast_arrays(np.asarray(h, dtype=np.float64), s, v)
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _motif_mask(
    motif: str,
    yy: np.ndarray,
    xx: np.ndarray,
    cy: float,
    cx: float,
    scale: float,
    freq: float,
) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    if motif == "rings":
        r = np.hypot(dy, dx)
        return (r < 0.38 * scale) & (((r * 2.0 * freq / scale) % 1.0) < 0.5)
    if motif == "boxes":
        d = np.maximum(np.abs(dy), np.abs(dx))
        return (d < 0.38 * scale) & (((d * 2.0 * freq / scale) % 1.0) < 0.5)
    if motif == "hstripes":
        return ((yy * freq / scale + cy) % 1.0) < 0.5
    if motif == "vstripes":
        return ((xx * freq / scale + cx) % 1.0) < 0.5
    if motif == "checker":
        band_y = ((yy * freq / scale + cy) % 1.0) < 0.5
        band_x = ((xx * freq / scale + cx) % 1.0) < 0.5
        return band_y ^ band_x
    if motif == "dots":
        fy = ((yy * freq / scale + cy) % 1.0) - 0.5
        fx = ((xx * freq / scale + cx) % 1.0) - 0.5
        return fy * fy + fx * fx < 0.22 * 0.22
    if motif == "cross":
        inside = (np.abs(dy) < 0.38 * scale) & (np.abs(dx) < 0.38 * scale)
        return inside & ((np.abs(dy) < 0.08 * scale) | (np.abs(dx) < 0.08 * scale))
    raise ValueError(f"unknown motif {motif!r}")


def render_frame(
    phase: int,
    n_phases: int,
    size: int,
    noise_level: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one H x W x 3 float frame of the given phase."""
    u = rng.uniform(-1.0, 1.0, size=6)
    hue = (phase + 0.5) / n_phases + 0.08 * noise_level * u[0]
    illum = 1.0 + 0.55 * noise_level * u[1]
    cy = 0.5 + 0.22 * noise_level * u[2]
    cx = 0.5 + 0.22 * noise_level * u[3]
    scale = 1.0 + 0.45 * noise_level * u[4]
    grad_shift = 0.25 * noise_level * u[5]

    coords = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    if phase % 2 == 0:
        grad = yy
    else:
        grad = 1.0 - np.clip(np.hypot(yy - 0.5, xx - 0.5) * 1.6, 0.0, 1.0)
    value = np.clip(0.40 + 0.45 * grad + grad_shift, 0.0, 1.0)

    base = _hsv_to_rgb(hue, 0.55, value)
    motif = _MOTIFS[phase % len(_MOTIFS)]
    freq = 3.0 + 2.0 * ((phase * 3) % 5)
    mask = _motif_mask(motif, yy, xx, cy, cx, scale, freq)
    fg = _hsv_to_rgb(hue + 0.5, 0.85, np.full_like(value, 0.95))
    img = np.where(mask[..., None], fg, base)

    img = img * illum
    img = img + rng.normal(0.0, 0.30 * noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _segment_lengths(rng: np.random.Generator, total: int, parts: int) -> np.ndarray:
    """Split ``total`` frames into ``parts`` contiguous segments, each >= 1.

    Fractions come from a symmetric Dirichlet(alpha=2); rounding is by
    largest remainder over the frames left after reserving one per segment.
    """
    fracs = rng.dirichlet(np.full(parts, 2.0))
    spare = total - parts
    raw = fracs * spare
    lengths = np.floor(raw).astype(np.int64)
    leftover = spare - int(lengths.sum())
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    lengths[order[:leftover]] += 1
    return lengths + 1


def video_phase_labels(spec: SynthSpec, video_index: int) -> np.ndarray:
    """Per-frame class labels for one video, deterministic in (spec, index)."""
    rng = named_stream(spec.seed, "synth", "labels", video_index)
    if spec.label_mode == "iid":
        return rng.integers(0, spec.n_phases, size=spec.frames_per_video)
    lengths = _segment_lengths(rng, spec.frames_per_video, spec.n_phases)
    return np.repeat(np.arange(spec.n_phases), lengths)


def generate_synthetic(spec: SynthSpec, out_dir: Path | str) -> DatasetManifest:
    """Write the synthetic dataset under ``out_dir`` and return its manifest.

    Layout: ``frames/<video_id>/<frame_index>.png``, ``manifest.csv``,
    ``meta.json``. Identical specs produce byte-identical trees.
    """
    out_dir = Path(out_dir)
    class_names = [f"phase_{p}" for p in range(spec.n_phases)]
    entries: list[ManifestEntry] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for v in range(spec.n_videos):
            video_id = f"video_{v:03d}"
            video_dir = out_dir / FRAMES_DIR / video_id
            video_dir.mkdir(parents=True, exist_ok=True)
            labels = video_phase_labels(spec, v)
            for t in range(spec.frames_per_video):
                frame_rng = named_stream(spec.seed, "synth", "frame", v, t)
                img = render_frame(
                    int(labels[t]), spec.n_phases, spec.image_size,
                    spec.noise_level, frame_rng,
                )
                pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
                rel = f"{FRAMES_DIR}/{video_id}/{t}.png"
                Image.fromarray(pixels, mode="RGB").save(out_dir / rel, format="PNG")
                entries.append(ManifestEntry(video_id, t, rel, int(labels[t])))
        manifest = DatasetManifest(entries, class_names, split="train", root=out_dir)
        save_manifest(manifest, out_dir)
        meta = {
            "format_version": 1,
            "synth_spec": dataclasses.asdict(spec),
            "class_names": class_names,
            "split": manifest.split,
        }
        (out_dir / META_NAME).write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        path = getattr(exc, "filename", None) or str(out_dir)
        raise DatasetWriteError(f"failed to write dataset file {path}: {exc}") from exc
    return manifest


def save_manifest(manifest: DatasetManifest, out_dir: Path | str) -> Path:
    """Write ``manifest.csv`` (one header line, then comma-separated rows)."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "frame_index", "image_path", "label"])
            for e in manifest.entries:
                writer.writerow(
                    [e.video_id, e.frame_index, e.image_path,
                     "" if e.label is None else e.label]
                )
    except OSError as exc:
        raise DatasetWriteError(f"failed to write manifest {path}: {exc}") from exc
    return path


def _read_meta(directory: Path) -> dict | None:
    meta_path = directory / META_NAME
    if not meta_path.exists():
        return None
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable metadata file {meta_path}: {exc}") from exc


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load and validate a manifest from a csv file or a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    root = path.parent

    rows: list[ManifestEntry] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty") from None
        if header != ["video_id", "frame_index", "image_path", "label"]:
            raise ManifestError(f"unexpected manifest header {header} in {path}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ManifestError(f"malformed row at {path}:{lineno}: {row}")
            video_id, frame_str, image_path, label_str = row
            try:
                frame_index = int(frame_str)
                label = None if label_str == "" else int(label_str)
            except ValueError:
                raise ManifestError(
                    f"malformed row at {path}:{lineno}: non-integer field"
                ) from None
            rows.append(ManifestEntry(video_id, frame_index, image_path, label))

    meta = _read_meta(root)
    if meta is not None:
        class_names = list(meta["class_names"])
        split = meta.get("split", "train")
    else:
        max_label = max((e.label for e in rows if e.label is not None), default=-1)
        class_names = [f"class_{c}" for c in range(max_label + 1)]
        split = "train"
    return DatasetManifest(rows, class_names, split=split, root=root)


def load_images(manifest: DatasetManifest, indices: list[int]) -> ImageBatch:
    """Decode the manifest entries at ``indices`` into a float batch."""
    if len(indices) == 0:
        raise ValueError("indices must select at least one image (B >= 1)")
    if manifest.root is None:
        raise ValueError("manifest has no root directory to resolve image paths")
    data: list[np.ndarray] = []
    ids: list[str] = []
    shape: tuple[int, ...] | None = None
    for i in indices:
        if not 0 <= i < len(manifest.entries):
            raise IndexError(f"entry index {i} out of range")
        entry = manifest.entries[i]
        full = manifest.root / entry.image_path
        try:
            with Image.open(full) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise ImageDecodeError(f"cannot decode image {full}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ImageDecodeError(
                f"image {full} has shape {arr.shape}, expected {shape}"
            )
        data.append(arr)
        ids.append(f"{entry.video_id}/{entry.frame_index}")
    return ImageBatch(np.stack(data, axis=0), ids)


def load_all_images(manifest: DatasetManifest) -> ImageBatch:
    """Decode every manifest entry, in manifest order."""
    return load_images(manifest, list(range(len(manifest.entries))))
