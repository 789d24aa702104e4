import hashlib
from pathlib import Path

import numpy as np
import pytest

from msnlearn.dataio import (
    DatasetManifest,
    ImageBatch,
    ManifestEntry,
    SynthSpec,
    generate_synthetic,
    load_all_images,
    load_images,
    load_manifest,
    render_frame,
    save_manifest,
    video_phase_labels,
)
from msnlearn.exceptions import ConfigError, ImageDecodeError, ManifestError
from msnlearn.rng import named_stream


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestGenerateSynthetic:
    def test_same_spec_is_byte_identical(self, tmp_path):
        spec = SynthSpec(n_videos=2, frames_per_video=8, seed=1)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_entry_and_label_counts(self, tmp_path):
        spec = SynthSpec(n_videos=4, frames_per_video=20, n_phases=7, seed=2)
        manifest = generate_synthetic(spec, tmp_path)
        assert len(manifest.entries) == 80
        labels = {e.label for e in manifest.entries}
        assert labels <= set(range(7))

    def test_zero_noise_same_phase_frames_nearly_identical(self, tmp_path):
        # Render-and-compare oracle: at noise 0 a frame depends only on its
        # phase, so any two same-phase frames must agree pixelwise.
        spec = SynthSpec(n_videos=3, frames_per_video=9, n_phases=3,
                         noise_level=0.0, seed=5)
        manifest = generate_synthetic(spec, tmp_path)
        by_label: dict[int, list[int]] = {}
        for i, e in enumerate(manifest.entries):
            by_label.setdefault(e.label, []).append(i)
        for label, idxs in by_label.items():
            batch = load_images(manifest, idxs)
            spread = batch.data.max(axis=0) - batch.data.min(axis=0)
            assert spread.max() <= 1.0 / 255.0 + 1e-6

    def test_phases_are_contiguous_and_increasing(self):
        spec = SynthSpec(n_videos=5, frames_per_video=23, n_phases=7, seed=9)
        for v in range(spec.n_videos):
            labels = video_phase_labels(spec, v)
            assert labels.shape == (23,)
            changes = np.flatnonzero(np.diff(labels) != 0)
            assert np.all(np.diff(labels)[changes] > 0)
            assert sorted(set(labels)) == list(range(7))

    def test_iid_label_mode(self):
        spec = SynthSpec(n_videos=2, frames_per_video=50, n_phases=2,
                         label_mode="iid", seed=4)
        labels = video_phase_labels(spec, 0)
        assert set(labels) <= {0, 1}
        # i.i.d. labels are not a single contiguous run per class
        assert np.count_nonzero(np.diff(labels)) > 2

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            SynthSpec(n_videos=0, frames_per_video=5)
        with pytest.raises(ConfigError):
            SynthSpec(n_videos=1, frames_per_video=3, n_phases=7)
        with pytest.raises(ConfigError):
            SynthSpec(n_videos=1, frames_per_video=9, noise_level=1.5)
        with pytest.raises(ConfigError):
            SynthSpec(n_videos=1, frames_per_video=9, label_mode="bogus")

    def test_render_frame_range_and_determinism(self):
        a = render_frame(3, 7, 64, 0.4, named_stream(0, "f"))
        b = render_frame(3, 7, 64, 0.4, named_stream(0, "f"))
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestManifest:
    def test_round_trip(self, tmp_path):
        spec = SynthSpec(n_videos=3, frames_per_video=7, seed=3)
        manifest = generate_synthetic(spec, tmp_path)
        loaded = load_manifest(tmp_path)
        assert loaded == manifest

    def test_save_load_without_meta(self, tmp_path):
        entries = [ManifestEntry("v0", 0, "frames/v0/0.png", 1),
                   ManifestEntry("v0", 1, "frames/v0/1.png", None)]
        manifest = DatasetManifest(entries, ["class_0", "class_1"])
        save_manifest(manifest, tmp_path)
        loaded = load_manifest(tmp_path / "manifest.csv")
        assert loaded.entries == entries
        assert loaded.class_names == ["class_0", "class_1"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "manifest.csv")

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("video_id,frame_index,image_path,label\nv0,zero,x.png,0\n")
        with pytest.raises(ManifestError, match="malformed row"):
            load_manifest(path)

    def test_out_of_range_label(self):
        entries = [ManifestEntry("v0", 0, "x.png", 2)]
        with pytest.raises(ManifestError, match="out of range"):
            DatasetManifest(entries, ["a", "b"])
        # boundary: label == |class_names|
        entries = [ManifestEntry("v0", 0, "x.png", 2)]
        with pytest.raises(ManifestError, match="out of range"):
            DatasetManifest(entries, ["a", "b"])

    def test_non_consecutive_frames(self):
        entries = [ManifestEntry("v0", 0, "a.png", 0),
                   ManifestEntry("v0", 2, "b.png", 0)]
        with pytest.raises(ManifestError, match="consecutive"):
            DatasetManifest(entries, ["a"])

    def test_duplicate_pair(self):
        entries = [ManifestEntry("v0", 0, "a.png", 0),
                   ManifestEntry("v0", 0, "b.png", 0)]
        with pytest.raises(ManifestError, match="duplicate"):
            DatasetManifest(entries, ["a"])

    def test_subset_videos_keeps_whole_videos(self, tmp_path):
        spec = SynthSpec(n_videos=4, frames_per_video=5, n_phases=3, seed=8)
        manifest = generate_synthetic(spec, tmp_path)
        sub = manifest.subset_videos(["video_001", "video_003"])
        assert sub.video_ids() == ["video_001", "video_003"]
        assert len(sub.entries) == 10


class TestLoadImages:
    def test_empty_indices_error(self, tiny_dataset):
        _, manifest = tiny_dataset
        with pytest.raises(ValueError, match="B >= 1"):
            load_images(manifest, [])

    def test_single_index_shape(self, tiny_dataset):
        spec, manifest = tiny_dataset
        batch = load_images(manifest, [0])
        assert batch.data.shape == (1, spec.image_size, spec.image_size, 3)

    def test_permuted_indices_permute_batch(self, tiny_dataset):
        _, manifest = tiny_dataset
        fwd = load_images(manifest, [0, 1, 2])
        rev = load_images(manifest, [2, 1, 0])
        assert np.array_equal(fwd.data[::-1], rev.data)
        assert fwd.ids[::-1] == rev.ids

    def test_unreadable_file_names_path(self, tmp_path):
        spec = SynthSpec(n_videos=1, frames_per_video=7, seed=0)
        manifest = generate_synthetic(spec, tmp_path)
        target = tmp_path / manifest.entries[0].image_path
        target.write_bytes(b"not a png")
        with pytest.raises(ImageDecodeError, match=str(target)):
            load_images(manifest, [0])

    def test_image_batch_validation(self):
        with pytest.raises(ValueError):
            ImageBatch(np.zeros((0, 4, 4, 3), np.float32), [])
        with pytest.raises(ValueError):
            ImageBatch(np.full((1, 4, 4, 3), 2.0, np.float32), ["a"])

    def test_load_all(self, tiny_dataset):
        _, manifest = tiny_dataset
        batch = load_all_images(manifest)
        assert batch.data.shape[0] == len(manifest.entries)
