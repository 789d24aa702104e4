import numpy as np
import pytest
import torch

from msnlearn.downstream.features import (
    FeatureSequence,
    extract_features,
    preprocess_frame,
    read_feature_cache,
    write_feature_cache,
)
from msnlearn.downstream.lowshot import (
    curve_from_features,
    lowshot_split,
    sample_video_ids,
    write_lowshot_csv,
)
from msnlearn.downstream.probe import (
    LinearProbeClassifier,
    ProbeConfig,
    finetune,
    linear_probe,
    split_videos,
)
from msnlearn.downstream.temporal import (
    MSTCNConfig,
    MultiStageTCN,
    TemporalConvClassifier,
    mstcn_forward,
    stage1_receptive_field,
    temporal_train,
)
from msnlearn.exceptions import DegenerateSplitError, ManifestError
from msnlearn.rng import named_stream

FAST_PROBE = ProbeConfig(epochs=8, batch_size=64)


def blob_features(n_videos=10, frames=20, d=8, n_classes=2, margin=5.0, seed=0):
    """Per-video features drawn from Gaussian blobs separated by ``margin``
    standard deviations."""
    rng = named_stream(seed, "blobs")
    means = rng.normal(0.0, 1.0, size=(n_classes, d))
    means = means / np.linalg.norm(means, axis=1, keepdims=True)
    means = means * np.arange(n_classes)[:, None] * margin
    features = []
    for v in range(n_videos):
        labels = rng.integers(0, n_classes, size=frames)
        emb = means[labels] + rng.normal(0.0, 1.0, size=(frames, d))
        features.append(FeatureSequence(
            f"video_{v:03d}", emb.astype(np.float32), labels.astype(np.int64)
        ))
    return features, means


class TestSplitVideos:
    def test_sixty_twenty_twenty(self):
        ids = [f"v{i}" for i in range(40)]
        train, val, test = split_videos(ids, seed=0)
        assert (len(train), len(val), len(test)) == (24, 8, 8)
        assert sorted(train + val + test) == sorted(ids)

    def test_deterministic(self):
        ids = [f"v{i}" for i in range(10)]
        assert split_videos(ids, 1) == split_videos(ids, 1)
        assert split_videos(ids, 1) != split_videos(ids, 2)

    def test_too_few_videos(self):
        with pytest.raises(DegenerateSplitError):
            split_videos(["a", "b"], 0)


class TestExtractFeatures:
    def test_counts_and_order(self, tiny_checkpoint, tiny_dataset):
        _, manifest = tiny_dataset
        feats = extract_features(tiny_checkpoint, manifest)
        assert len(feats) == 6
        assert all(f.embeddings.shape == (14, 128) for f in feats)
        assert [f.video_id for f in feats] == manifest.video_ids()

    def test_cache_round_trip_and_determinism(self, tiny_checkpoint, tiny_dataset, tmp_path):
        _, manifest = tiny_dataset
        fresh = extract_features(tiny_checkpoint, manifest, cache_dir=tmp_path / "c1")
        cached = extract_features(tiny_checkpoint, manifest, cache_dir=tmp_path / "c1")
        again = extract_features(tiny_checkpoint, manifest, cache_dir=tmp_path / "c2")
        for a, b, c in zip(fresh, cached, again):
            assert np.array_equal(a.embeddings, b.embeddings)
            assert np.abs(a.embeddings - c.embeddings).max() < 1e-6
        bytes1 = (tmp_path / "c1" / "video_000.bin").read_bytes()
        bytes2 = (tmp_path / "c2" / "video_000.bin").read_bytes()
        assert bytes1 == bytes2

    def test_cache_file_round_trip(self, tmp_path):
        emb = named_stream(0, "emb").normal(size=(7, 5)).astype(np.float32)
        labels = np.arange(7, dtype=np.int64) % 3
        seq = FeatureSequence("vid_x", emb, labels)
        write_feature_cache(tmp_path / "vid_x.bin", seq)
        loaded = read_feature_cache(tmp_path / "vid_x.bin", labels)
        assert loaded.video_id == "vid_x"
        assert np.array_equal(loaded.embeddings, emb)

    def test_unlabeled_manifest_rejected(self, tiny_checkpoint, tiny_dataset):
        _, manifest = tiny_dataset
        import dataclasses

        entries = [dataclasses.replace(e, label=None) for e in manifest.entries]
        unlabeled = dataclasses.replace(manifest, entries=entries)
        with pytest.raises(ManifestError, match="labeled"):
            extract_features(tiny_checkpoint, unlabeled)

    def test_preprocess_identity_and_crop(self):
        img = named_stream(1, "img").uniform(0, 1, (64, 64, 3)).astype(np.float32)
        assert np.array_equal(preprocess_frame(img, 64), img)
        rect = named_stream(2, "img").uniform(0, 1, (48, 64, 3)).astype(np.float32)
        out = preprocess_frame(rect, 32)
        assert out.shape == (32, 32, 3)


class TestLinearProbe:
    def test_separable_blobs_reach_perfect_f1(self):
        features, means = blob_features(margin=5.0, seed=3)
        # hand-check classifier: nearest blob mean classifies the test split
        train_ids, _, test_ids = split_videos([f.video_id for f in features], 5)
        by_id = {f.video_id: f for f in features}
        for vid in test_ids:
            f = by_id[vid]
            dists = ((f.embeddings[:, None, :] - means[None]) ** 2).sum(-1)
            assert np.array_equal(dists.argmin(1), f.labels)
        result = linear_probe(features, FAST_PROBE, seed=5)
        assert result.report.macro_f1 == 1.0

    def test_shuffled_labels_score_chance(self):
        rng = named_stream(4, "chance")
        features = []
        for v in range(10):
            emb = rng.normal(size=(50, 8)).astype(np.float32)
            labels = rng.permutation(np.arange(50) % 3).astype(np.int64)
            features.append(FeatureSequence(f"v{v:02d}", emb, labels))
        result = linear_probe(features, FAST_PROBE, seed=6)
        assert abs(result.report.macro_f1 - 1 / 3) <= 0.1

    def test_single_class_split_rejected(self):
        rng = named_stream(5, "oneclass")
        features = [
            FeatureSequence(f"v{v}", rng.normal(size=(5, 4)).astype(np.float32),
                            np.zeros(5, dtype=np.int64))
            for v in range(5)
        ]
        with pytest.raises(DegenerateSplitError):
            linear_probe(features, FAST_PROBE, seed=7)

    def test_pathological_zero_dim_input(self):
        clf = LinearProbeClassifier()
        with pytest.raises(ValueError):
            clf.fit(np.zeros((4, 0), np.float32), np.array([0, 1, 0, 1]))

    def test_deterministic_given_seed(self):
        features, _ = blob_features(margin=1.0, seed=8)
        r1 = linear_probe(features, FAST_PROBE, seed=9)
        r2 = linear_probe(features, FAST_PROBE, seed=9)
        assert r1.report.macro_f1 == r2.report.macro_f1
        assert np.array_equal(r1.weights[0], r2.weights[0])

    def test_report_includes_video_f1(self):
        features, _ = blob_features(margin=5.0, seed=10)
        result = linear_probe(features, FAST_PROBE, seed=11)
        assert result.report.video_f1 is not None
        assert 0.0 <= result.report.video_f1 <= 1.0


class TestFinetune:
    def test_scale_zero_matches_probe(self, tiny_checkpoint, tiny_dataset):
        _, manifest = tiny_dataset
        config = ProbeConfig(epochs=5, batch_size=32)
        features = extract_features(tiny_checkpoint, manifest)
        probe_result = linear_probe(features, config, seed=12,
                                    n_classes=manifest.n_classes)
        ft_report = finetune(tiny_checkpoint, manifest, config, seed=12,
                             encoder_lr_scale=0.0)
        assert abs(ft_report.macro_f1 - probe_result.report.macro_f1) <= 0.01

    def test_deterministic(self, tiny_checkpoint, tiny_dataset):
        _, manifest = tiny_dataset
        config = ProbeConfig(epochs=2, batch_size=32)
        r1 = finetune(tiny_checkpoint, manifest, config, seed=13)
        r2 = finetune(tiny_checkpoint, manifest, config, seed=13)
        assert r1.macro_f1 == r2.macro_f1


class TestMSTCN:
    def test_output_shape(self):
        cfg = MSTCNConfig(stages=3, layers_per_stage=4, hidden_channels=16)
        model = MultiStageTCN(8, cfg, 5)
        out = mstcn_forward(model, named_stream(6, "x").normal(size=(37, 8)))
        assert out.shape == (3, 37, 5)

    def test_single_frame_input(self):
        cfg = MSTCNConfig(stages=2, layers_per_stage=6, hidden_channels=8)
        model = MultiStageTCN(4, cfg, 3)
        out = mstcn_forward(model, named_stream(7, "x").normal(size=(1, 4)))
        assert out.shape == (2, 1, 3)
        assert np.isfinite(out).all()

    def test_receptive_field_by_perturbation(self):
        # Linearized probe: positive weights and biases keep every ReLU
        # active, so stage-1 output differences span exactly the receptive
        # field around the perturbed frame.
        cfg = MSTCNConfig(stages=1, layers_per_stage=3, hidden_channels=4,
                          kernel_size=3)
        model = MultiStageTCN(2, cfg, 2)
        with torch.no_grad():
            for p in model.parameters():
                if p.ndim > 1:
                    p.fill_(0.01)
                else:
                    p.fill_(1.0)
        t, mid = 64, 32
        base = mstcn_forward(model, np.zeros((t, 2), np.float32))
        bumped_in = np.zeros((t, 2), np.float32)
        bumped_in[mid] = 1.0
        bumped = mstcn_forward(model, bumped_in)
        changed = np.flatnonzero(np.abs(bumped[0] - base[0]).max(axis=1) > 1e-9)
        span = changed.max() - changed.min() + 1
        expected = stage1_receptive_field(cfg)  # 1 + 2*(2^3 - 1) = 15
        assert expected == 15
        assert span == expected

    def test_temporal_train_runs_and_reports(self, tiny_checkpoint, tiny_dataset):
        _, manifest = tiny_dataset
        features = extract_features(tiny_checkpoint, manifest)
        cfg = MSTCNConfig(stages=2, layers_per_stage=4, hidden_channels=16)
        report = temporal_train(features, cfg, ProbeConfig(epochs=3), seed=14,
                                n_classes=manifest.n_classes)
        assert 0.0 <= report.macro_f1 <= 1.0
        assert report.video_f1 is not None

    def test_single_training_video(self):
        features, _ = blob_features(n_videos=3, frames=12, seed=15)
        cfg = MSTCNConfig(stages=1, layers_per_stage=3, hidden_channels=8)
        report = temporal_train(features, cfg, ProbeConfig(epochs=2), seed=16)
        assert np.isfinite(report.macro_f1)

    def test_deterministic_given_seed(self):
        features, _ = blob_features(n_videos=6, frames=10, seed=17)
        cfg = MSTCNConfig(stages=1, layers_per_stage=2, hidden_channels=8)
        r1 = temporal_train(features, cfg, ProbeConfig(epochs=2), seed=18)
        r2 = temporal_train(features, cfg, ProbeConfig(epochs=2), seed=18)
        assert r1.macro_f1 == r2.macro_f1

    def test_classifier_predict_shapes(self):
        clf = TemporalConvClassifier(stages=1, layers_per_stage=2,
                                     hidden_channels=8, epochs=2, seed=19)
        features, _ = blob_features(n_videos=4, frames=9, seed=20)
        X = [f.embeddings for f in features]
        y = [f.labels for f in features]
        clf.fit(X, y)
        preds = clf.predict(X)
        assert [len(p) for p in preds] == [9, 9, 9, 9]


class TestLowshot:
    def test_fraction_rounding(self):
        ids = [f"v{i}" for i in range(50)]
        assert len(sample_video_ids(ids, 0.12, 0)) == 6
        assert len(sample_video_ids(ids, 1.0, 0)) == 50

    def test_identity_at_full_fraction(self, tiny_dataset):
        _, manifest = tiny_dataset
        sub = lowshot_split(manifest, 1.0, 0)
        assert sub.entries == manifest.entries

    def test_never_splits_videos(self, tiny_dataset):
        _, manifest = tiny_dataset
        sub = lowshot_split(manifest, 0.5, 99)
        counts = {}
        for e in sub.entries:
            counts[e.video_id] = counts.get(e.video_id, 0) + 1
        for vid, count in counts.items():
            full = sum(1 for e in manifest.entries if e.video_id == vid)
            assert count == full

    def test_too_small_fraction(self, tiny_dataset):
        _, manifest = tiny_dataset
        with pytest.raises(DegenerateSplitError, match="zero"):
            lowshot_split(manifest, 0.01, 0)

    def test_different_seeds_differ(self):
        ids = [f"v{i}" for i in range(50)]
        assert sample_video_ids(ids, 0.12, 1) != sample_video_ids(ids, 0.12, 2)

    def test_curve_rows_and_full_fraction_std(self, tmp_path):
        features, _ = blob_features(n_videos=10, frames=15, margin=4.0, seed=21)
        rows = curve_from_features(
            features, [0.5, 1.0], repetitions=3,
            probe_config=ProbeConfig(epochs=4), seed=22,
        )
        assert [r.fraction for r in rows] == [0.5, 1.0]
        assert all(len(r.f1_values) == 3 for r in rows)
        assert rows[1].std_f1 == 0.0  # identical split at fraction 1.0
        path = write_lowshot_csv(rows, tmp_path / "lowshot.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "fraction,mean_macro_f1,std_macro_f1,runs"
        assert len(lines) == 3
