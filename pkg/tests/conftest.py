import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared by I/O-heavy tests."""
    from msnlearn.dataio import SynthSpec, generate_synthetic

    root = tmp_path_factory.mktemp("tiny-dataset")
    spec = SynthSpec(
        n_videos=6, frames_per_video=14, n_phases=7, image_size=64,
        noise_level=0.2, seed=11,
    )
    manifest = generate_synthetic(spec, root)
    return spec, manifest


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_dataset):
    """A briefly pretrained ViT-Nano checkpoint for downstream tests."""
    from msnlearn.dataio import load_all_images
    from msnlearn.encoder import VIT_PRESETS
    from msnlearn.trainer import TrainConfig, run_pretraining

    _, manifest = tiny_dataset
    out = tmp_path_factory.mktemp("tiny-ckpt")
    images = load_all_images(manifest)
    config = TrainConfig(epochs=2, batch_size=28, warmup_epochs=0, seed=3)
    _, path = run_pretraining(
        images, VIT_PRESETS["vit-nano"], config, out, n_prototypes=64,
    )
    return path


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
