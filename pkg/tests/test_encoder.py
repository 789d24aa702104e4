import numpy as np
import pytest
import torch

from msnlearn.checkpoint import read_tensor_file, write_tensor_file
from msnlearn.encoder import (
    VIT_PRESETS,
    ViTConfig,
    VisionTransformer,
    encode,
    encode_batch,
    gradients,
    init_encoder,
    parameter_count,
)
from msnlearn.exceptions import ConfigError, NumericsError
from msnlearn.rng import named_stream
from msnlearn.views import TokenSequence, patchify, random_mask
from tests_helpers import finite_difference_grads, max_relative_error

TOY = ViTConfig(layers=1, hidden_dim=8, mlp_dim=16, heads=2, patch_size=4, max_grid=2)
NANO = VIT_PRESETS["vit-nano"]


def toy_sequence(seed=0, size=8, patch=4):
    img = named_stream(seed, "img").uniform(0.0, 1.0, (size, size, 3)).astype(np.float32)
    return patchify(img, patch)


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_encoder(TOY, named_stream(1, "init"))
        b = init_encoder(TOY, named_stream(1, "init"))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_layernorm_scales_are_one(self):
        model = init_encoder(NANO, named_stream(2, "init"))
        for name, p in model.named_parameters():
            if "norm" in name and name.endswith("weight"):
                assert torch.equal(p, torch.ones_like(p))
            if name.endswith("bias"):
                assert torch.equal(p, torch.zeros_like(p))

    def test_patch_projection_std(self):
        cfg = ViTConfig(layers=1, hidden_dim=256, mlp_dim=512, heads=4,
                        patch_size=8, max_grid=8)
        model = init_encoder(cfg, named_stream(3, "init"))
        std = float(model.patch_proj.weight.detach().std())
        assert 0.018 <= std <= 0.022

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ViTConfig(layers=1, hidden_dim=10, mlp_dim=16, heads=4,
                      patch_size=4, max_grid=2)
        with pytest.raises(ConfigError):
            ViTConfig(layers=0, hidden_dim=8, mlp_dim=16, heads=2,
                      patch_size=4, max_grid=2)


class TestEncode:
    def test_deterministic(self):
        model = init_encoder(TOY, named_stream(4, "init"))
        seq = toy_sequence(1)
        assert np.array_equal(encode(model, seq), encode(model, seq))

    def test_permuting_tokens_keeps_embedding(self):
        model = init_encoder(TOY, named_stream(5, "init"))
        seq = toy_sequence(2)
        perm = np.array([3, 0, 2, 1])
        shuffled = TokenSequence.__new__(TokenSequence)
        shuffled.tokens = seq.tokens[perm]
        shuffled.positions = seq.positions[perm]
        shuffled.kept = seq.kept
        shuffled.grid_size = seq.grid_size
        shuffled.patch_size = seq.patch_size
        with torch.no_grad():
            base = model.encode_sequences([seq]).numpy()
            alt = model(
                torch.from_numpy(shuffled.tokens[None]),
                torch.from_numpy(shuffled.positions[None]),
                shuffled.grid_size,
            ).numpy()
        assert np.abs(base - alt).max() < 1e-6

    def test_masked_differs_from_full(self):
        model = init_encoder(NANO, named_stream(6, "init"))
        seq = toy_sequence(3, size=64, patch=8)
        masked = random_mask(seq, 0.5, named_stream(0, "m"))
        assert not np.allclose(encode(model, seq), encode(model, masked))

    def test_mask_and_subset_commute(self):
        model = init_encoder(NANO, named_stream(7, "init"))
        seq = toy_sequence(4, size=64, patch=8)
        masked = random_mask(seq, 0.5, named_stream(1, "m"))
        manual = TokenSequence(
            tokens=seq.tokens[masked.positions],
            positions=masked.positions.copy(),
            kept=masked.kept.copy(),
            grid_size=seq.grid_size,
            patch_size=seq.patch_size,
        )
        assert np.array_equal(encode(model, masked), encode(model, manual))

    def test_batch_matches_single_encodes(self):
        model = init_encoder(NANO, named_stream(8, "init"))
        seqs = [toy_sequence(i, size=64, patch=8) for i in range(5)]
        batched = encode_batch(model, seqs)
        for i, seq in enumerate(seqs):
            assert np.abs(batched[i] - encode(model, seq)).max() < 1e-6

    def test_batch_of_one_equals_single(self):
        model = init_encoder(TOY, named_stream(9, "init"))
        seq = toy_sequence(5)
        assert np.array_equal(encode_batch(model, [seq])[0], encode(model, seq))

    def test_heterogeneous_lengths_error(self):
        model = init_encoder(NANO, named_stream(10, "init"))
        full = toy_sequence(6, size=64, patch=8)
        short = random_mask(full, 0.5, named_stream(2, "m"))
        with pytest.raises(ValueError, match="share token count"):
            encode_batch(model, [full, short])

    def test_empty_batch_error(self):
        model = init_encoder(TOY, named_stream(11, "init"))
        with pytest.raises(ValueError, match="empty"):
            encode_batch(model, [])

    def test_oversized_grid_error(self):
        model = init_encoder(TOY, named_stream(12, "init"))
        seq = patchify(np.zeros((16, 16, 3), np.float32), 4)  # grid 4 > max_grid 2
        with pytest.raises(ValueError, match="max_grid"):
            encode(model, seq)

    def test_no_nan_on_random_inputs(self):
        model = init_encoder(TOY, named_stream(13, "init"))
        rng = named_stream(14, "noise")
        for lo in range(0, 1000, 200):
            seqs = []
            for i in range(200):
                img = rng.uniform(0.0, 1.0, (8, 8, 3)).astype(np.float32)
                seqs.append(patchify(img, 4))
            out = encode_batch(model, seqs)
            assert np.isfinite(out).all()


class TestParameterCount:
    def test_vit_s_within_10pct_of_23m(self):
        assert abs(parameter_count(VIT_PRESETS["vit-s"]) - 23_000_000) <= 2_300_000

    def test_vit_b_within_10pct_of_86m(self):
        assert abs(parameter_count(VIT_PRESETS["vit-b"]) - 86_000_000) <= 8_600_000

    def test_toy_hand_count(self):
        # patch 48*8+8=392; cls 8; pos 5*8=40; block: qkv 216 + out 72
        # + norms 32 + mlp 280 = 600; final norm 16 -> 1056
        assert parameter_count(TOY) == 1056

    def test_matches_actual_module(self):
        for cfg in (TOY, NANO, VIT_PRESETS["vit-s"]):
            model = VisionTransformer(cfg)
            actual = sum(p.numel() for p in model.parameters())
            assert parameter_count(cfg) == actual


class TestGradients:
    def test_quadratic_loss_matches_finite_differences(self):
        model = init_encoder(TOY, named_stream(15, "init"), dtype=torch.float64)
        seq = toy_sequence(7)

        def loss_fn():
            z = model.encode_sequences([seq])
            return 0.5 * (z * z).sum()

        analytic = gradients(model, loss_fn)
        params = [p for _, p in model.named_parameters()]
        numeric = finite_difference_grads(params, loss_fn)
        err = max_relative_error(list(analytic.values()), numeric)
        assert err < 1e-4

    def test_constant_loss_gives_zero_gradients(self):
        model = init_encoder(TOY, named_stream(16, "init"))

        def loss_fn():
            return torch.zeros(())

        grads = gradients(model, loss_fn)
        assert all(torch.equal(g, torch.zeros_like(g)) for g in grads.values())

    def test_nonfinite_loss_raises_with_module_name(self):
        model = init_encoder(TOY, named_stream(17, "init"))
        with torch.no_grad():
            model.patch_proj.weight.fill_(float("inf"))
        seq = toy_sequence(8)

        def loss_fn():
            return model.encode_sequences([seq]).sum()

        with pytest.raises(NumericsError, match="patch_proj"):
            gradients(model, loss_fn)


class TestCheckpointContainer:
    def test_bit_exact_round_trip(self, tmp_path):
        model = init_encoder(NANO, named_stream(18, "init"))
        tensors = {n: p.detach().numpy() for n, p in model.named_parameters()}
        header = {"kind": "encoder", "vit": NANO.__dict__}
        path = write_tensor_file(tmp_path / "enc.msn", header, tensors)
        header2, tensors2 = read_tensor_file(path)
        assert header2["kind"] == "encoder"
        for name, arr in tensors.items():
            assert arr.dtype == np.float32
            assert np.array_equal(tensors2[name], arr)

    def test_identical_content_identical_bytes(self, tmp_path):
        tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
        p1 = write_tensor_file(tmp_path / "1.msn", {"x": 1}, tensors)
        p2 = write_tensor_file(tmp_path / "2.msn", {"x": 1}, tensors)
        assert p1.read_bytes() == p2.read_bytes()
