"""Toy dual-encoder backend: shapes, determinism, goldens, adapters."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from promptsep.backend import DTYPE, LowRankAdapter, ToyDualEncoder
from promptsep.config import bundle_from_dict

GOLDEN = Path(__file__).parent / "golden" / "backend_seed7.json"


def small_config(**overrides):
    raw = {"visual_dim": 64, "joint_dim": 32, "text_hidden_dim": 48}
    raw.update(overrides)
    return bundle_from_dict(raw).model


def canonical_image() -> torch.Tensor:
    """Deterministic ramp + sinusoid test image; no RNG involved."""
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    img = np.stack(
        [
            (xx + yy) / 2.0,
            0.5 + 0.5 * np.sin(2 * np.pi * xx),
            0.5 + 0.5 * np.cos(2 * np.pi * yy),
        ],
        axis=2,
    )
    return torch.from_numpy(img).to(DTYPE)


def canonical_prompt() -> torch.Tensor:
    gen = torch.Generator().manual_seed(20260816)
    return torch.randn(18, 48, generator=gen, dtype=DTYPE) * 0.1


@pytest.fixture(scope="module")
def encoder():
    return ToyDualEncoder(small_config(), seed=7)


@pytest.fixture(scope="module")
def golden():
    return json.loads(GOLDEN.read_text())


class TestGolden:
    """Committed reference vectors for the seed-7 backend."""

    def test_image_pooled(self, encoder, golden):
        feat = encoder.encode_image(canonical_image())
        expected = torch.tensor(golden["image_pooled"], dtype=DTYPE)
        assert feat.pooled.shape == (64,)
        assert torch.allclose(feat.pooled, expected, atol=1e-12, rtol=0)

    def test_image_joint(self, encoder, golden):
        feat = encoder.encode_image(canonical_image())
        expected = torch.tensor(golden["image_joint"], dtype=DTYPE)
        assert feat.joint.shape == (32,)
        assert torch.allclose(feat.joint, expected, atol=1e-12, rtol=0)

    def test_prompt_pooled(self, encoder, golden):
        emb = encoder.encode_prompt(canonical_prompt())
        expected = torch.tensor(golden["prompt_pooled"], dtype=DTYPE)
        assert emb.pooled.shape == (32,)
        assert torch.allclose(emb.pooled, expected, atol=1e-12, rtol=0)

    def test_prompt_tokens(self, encoder, golden):
        emb = encoder.encode_prompt(canonical_prompt())
        expected = torch.tensor(golden["prompt_tokens_row0"], dtype=DTYPE)
        assert emb.tokens.shape == (18, 48)
        assert torch.allclose(emb.tokens[0], expected, atol=1e-12, rtol=0)


class TestEncodeImage:
    def test_zero_image_pooled_is_patch_bias(self, encoder):
        # every patch of a zero image embeds to the bias vector, so the
        # patch mean is that same vector (up to summation rounding)
        feat = encoder.encode_image(torch.zeros(32, 32, 3, dtype=DTYPE))
        bias = encoder.base.vision_patch.bias.detach()
        assert torch.allclose(feat.pooled, bias, atol=1e-15, rtol=0)

    def test_wrong_channel_count_rejected(self, encoder):
        with pytest.raises(ValueError, match="expected image batch"):
            encoder.encode_image(torch.zeros(32, 32, 4, dtype=DTYPE))

    def test_wrong_spatial_size_rejected(self, encoder):
        with pytest.raises(ValueError, match="expected image batch"):
            encoder.encode_image(torch.zeros(16, 16, 3, dtype=DTYPE))

    def test_batch_and_single_agree(self, encoder):
        img = canonical_image()
        single = encoder.encode_image(img)
        batched = encoder.encode_image(img.unsqueeze(0))
        assert torch.equal(single.pooled, batched.pooled.squeeze(0))
        assert torch.equal(single.joint, batched.joint.squeeze(0))

    def test_grid_exposure(self, encoder):
        img = canonical_image().unsqueeze(0)
        feat = encoder.encode_image(img, with_grid=True)
        assert feat.grid is not None
        assert feat.grid.shape == (1, 4, 4, 64)
        # pooled is literally the grid mean
        assert torch.allclose(feat.grid.mean(dim=(1, 2)), feat.pooled, atol=1e-12, rtol=0)

    def test_grid_omitted_by_default(self, encoder):
        assert encoder.encode_image(canonical_image()).grid is None

    def test_joint_is_function_of_pooled(self, encoder):
        feat = encoder.encode_image(canonical_image())
        expected = encoder.base.vision_joint(feat.pooled)
        assert torch.equal(feat.joint, expected.detach())


class TestEncodePrompt:
    def test_wrong_width_rejected(self, encoder):
        with pytest.raises(ValueError, match="expected prompt batch"):
            encoder.encode_prompt(torch.zeros(5, 47, dtype=DTYPE))

    def test_empty_sequence_rejected(self, encoder):
        with pytest.raises(ValueError, match="expected prompt batch"):
            encoder.encode_prompt(torch.zeros(1, 0, 48, dtype=DTYPE))

    def test_tokenwise_independence(self, encoder):
        # the token map acts per position: changing token 3 leaves the
        # other token outputs untouched
        base = canonical_prompt()
        bumped = base.clone()
        bumped[3] += 0.5
        a = encoder.encode_prompt(base).tokens
        b = encoder.encode_prompt(bumped).tokens
        assert torch.equal(a[:3], b[:3])
        assert torch.equal(a[4:], b[4:])
        assert not torch.equal(a[3], b[3])

    def test_pooled_uses_raw_token_mean(self, encoder):
        prompt = canonical_prompt()
        emb = encoder.encode_prompt(prompt)
        expected = encoder.base.text_pool(prompt.mean(dim=0))
        assert torch.allclose(emb.pooled, expected.detach(), atol=1e-12, rtol=0)


class TestDeterminism:
    def test_same_seed_same_weights(self):
        cfg = small_config()
        a, b = ToyDualEncoder(cfg, seed=3), ToyDualEncoder(cfg, seed=3)
        for (na, pa), (nb, pb) in zip(
            sorted(a.named_parameters()), sorted(b.named_parameters())
        ):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_different_weights(self):
        cfg = small_config()
        a, b = ToyDualEncoder(cfg, seed=3), ToyDualEncoder(cfg, seed=4)
        assert not torch.equal(a.base.vision_patch.weight, b.base.vision_patch.weight)

    def test_base_parameters_frozen(self, encoder):
        assert all(not p.requires_grad for p in encoder.base.parameters())

    def test_special_tokens_shape(self, encoder):
        assert encoder.special_tokens.shape == (1, 48)
        assert not encoder.special_tokens.requires_grad


class TestAdapters:
    def test_rank_zero_is_noop(self):
        enc = ToyDualEncoder(small_config(), seed=7)
        enc.inject_adapters(rank=0)
        assert len(enc.adapters) == 0

    def test_zero_init_preserves_outputs(self):
        cfg = small_config()
        plain = ToyDualEncoder(cfg, seed=7)
        adapted = ToyDualEncoder(cfg, seed=7)
        adapted.inject_adapters(rank=4, seed=1)
        img, prompt = canonical_image(), canonical_prompt()
        assert torch.equal(plain.encode_image(img).joint, adapted.encode_image(img).joint)
        assert torch.equal(
            plain.encode_prompt(prompt).pooled, adapted.encode_prompt(prompt).pooled
        )

    def test_adapters_cover_all_maps(self):
        enc = ToyDualEncoder(small_config(), seed=7)
        enc.inject_adapters(rank=2, seed=1)
        assert set(enc.adapters.keys()) == {
            "vision_patch",
            "vision_joint",
            "text_token",
            "text_pool",
        }

    def test_adapter_params_trainable(self):
        enc = ToyDualEncoder(small_config(), seed=7)
        enc.inject_adapters(rank=2, seed=1)
        assert all(p.requires_grad for p in enc.adapters.parameters())

    def test_nonzero_up_changes_outputs(self):
        enc = ToyDualEncoder(small_config(), seed=7)
        enc.inject_adapters(rank=2, seed=1)
        before = enc.encode_image(canonical_image()).joint.clone()
        with torch.no_grad():
            enc.adapters["vision_joint"].up += 0.1
        after = enc.encode_image(canonical_image()).joint
        assert not torch.equal(before, after)

    def test_rank_exceeding_dims_rejected(self):
        with pytest.raises(ValueError, match="rank"):
            LowRankAdapter(8, 8, 9, seed=0)

    def test_negative_rank_rejected(self):
        enc = ToyDualEncoder(small_config(), seed=7)
        with pytest.raises(ValueError, match="rank"):
            enc.inject_adapters(rank=-1)

    def test_custom_factory(self):
        class ZeroDelta(nn.Module):
            def __init__(self, in_dim, out_dim, rank, seed):
                super().__init__()
                self.scale = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
                self.in_dim = in_dim

            def forward(self, x):
                return torch.zeros(x.shape[:-1] + self.scale.shape, dtype=x.dtype) + self.scale

        enc = ToyDualEncoder(small_config(), seed=7)
        enc.inject_adapters(rank=2, seed=1, factory=ZeroDelta)
        assert all(isinstance(m, ZeroDelta) for m in enc.adapters.values())
        ref = ToyDualEncoder(small_config(), seed=7)
        img = canonical_image()
        assert torch.equal(enc.encode_image(img).joint, ref.encode_image(img).joint)

    def test_image_size_grid_mismatch_rejected(self):
        with pytest.raises(ValueError, match="not divisible"):
            ToyDualEncoder(small_config(), seed=7, image_size=30, grid=4)
