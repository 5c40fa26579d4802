"""Test multi-head attention and the local attention kernels"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gpvit_desk.attention import (
    Attention,
    AttentionConfig,
    EncoderLayer,
    WindowSpec,
    global_attention,
    multi_head_attention,
    region_layout,
    shifted_window_attention,
    window_attention,
)
from gpvit_desk.errors import ConfigError, UsageError
from gpvit_desk.invariants import declared_support
from gpvit_desk.tensor import Tensor, make_rng, precision
from tests.fixtures import sample_attention, sample_token_map


def oracle_attention(layer: Attention, tokens: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Brute-force masked attention over the unpadded tokens, then projection"""
    channels = layer.cfg.model_dim
    heads = layer.cfg.num_heads
    dim = channels // heads
    qkv = tokens @ layer.qkv.weight.data + layer.qkv.bias.data
    q, k, v = qkv[..., :channels], qkv[..., channels:2 * channels], qkv[..., 2 * channels:]
    out = np.zeros_like(q)
    for h in range(heads):
        part = slice(h * dim, (h + 1) * dim)
        logits = q[..., part] @ np.swapaxes(k[..., part], -1, -2) / math.sqrt(dim)
        logits = np.where(support[h], logits, -np.inf)
        weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
        weights /= weights.sum(axis=-1, keepdims=True)
        out[..., part] = weights @ v[..., part]
    return out @ layer.proj.weight.data + layer.proj.bias.data


class TestAttentionConfig:
    """Test head layout validation"""

    def test_head_dim(self):
        """Test d = C / h"""
        assert AttentionConfig(num_heads=4, model_dim=24).head_dim == 6

    def test_indivisible_width(self):
        """Test C mod h != 0 is rejected"""
        with pytest.raises(ValueError, match="not divisible"):
            AttentionConfig(num_heads=5, model_dim=24)


class TestMultiHeadAttention:
    """Test the core attention operation"""

    def test_single_key_returns_value(self):
        """Test softmax over one key copies its value row to every query"""
        cfg = AttentionConfig(num_heads=2, model_dim=4, use_output_projection=False)
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor([[1.0, 2.0, 3.0, 4.0]])
        out = multi_head_attention(q, k, v, cfg)
        assert_allclose(out.data, np.tile(v.data, (3, 1)), rtol=1e-6)

    def test_hand_two_by_two(self):
        """Test one head, C = 1, against a closed-form 2-way softmax"""
        cfg = AttentionConfig(num_heads=1, model_dim=1, use_output_projection=False)
        q = Tensor([[1.0], [2.0]])
        k = Tensor([[0.0], [1.0]])
        v = Tensor([[10.0], [20.0]])
        out = multi_head_attention(q, k, v, cfg).data
        for row, qi in enumerate((1.0, 2.0)):
            w1 = math.exp(qi) / (1.0 + math.exp(qi))
            assert abs(out[row, 0] - (10.0 * (1 - w1) + 20.0 * w1)) < 1e-4

    def test_batched_weights_shape(self):
        """Test weights come back as (B, h, Nq, Nk)"""
        cfg = AttentionConfig(num_heads=2, model_dim=4, use_output_projection=False)
        q = Tensor(np.ones((3, 5, 4)))
        kv = Tensor(np.ones((3, 7, 4)))
        out, weights = multi_head_attention(q, kv, kv, cfg, return_weights=True)
        assert out.shape == (3, 5, 4)
        assert weights.shape == (3, 2, 5, 7)

    def test_fully_masked_row(self):
        """Test a query row with no allowed key is a config error"""
        cfg = AttentionConfig(num_heads=1, model_dim=2, use_output_projection=False)
        x = Tensor(np.ones((2, 2)))
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ConfigError, match="no allowed key"):
            multi_head_attention(x, x, x, cfg, mask=mask)

    def test_projection_required(self):
        """Test use_output_projection without a projection is a usage error"""
        cfg = AttentionConfig(num_heads=1, model_dim=2)
        x = Tensor(np.ones((2, 2)))
        with pytest.raises(UsageError, match="projection"):
            multi_head_attention(x, x, x, cfg)

    def test_key_value_permutation_invariance(self):
        """Test permuting keys and values jointly leaves the output unchanged"""
        cfg = AttentionConfig(num_heads=2, model_dim=6, use_output_projection=False)
        rng = np.random.default_rng(4)
        q, k, v = (Tensor(rng.normal(size=(5, 6))) for _ in range(3))
        perm = rng.permutation(5)
        base = multi_head_attention(q, k, v, cfg).data
        moved = multi_head_attention(q, Tensor(k.data[perm]), Tensor(v.data[perm]), cfg).data
        assert_allclose(base, moved, atol=1e-5)


class TestRegionLayout:
    """Test padding and shift bookkeeping"""

    def test_padding_marks_missing_tokens(self):
        """Test a 5x5 grid in 2x2 windows pads to 6x6 with -1 slots"""
        layout = region_layout((5, 5), 2, 2)
        assert layout.padded == (6, 6)
        assert layout.index.shape == (9, 4)
        assert (layout.index == -1).sum() == 36 - 25
        assert sorted(layout.index[layout.index >= 0].tolist()) == list(range(25))

    def test_padded_slots_attend_to_themselves(self):
        """Test every slot, padded or not, has at least one allowed key"""
        layout = region_layout((5, 5), 2, 2, shift=1)
        assert layout.allowed.any(axis=-1).all()


class TestWindowAttention:
    """Test non-overlapping window attention"""

    def test_window_covering_grid_equals_global(self):
        """Test w = grid side reproduces full self-attention"""
        x = sample_token_map(grid=(4, 4), channels=8)
        layer = sample_attention("window", size=4)
        full = global_attention(x, layer.cfg, layer.qkv, layer.proj).tokens.data
        assert_allclose(layer(x).tokens.data, full, atol=1e-6)

    def test_unit_window_is_value_projection(self):
        """Test w = 1 makes each token attend only to itself"""
        x = sample_token_map(grid=(3, 3), channels=8)
        layer = sample_attention("window", size=1)
        qkv = x.tokens.data @ layer.qkv.weight.data + layer.qkv.bias.data
        expected = qkv[..., 16:] @ layer.proj.weight.data + layer.proj.bias.data
        assert_allclose(layer(x).tokens.data, expected, atol=1e-5)

    def test_matches_oracle_with_padding(self):
        """Test a padded 5x5 grid in 2x2 windows against brute-force masked attention"""
        with precision("f64"):
            x = sample_token_map(grid=(5, 5), channels=8, batch=2)
            layer = sample_attention("window", size=2)
            support = declared_support("window", (5, 5), 2, 2)
            expected = oracle_attention(layer, x.tokens.data, support)
            assert_allclose(layer(x).tokens.data, expected, atol=1e-10)

    def test_nonpositive_window(self):
        """Test w <= 0 is a config error"""
        with pytest.raises(ConfigError, match="positive"):
            Attention(8, 2, "window", 0, make_rng(0))

    def test_shape_preserved(self):
        """Test N x C in, N x C out"""
        x = sample_token_map(grid=(7, 3), channels=8)
        assert sample_attention("window", size=2)(x).tokens.shape == (1, 21, 8)


class TestShiftedWindowAttention:
    """Test shifted windows with region masking"""

    def test_zero_shift_equals_window(self):
        """Test shift 0 is plain window attention"""
        x = sample_token_map(grid=(4, 4), channels=8)
        layer = sample_attention("window", size=2)
        spec = WindowSpec(kind="shifted-window", size=2, grid=(4, 4))
        shifted = shifted_window_attention(x, layer.cfg, spec, layer.qkv, layer.proj, shift=0)
        plain = window_attention(x, layer.cfg, spec, layer.qkv, layer.proj)
        assert_allclose(shifted.tokens.data, plain.tokens.data, atol=1e-6)

    def test_single_window_grid(self):
        """Test a w x w grid stays finite and shape preserving"""
        x = sample_token_map(grid=(4, 4), channels=8)
        out = sample_attention("shifted-window", size=4)(x)
        assert out.tokens.shape == x.tokens.shape
        assert np.isfinite(out.tokens.data).all()

    def test_declared_support_hand_case(self):
        """Test region masks on a 4x4 grid with w = 2 (shift 1)"""
        support = declared_support("shifted-window", (4, 4), 2, 1)[0]
        # corner token wraps into a window where every neighbour is from another region
        assert np.flatnonzero(support[0]).tolist() == [0]
        # an interior window is untouched by the wrap
        assert np.flatnonzero(support[5]).tolist() == [5, 6, 9, 10]

    def test_matches_oracle(self):
        """Test 4x4 grid, w = 2, against brute-force masked attention"""
        with precision("f64"):
            x = sample_token_map(grid=(4, 4), channels=8, batch=2, seed=3)
            layer = sample_attention("shifted-window", size=2)
            support = declared_support("shifted-window", (4, 4), 2, 2)
            expected = oracle_attention(layer, x.tokens.data, support)
            assert_allclose(layer(x).tokens.data, expected, atol=1e-10)

    def test_invalid_shift(self):
        """Test a shift outside [0, w) is rejected"""
        x = sample_token_map(grid=(4, 4), channels=8)
        layer = sample_attention("window", size=2)
        spec = WindowSpec(kind="shifted-window", size=2, grid=(4, 4))
        with pytest.raises(ConfigError, match="shift"):
            shifted_window_attention(x, layer.cfg, spec, layer.qkv, layer.proj, shift=2)


class TestLepeAttention:
    """Test strip-pair attention with positional encoding"""

    def _zero_lepe(self, layer: Attention) -> Attention:
        layer.lepe.kernel.data = np.zeros_like(layer.lepe.kernel.data)
        layer.lepe.bias.data = np.zeros_like(layer.lepe.bias.data)
        return layer

    def test_full_strips_reduce_to_global(self):
        """Test zero LePE and s covering the grid gives full self-attention"""
        x = sample_token_map(grid=(3, 3), channels=8)
        layer = self._zero_lepe(sample_attention("strip-pair", size=3))
        full = global_attention(x, layer.cfg, layer.qkv, layer.proj).tokens.data
        assert_allclose(layer(x).tokens.data, full, atol=1e-6)

    def test_unit_strips_match_oracle(self):
        """Test a 2x2 grid with s = 1 and two heads against per-strip attention"""
        with precision("f64"):
            x = sample_token_map(grid=(2, 2), channels=8, batch=2, seed=7)
            layer = self._zero_lepe(sample_attention("strip-pair", size=1))
            support = declared_support("strip-pair", (2, 2), 1, 2)
            expected = oracle_attention(layer, x.tokens.data, support)
            assert_allclose(layer(x).tokens.data, expected, atol=1e-10)

    def test_zero_input_gives_bias_terms(self):
        """Test zeros in with zero biases gives zeros out"""
        x = sample_token_map(grid=(4, 4), channels=8)
        x.tokens.data[:] = 0.0
        layer = self._zero_lepe(sample_attention("strip-pair", size=2))
        assert_allclose(layer(x).tokens.data, 0.0)

    def test_odd_heads(self):
        """Test an odd head count is a config error"""
        with pytest.raises(ConfigError, match="even head count"):
            Attention(9, 3, "strip-pair", 2, make_rng(0))

    def test_lepe_term_is_local(self):
        """Test the positional term changes outputs compared with zero LePE"""
        x = sample_token_map(grid=(4, 4), channels=8)
        layer = sample_attention("strip-pair", size=2)
        with_lepe = layer(x).tokens.data.copy()
        without = self._zero_lepe(layer)(x).tokens.data
        assert not np.allclose(with_lepe, without)


class TestSupport:
    """Test attention weights vanish outside each kernel's support"""

    @pytest.mark.parametrize("kind,size", [("window", 2), ("shifted-window", 2), ("strip-pair", 2)])
    def test_zero_outside_support(self, kind, size):
        """Test weights outside the declared support are exactly zero"""
        x = sample_token_map(grid=(5, 6), channels=8)
        _, weights = sample_attention(kind, size=size)(x, return_weights=True)
        support = declared_support(kind, (5, 6), size, 2)[None]
        assert weights.dense.shape == (1, 2, 30, 30)
        assert np.all(weights.dense[~support] == 0.0)
        assert_allclose(weights.dense.sum(axis=-1), 1.0, atol=1e-5)


class TestEncoderLayer:
    """Test the pre-norm encoder layer"""

    def test_shape_and_residual(self):
        """Test the layer preserves shape and is near identity at init"""
        x = sample_token_map(grid=(4, 4), channels=8)
        layer = EncoderLayer(8, 2, "strip-pair", 2, 4, make_rng(0))
        out = layer(x)
        assert out.tokens.shape == x.tokens.shape
        assert out.grid == x.grid
        assert np.abs(out.tokens.data - x.tokens.data).max() < 0.5
