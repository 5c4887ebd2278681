import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyvlm import autograd as ag
from tinyvlm.autograd import Tensor, finite_diff_check, tensor
from tinyvlm.connectors import (
    ConnectorConfig,
    LinearConnector,
    PerceiverResampler,
    PixelShuffleConnector,
    build_connector,
    pixel_shuffle_inverse,
    pixel_shuffle_reindex,
)


def cfg_for(kind, vision_dim=6, text_dim=10, **kw):
    return ConnectorConfig(kind=kind, vision_dim=vision_dim, text_dim=text_dim, **kw)


class TestLinearConnector:
    def test_token_count_preserved_676(self, rng):
        conn = LinearConnector(cfg_for("linear"), rng)
        out = conn(Tensor(rng.normal(size=(676, 6))), 26, 26)
        assert out.count == 676 and out.dim == 10

    def test_identity_initialized_square(self, rng):
        conn = LinearConnector(cfg_for("linear", vision_dim=5, text_dim=5), rng)
        conn.w.data = np.eye(5)
        conn.b.data = np.zeros(5)
        x = rng.normal(size=(7, 5))
        out = conn(Tensor(x), 1, 7)
        assert np.array_equal(out.values.data, x)

    def test_zero_weights_zero_output(self, rng):
        conn = LinearConnector(cfg_for("linear"), rng)
        conn.w.data = np.zeros_like(conn.w.data)
        conn.b.data = np.zeros_like(conn.b.data)
        out = conn(Tensor(rng.normal(size=(4, 6))), 2, 2)
        assert np.all(out.values.data == 0.0)

    def test_dim_mismatch(self, rng):
        conn = LinearConnector(cfg_for("linear"), rng)
        with pytest.raises(ValueError, match="states"):
            conn(Tensor(rng.normal(size=(4, 7))), 2, 2)


class TestPerceiverResampler:
    def test_fixed_output_count(self, rng):
        conn = PerceiverResampler(cfg_for("perceiver", latent_count=64), rng)
        out = conn(Tensor(rng.normal(size=(676, 6))), 26, 26)
        assert out.count == 64

    def test_single_key_degenerate(self, rng):
        conn = PerceiverResampler(cfg_for("perceiver", latent_count=64), rng)
        out = conn(Tensor(rng.normal(size=(1, 6))), 1, 1)
        assert out.count == 64
        assert np.all(np.isfinite(out.values.data))

    def test_attention_rows_sum_to_one(self, rng):
        conn = PerceiverResampler(cfg_for("perceiver", latent_count=5), rng)
        attn = conn.attention_weights(Tensor(rng.normal(size=(9, 6))))
        assert attn.shape == (5, 9)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(attn >= 0)

    def test_empty_input_rejected(self, rng):
        conn = PerceiverResampler(cfg_for("perceiver"), rng)
        with pytest.raises(ValueError, match="empty"):
            conn(Tensor(np.zeros((0, 6))), 0, 0)

    def test_optional_latent_positions(self, rng):
        cfg = cfg_for("perceiver", latent_count=3)
        plain = PerceiverResampler(cfg, np.random.default_rng(0))
        assert plain.latent_pos is None
        cfg_pos = cfg_for("perceiver", latent_count=3, latent_pos_embed=True)
        with_pos = PerceiverResampler(cfg_pos, np.random.default_rng(0))
        assert with_pos.latent_pos is not None
        assert any(k.endswith("latent_pos") for k in with_pos.params())


class TestPixelShuffle:
    def test_paper_counts_26x26_r2(self, rng):
        conn = PixelShuffleConnector(cfg_for("pixel_shuffle", shuffle_factor_r=2), rng)
        out = conn(Tensor(rng.normal(size=(676, 6))), 26, 26)
        assert out.count == 169

    def test_minimal_2x2_row_major_order(self, rng):
        d = 3
        hidden = np.arange(4 * d, dtype=float).reshape(4, d)
        packed = pixel_shuffle_reindex(Tensor(hidden), 2, 2, 2)
        assert packed.shape == (1, 4 * d)
        # rows of the grid are [0, 1; 2, 3]; row-major neighborhood order
        assert np.array_equal(packed.data[0], hidden.reshape(-1))

    def test_divisibility_error_names_dims(self, rng):
        with pytest.raises(ValueError, match="3x3.*r=2"):
            pixel_shuffle_reindex(Tensor(rng.normal(size=(9, 4))), 3, 3, 2)

    def test_reindex_bijection_bruteforce(self, rng):
        for gh, gw, r in [(2, 2, 2), (4, 4, 2), (6, 4, 2), (8, 8, 4), (3, 3, 3), (8, 8, 2)]:
            hidden = rng.normal(size=(gh * gw, 5))
            packed = pixel_shuffle_reindex(Tensor(hidden), gh, gw, r)
            back = pixel_shuffle_inverse(packed.data, gh, gw, r)
            assert np.array_equal(back, hidden)

    def test_projection_width_before_output(self, rng):
        cfg = cfg_for("pixel_shuffle", vision_dim=6, shuffle_factor_r=2)
        conn = PixelShuffleConnector(cfg, rng)
        assert conn.w.shape == (6 * 4, 10)


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(["linear", "perceiver", "pixel_shuffle"]),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 10_000),
)
def test_token_count_contract_property(kind, gh_blocks, gw_blocks, seed):
    """linear keeps M, perceiver always emits latent_count, shuffle divides by r^2."""
    rng = np.random.default_rng(seed)
    r = 2
    gh, gw = gh_blocks * r, gw_blocks * r
    cfg = ConnectorConfig(kind=kind, vision_dim=4, text_dim=6, latent_count=3, shuffle_factor_r=r)
    conn = build_connector(cfg, rng)
    m = gh * gw
    out = conn(Tensor(rng.normal(size=(m, 4))), gh, gw)
    if kind == "linear":
        assert out.count == m
    elif kind == "perceiver":
        assert out.count == 3
    else:
        assert out.count == m // (r * r)
    assert out.dim == 6
    assert conn.tokens_per_tile(gh, gw) == out.count


@pytest.mark.parametrize("kind", ["linear", "perceiver", "pixel_shuffle"])
def test_connector_end_to_end_gradients(kind, rng):
    cfg = ConnectorConfig(kind=kind, vision_dim=4, text_dim=5, latent_count=3, shuffle_factor_r=2)
    conn = build_connector(cfg, rng)
    hidden0 = rng.normal(size=(4, 4))
    target = rng.normal(size=5)

    def f(t):
        out = conn(t, 2, 2)
        return ag.tsum(ag.power(ag.add(ag.tmean(out.values, axis=0), tensor(-target)), 2.0))

    x = Tensor(hidden0, requires_grad=True)
    assert finite_diff_check(f, x, h=1e-5) < 1e-4

    def loss_fn():
        out = conn(Tensor(hidden0), 2, 2)
        return ag.tsum(ag.power(ag.add(ag.tmean(out.values, axis=0), tensor(-target)), 2.0))

    err = ag.finite_diff_check_params(loss_fn, conn.params(), h=1e-5, sample=8, rng=rng)
    assert err < 1e-4
