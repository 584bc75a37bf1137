import numpy as np
import pytest
import torch
from oracles import attention_map_oracle, normalized_l2_distance_oracle

from attnadapt.attention import (
    alignment_loss_for_batch,
    attention_alignment_loss,
    attention_map,
    normalize_attention,
)
from attnadapt.datagen import BatchComposition, compose_batch, make_domain_pair_datasets, synth_glyph_dataset
from attnadapt.model import ConvLayerSpec, ConvNetSpec, build_network, snapshot_params, sync_params
from attnadapt.translation import StyleMapConfig, StyleMapParams, build_style_map


class TestAttentionMap:
    def test_zero_features_zero_maps(self):
        f = torch.zeros(3, 4, 4)
        for mode in ("sumsq", "sumabs", "maxabs"):
            assert torch.all(attention_map(f, mode) == 0)
        assert torch.all(attention_map(f, "raw") == 0)

    def test_hand_example_sumsq(self):
        f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]])
        expected = torch.tensor([[1.0, 5.0], [10.0, 16.0]])
        assert torch.equal(attention_map(f, "sumsq"), expected)

    def test_hand_example_maxabs(self):
        f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]])
        assert torch.equal(attention_map(f, "maxabs"), torch.tensor([[1.0, 2.0], [3.0, 4.0]]))

    def test_hand_example_sumabs(self):
        f = torch.tensor([[[1.0, -2.0], [3.0, 4.0]], [[0.0, 1.0], [-1.0, 0.0]]])
        assert torch.equal(attention_map(f, "sumabs"), torch.tensor([[1.0, 3.0], [4.0, 4.0]]))

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(5, 3, 4))
        for mode in ("sumsq", "sumabs", "maxabs"):
            got = attention_map(torch.tensor(f), mode).numpy()
            assert np.max(np.abs(got - attention_map_oracle(f, mode))) <= 1e-9

    def test_batched_input(self):
        f = torch.randn(6, 3, 4, 4)
        maps = attention_map(f, "sumsq")
        assert maps.shape == (6, 4, 4)
        assert torch.allclose(maps[2], attention_map(f[2], "sumsq"))

    def test_nonnegative(self):
        f = torch.randn(4, 3, 5, 5)
        for mode in ("sumsq", "sumabs", "maxabs"):
            assert (attention_map(f, mode) >= 0).all()

    def test_one_hot_channel_sumsq_vs_maxabs(self):
        # single nonzero channel: sumsq equals maxabs squared-vs-abs on unit values
        f = torch.zeros(4, 3, 3)
        f[2] = torch.eye(3)
        assert torch.equal(attention_map(f, "sumsq"), attention_map(f, "maxabs"))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            attention_map(torch.zeros(0, 2, 2), "sumsq")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            attention_map(torch.zeros(1, 2, 2), "l7")


class TestNormalizeAttention:
    def test_three_four_five(self):
        out = normalize_attention(torch.tensor([3.0, 4.0]))
        assert torch.allclose(out, torch.tensor([0.6, 0.8]))

    def test_zero_map_stays_zero(self):
        out = normalize_attention(torch.zeros(5))
        assert torch.all(out == 0)
        assert not torch.any(torch.isnan(out))

    def test_scale_invariance(self):
        v = torch.tensor([[1.0, 2.0, 2.0]])
        assert torch.allclose(normalize_attention(v), normalize_attention(10.0 * v))

    def test_below_eps_scales_by_eps(self):
        eps = 1e-2
        v = torch.tensor([1e-3, 0.0])
        out = normalize_attention(v, eps=eps)
        assert torch.allclose(out, v / eps)

    def test_batch_rows_unit_norm(self):
        v = torch.randn(7, 12)
        out = normalize_attention(v)
        assert torch.allclose(torch.linalg.vector_norm(out, dim=1), torch.ones(7), atol=1e-6)

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            normalize_attention(torch.ones(3), eps=0.0)


class TestAlignmentLoss:
    def test_single_pair_matches_hand_oracle(self):
        src = torch.tensor([[[[1.0, 2.0], [0.5, 0.0]]]], dtype=torch.float64)  # (1, 1, 2, 2)
        tgt = torch.tensor([[[[0.0, 1.0], [1.0, 2.0]]]], dtype=torch.float64)
        loss = attention_alignment_loss([{0: src}], [{0: tgt}], mode="sumsq", layer_set=(0,))
        expected = normalized_l2_distance_oracle(
            attention_map_oracle(src[0].numpy(), "sumsq"), attention_map_oracle(tgt[0].numpy(), "sumsq")
        )
        assert float(loss) == pytest.approx(expected, abs=1e-9)

    def test_identical_taps_zero(self):
        f = torch.randn(3, 2, 4, 4)
        loss = attention_alignment_loss([{1: f}], [{1: f.clone()}], layer_set=(1,))
        assert float(loss) == 0.0

    def test_positive_scaling_invariance(self):
        f = torch.randn(3, 2, 4, 4).abs() + 0.1
        g = torch.randn(3, 2, 4, 4).abs() + 0.1
        base = attention_alignment_loss([{0: f}], [{0: g}], layer_set=(0,))
        scaled = attention_alignment_loss([{0: f}], [{0: 7.5 * g}], layer_set=(0,))
        assert float(base) == pytest.approx(float(scaled), rel=1e-6)

    def test_sums_over_layers(self):
        f, g = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        one = attention_alignment_loss([{0: f, 1: f}], [{0: g, 1: g}], layer_set=(0,))
        both = attention_alignment_loss([{0: f, 1: f}], [{0: g, 1: g}], layer_set=(0, 1))
        assert float(both) == pytest.approx(2 * float(one), rel=1e-6)

    def test_averages_within_group(self):
        f, g = torch.randn(4, 2, 3, 3), torch.randn(4, 2, 3, 3)
        whole = attention_alignment_loss([{0: f}], [{0: g}], layer_set=(0,))
        parts = [
            float(attention_alignment_loss([{0: f[i : i + 1]}], [{0: g[i : i + 1]}], layer_set=(0,)))
            for i in range(4)
        ]
        assert float(whole) == pytest.approx(sum(parts) / 4, rel=1e-6)

    def test_empty_layer_set_rejected(self):
        with pytest.raises(ValueError):
            attention_alignment_loss([{0: torch.randn(1, 1, 2, 2)}], [{0: torch.randn(1, 1, 2, 2)}], layer_set=())

    def test_pairing_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attention_alignment_loss(
                [{0: torch.randn(2, 1, 2, 2)}], [{0: torch.randn(3, 1, 2, 2)}], layer_set=(0,)
            )

    def test_nonnegative_random(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            f1 = torch.randn(3, 2, 3, 3, generator=g)
            f2 = torch.randn(3, 2, 3, 3, generator=g)
            assert float(attention_alignment_loss([{0: f1}], [{0: f2}], layer_set=(0,))) >= 0.0


def tiny_spec():
    return ConvNetSpec(
        in_channels=1,
        num_classes=4,
        layers=(ConvLayerSpec(4, pool=2), ConvLayerSpec(4), ConvLayerSpec(4, relu=False)),
        tap_layers=(0, 1),
    )


def identity_style_map(shape=(28, 28)):
    return StyleMapParams(scale=np.ones(shape), offset=np.zeros(shape), a_min=0.5)


class TestBatchAlignment:
    def test_identity_translator_identical_nets_zero(self):
        base = synth_glyph_dataset(40, 4, seed=2)
        streams = make_domain_pair_datasets(base, identity_style_map())
        batch = compose_batch(streams, BatchComposition(batch_size=16), seed=0, step=0)
        net = build_network(tiny_spec(), seed=0)
        twin = build_network(tiny_spec(), seed=1)
        sync_params(twin, snapshot_params(net))
        loss = alignment_loss_for_batch(net, twin, batch, layer_set=(0, 1))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_real_translator_differs_from_zero(self):
        base = synth_glyph_dataset(40, 4, seed=2)
        streams = make_domain_pair_datasets(base, build_style_map(StyleMapConfig()))
        batch = compose_batch(streams, BatchComposition(batch_size=16), seed=0, step=0)
        net = build_network(tiny_spec(), seed=0)
        twin = build_network(tiny_spec(), seed=1)
        sync_params(twin, snapshot_params(net))
        loss = alignment_loss_for_batch(net, twin, batch, layer_set=(0, 1))
        assert float(loss.detach()) > 0.01

    def test_gradient_reaches_target_only(self):
        base = synth_glyph_dataset(40, 4, seed=2)
        streams = make_domain_pair_datasets(base, build_style_map(StyleMapConfig()))
        batch = compose_batch(streams, BatchComposition(batch_size=12), seed=0, step=0)
        source = build_network(tiny_spec(), seed=0)
        target = build_network(tiny_spec(), seed=3)
        loss = alignment_loss_for_batch(source, target, batch, layer_set=(0, 1))
        loss.backward()
        assert all(p.grad is None for p in source.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in target.parameters())

    def test_measure_l1_and_mmd_finite(self):
        base = synth_glyph_dataset(40, 4, seed=2)
        streams = make_domain_pair_datasets(base, build_style_map(StyleMapConfig()))
        batch = compose_batch(streams, BatchComposition(batch_size=12), seed=0, step=0)
        source = build_network(tiny_spec(), seed=0)
        target = build_network(tiny_spec(), seed=3)
        for measure in ("l1", "mmd", "jmmd"):
            val = alignment_loss_for_batch(source, target, batch, measure=measure, layer_set=(0, 1))
            assert np.isfinite(float(val.detach()))

    def test_raw_mode_runs(self):
        base = synth_glyph_dataset(40, 4, seed=2)
        streams = make_domain_pair_datasets(base, build_style_map(StyleMapConfig()))
        batch = compose_batch(streams, BatchComposition(batch_size=12), seed=0, step=0)
        source = build_network(tiny_spec(), seed=0)
        target = build_network(tiny_spec(), seed=3)
        val = float(alignment_loss_for_batch(source, target, batch, mode="raw", layer_set=(0, 1)).detach())
        assert np.isfinite(val) and val >= 0
