"""Central finite-difference checks of every analytic training gradient.

All checks run in float64 on miniature networks; gradients must match to a
relative error of 1e-3 per element (with a small absolute floor for
near-zero entries). The step 1e-6 keeps the probe window small enough that
ReLU/max-pool kinks are almost never crossed while float64 roundoff stays
around 1e-10.
"""

import pytest
import torch
from fdcheck import check_gradients, mini_spec

from attnadapt.attention import alignment_loss_for_batch
from attnadapt.datagen import BatchComposition, compose_batch, make_domain_pair_datasets, synth_glyph_dataset
from attnadapt.discrepancy import KernelSet
from attnadapt.em_trainer import em_loss, estimate_posterior, full_objective, supervised_ce_loss
from attnadapt.model import build_network, snapshot_params, sync_params
from attnadapt.translation import StyleMapConfig, build_style_map


@pytest.fixture(scope="module")
def mini_batch():
    base = synth_glyph_dataset(60, 3, seed=21)
    streams = make_domain_pair_datasets(base, build_style_map(StyleMapConfig()))
    return compose_batch(streams, BatchComposition(batch_size=10), seed=3, step=0)


@pytest.fixture(scope="module")
def nets():
    target = build_network(mini_spec(), seed=1, dtype=torch.float64)
    source = build_network(mini_spec(), seed=2, dtype=torch.float64)
    return source, target


def as64(a):
    return torch.as_tensor(a, dtype=torch.float64)


class TestLossGradients:
    def test_supervised_ce(self, nets, mini_batch):
        _, net = nets
        rs = mini_batch.real_source
        st = mini_batch.synth_target
        loss_fn = lambda: supervised_ce_loss(
            net, as64(rs.pixels), as64(st.pixels), rs.labels, st.labels
        )
        check_gradients(net, loss_fn)

    def test_em(self, nets, mini_batch):
        source, net = nets
        rt = mini_batch.real_target
        posterior = estimate_posterior(source, as64(rt.pixels), p_t=0.0)
        loss_fn = lambda: em_loss(net, as64(rt.pixels), as64(rt.partner_pixels), posterior)
        check_gradients(net, loss_fn)

    def test_attention_alignment(self, nets, mini_batch):
        source, net = nets
        loss_fn = lambda: alignment_loss_for_batch(
            source, net, mini_batch, layer_set=(0, 1), dtype=torch.float64
        )
        check_gradients(net, loss_fn)

    def test_mmd_as_loss(self, nets, mini_batch):
        source, net = nets
        kernels = KernelSet((0.5, 1.0, 2.0))  # pinned so the loss is a fixed function
        loss_fn = lambda: alignment_loss_for_batch(
            source, net, mini_batch, measure="mmd", layer_set=(0, 1), kernels=kernels, dtype=torch.float64
        )
        check_gradients(net, loss_fn)

    def test_composite_objective(self, nets, mini_batch):
        source, net = nets
        rs, st, rt = mini_batch.real_source, mini_batch.synth_target, mini_batch.real_target
        posterior = estimate_posterior(source, as64(rt.pixels), p_t=0.0)

        def loss_fn():
            ce = supervised_ce_loss(net, as64(rs.pixels), as64(st.pixels), rs.labels, st.labels)
            em = em_loss(net, as64(rt.pixels), as64(rt.partner_pixels), posterior)
            at = alignment_loss_for_batch(source, net, mini_batch, layer_set=(0, 1), dtype=torch.float64)
            return full_objective(ce, em, at, beta=0.7)

        check_gradients(net, loss_fn)


class TestGradientIsolation:
    def test_source_network_receives_no_gradient(self, nets, mini_batch):
        source, net = nets
        for p in source.parameters():
            p.requires_grad_(True)
            p.grad = None
        loss = alignment_loss_for_batch(source, net, mini_batch, layer_set=(0, 1), dtype=torch.float64)
        loss.backward()
        for p in source.parameters():
            assert p.grad is None or torch.all(p.grad == 0)
        for p in source.parameters():
            p.requires_grad_(False)

    def test_posterior_network_receives_no_gradient(self, nets, mini_batch):
        source, net = nets
        rt = mini_batch.real_target
        for p in source.parameters():
            p.requires_grad_(True)
            p.grad = None
        posterior = estimate_posterior(source, as64(rt.pixels), p_t=0.0)
        loss = em_loss(net, as64(rt.pixels), as64(rt.partner_pixels), posterior)
        loss.backward()
        for p in source.parameters():
            assert p.grad is None or torch.all(p.grad == 0)
        for p in source.parameters():
            p.requires_grad_(False)

    def test_target_at_source_alignment_gradient_is_finite_zero(self, mini_batch):
        # exact parameter copy: all alignment distances are exactly zero, and
        # the subgradient must be zero (not NaN) so training can leave the origin
        source = build_network(mini_spec(), seed=5, dtype=torch.float64)
        target = build_network(mini_spec(), seed=6, dtype=torch.float64)
        sync_params(target, snapshot_params(source))
        loss = alignment_loss_for_batch(source, target, mini_batch, layer_set=(0, 1), dtype=torch.float64)
        loss.backward()
        for p in target.parameters():
            if p.grad is not None:
                assert torch.isfinite(p.grad).all()
