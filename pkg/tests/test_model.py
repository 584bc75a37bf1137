import math

import numpy as np
import pytest
import torch

from attnadapt.model import (
    ConvLayerSpec,
    ConvNetSpec,
    build_network,
    convnet_spec,
    load_checkpoint,
    load_network,
    predict_probs,
    save_checkpoint,
    snapshot_params,
    sync_params,
)


def tiny_spec(num_classes=3):
    return ConvNetSpec(
        in_channels=1,
        num_classes=num_classes,
        layers=(ConvLayerSpec(4, pool=2), ConvLayerSpec(4), ConvLayerSpec(num_classes, relu=False)),
        tap_layers=(0, 1),
    )


class TestSpecValidation:
    def test_final_layer_must_match_classes(self):
        with pytest.raises(ValueError):
            ConvNetSpec(num_classes=10, layers=(ConvLayerSpec(7, relu=False),))

    def test_tap_on_missing_layer_rejected(self):
        with pytest.raises(ValueError):
            ConvNetSpec(
                num_classes=3,
                layers=(ConvLayerSpec(4), ConvLayerSpec(3, relu=False)),
                tap_layers=(5,),
            )

    def test_spec_dict_round_trip(self):
        spec = convnet_spec(num_classes=7, widths=(8, 16, 24))
        assert ConvNetSpec.from_dict(spec.to_dict()) == spec
        assert ConvNetSpec.from_dict(spec.to_dict()).spec_hash() == spec.spec_hash()


class TestBuildNetwork:
    def test_same_seed_bitwise_identical(self):
        a = snapshot_params(build_network(tiny_spec(), seed=42))
        b = snapshot_params(build_network(tiny_spec(), seed=42))
        for x, y in zip(a.arrays, b.arrays):
            assert np.array_equal(x, y)

    def test_different_seed_differs(self):
        a = snapshot_params(build_network(tiny_spec(), seed=1))
        b = snapshot_params(build_network(tiny_spec(), seed=2))
        assert any(not np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))

    def test_default_spec_forward_shapes(self):
        net = build_network(ConvNetSpec(), seed=0)
        out = net.forward_with_taps(torch.zeros(2, 1, 28, 28))
        assert out.logits.shape == (2, 10)
        assert sorted(out.taps) == [0, 1, 2]
        assert out.taps[0].shape == (2, 32, 28, 28)
        assert out.taps[1].shape == (2, 64, 14, 14)
        assert out.taps[2].shape == (2, 128, 7, 7)

    def test_fan_in_bound_respected(self):
        net = build_network(tiny_spec(), seed=0)
        for conv, layer in zip(net.convs, net.spec.layers):
            fan_in = conv.in_channels * layer.kernel**2
            bound = 1.0 / math.sqrt(fan_in)
            assert conv.weight.abs().max().item() <= bound


class TestForward:
    def test_zero_weights_give_uniform_softmax(self):
        net = build_network(tiny_spec(num_classes=5), seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        probs = predict_probs(net, torch.randn(3, 1, 8, 8))
        assert torch.allclose(probs, torch.full((3, 5), 0.2), atol=1e-7)

    def test_identical_inputs_identical_rows(self):
        net = build_network(tiny_spec(), seed=3)
        x = torch.randn(1, 1, 8, 8).repeat(2, 1, 1, 1)
        out = net.forward_with_taps(x)
        assert torch.equal(out.logits[0], out.logits[1])
        for tap in out.taps.values():
            assert torch.equal(tap[0], tap[1])

    def test_shape_mismatch_rejected(self):
        net = build_network(tiny_spec(), seed=0)
        with pytest.raises(ValueError):
            net(torch.zeros(2, 3, 8, 8))

    def test_parameter_perturbation_changes_logits(self):
        net = build_network(tiny_spec(), seed=1).double()
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        before = net(x).detach().clone()
        with torch.no_grad():
            first = next(net.parameters())
            first.view(-1)[0] += 1e-3
        after = net(x).detach()
        assert not torch.allclose(before, after)


class TestPredictProbs:
    def test_rows_sum_to_one(self):
        net = build_network(tiny_spec(), seed=4)
        probs = predict_probs(net, torch.randn(5, 1, 8, 8))
        assert torch.allclose(probs.sum(dim=1), torch.ones(5), atol=1e-6)
        assert (probs > 0).all() and (probs < 1).all()

    def test_softmax_oracle_strong_logit(self):
        # softmax([10, 0, ..., 0]) class-0 probability for K=10
        logits = np.zeros(10)
        logits[0] = 10.0
        oracle = math.exp(10.0) / (math.exp(10.0) + 9.0)
        probs = torch.softmax(torch.tensor(logits), dim=0)
        assert probs[0].item() == pytest.approx(oracle, abs=1e-9)
        assert probs[0].item() > 0.99


class TestSnapshots:
    def test_sync_restores_outputs(self):
        net = build_network(tiny_spec(), seed=5)
        x = torch.randn(2, 1, 8, 8)
        snap = snapshot_params(net)
        before = net(x).detach().clone()
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.1)
        assert not torch.allclose(net(x), before)
        sync_params(net, snap)
        assert torch.equal(net(x), before)

    def test_stale_snapshot_reproduces_stale_outputs(self):
        net = build_network(tiny_spec(), seed=6)
        x = torch.randn(2, 1, 8, 8)
        stale = snapshot_params(net)
        stale_out = net(x).detach().clone()
        with torch.no_grad():
            next(net.parameters()).add_(0.5)
        other = build_network(tiny_spec(), seed=99)
        sync_params(other, stale)
        assert torch.equal(other(x), stale_out)

    def test_spec_mismatch_rejected(self):
        snap = snapshot_params(build_network(tiny_spec(), seed=0))
        other = build_network(convnet_spec(num_classes=3, widths=(4, 4, 4)), seed=0)
        with pytest.raises(ValueError):
            sync_params(other, snap)

    def test_state_hash_stable(self):
        net = build_network(tiny_spec(), seed=7)
        assert snapshot_params(net).state_hash() == snapshot_params(net).state_hash()


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        spec = tiny_spec()
        net = build_network(spec, seed=8)
        save_checkpoint(tmp_path / "ck", spec, snapshot_params(net), seed=8, step=123)
        ckpt = load_checkpoint(tmp_path / "ck")
        assert ckpt.spec == spec
        assert ckpt.seed == 8 and ckpt.step == 123
        restored = load_network(tmp_path / "ck")
        x = torch.randn(2, 1, 8, 8)
        assert torch.equal(restored(x), net(x))

    def test_same_seed_identical_hash(self, tmp_path):
        spec = tiny_spec()
        for name in ("a", "b"):
            net = build_network(spec, seed=11)
            save_checkpoint(tmp_path / name, spec, snapshot_params(net), seed=11, step=0)
        a = load_checkpoint(tmp_path / "a")
        b = load_checkpoint(tmp_path / "b")
        assert a.hash == b.hash

    def test_corrupted_params_detected(self, tmp_path):
        spec = tiny_spec()
        net = build_network(spec, seed=1)
        save_checkpoint(tmp_path / "ck", spec, snapshot_params(net), seed=1, step=0)
        blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
        blob[0] ^= 0xFF
        (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck")
