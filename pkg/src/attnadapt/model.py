"""Small convolutional classifier with feature-map taps and frozen snapshots.

Architecture: a stack of conv layers where the first ones extract features
(ReLU, optional max-pool) and the last one is a conv classifier whose output
is globally average-pooled into logits. Taps expose post-nonlinearity feature
maps (before pooling) for the attention machinery.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    relu: bool = True
    pool: int | None = None

    def to_dict(self) -> dict:
        return {
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "relu": self.relu,
            "pool": self.pool,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConvLayerSpec":
        return cls(
            out_channels=int(d["out_channels"]),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            padding=int(d["padding"]),
            relu=bool(d["relu"]),
            pool=None if d["pool"] is None else int(d["pool"]),
        )


def _default_layers() -> tuple[ConvLayerSpec, ...]:
    return (
        ConvLayerSpec(32, pool=2),
        ConvLayerSpec(64, pool=2),
        ConvLayerSpec(128),
        ConvLayerSpec(10, relu=False),
    )


@dataclass(frozen=True)
class ConvNetSpec:
    """Network shape: conv feature layers plus a conv classifier head."""

    in_channels: int = 1
    num_classes: int = 10
    layers: tuple[ConvLayerSpec, ...] = field(default_factory=_default_layers)
    tap_layers: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        if not layers:
            raise ValueError("network needs at least one conv layer")
        if layers[-1].out_channels != self.num_classes:
            raise ValueError(
                f"final layer must output num_classes={self.num_classes} channels, "
                f"got {layers[-1].out_channels}"
            )
        for i, layer in enumerate(layers):
            if layer.out_channels <= 0 or layer.kernel <= 0 or layer.stride <= 0:
                raise ValueError(f"layer {i} has non-positive size fields: {layer}")
        for t in self.tap_layers:
            if not 0 <= t < len(layers):
                raise ValueError(f"tap index {t} is not a conv layer index (have {len(layers)} layers)")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
            "tap_layers": list(self.tap_layers),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConvNetSpec":
        return cls(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            layers=tuple(ConvLayerSpec.from_dict(l) for l in d["layers"]),
            tap_layers=tuple(int(t) for t in d["tap_layers"]),
        )

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def convnet_spec(num_classes: int = 10, in_channels: int = 1, widths: tuple[int, int, int] = (32, 64, 128)) -> ConvNetSpec:
    """Three feature convs (first two max-pooled) plus a conv classifier."""
    w1, w2, w3 = widths
    return ConvNetSpec(
        in_channels=in_channels,
        num_classes=num_classes,
        layers=(
            ConvLayerSpec(w1, pool=2),
            ConvLayerSpec(w2, pool=2),
            ConvLayerSpec(w3),
            ConvLayerSpec(num_classes, relu=False),
        ),
        tap_layers=(0, 1, 2),
    )


@dataclass(frozen=True)
class ForwardResult:
    logits: torch.Tensor
    taps: dict[int, torch.Tensor]


@dataclass(frozen=True)
class ParamsSnapshot:
    """Frozen, shareable copy of a network's parameters."""

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]
    spec_hash: str

    def state_hash(self) -> str:
        h = hashlib.sha256(self.spec_hash.encode())
        for a in self.arrays:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


class Network(nn.Module):
    """Conv stack with taps; deterministic fan-in-scaled uniform init."""

    def __init__(self, spec: ConvNetSpec, seed: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec
        self.spec_hash = spec.spec_hash()
        convs = []
        in_ch = spec.in_channels
        gen = torch.Generator().manual_seed(seed)
        for layer in spec.layers:
            conv = nn.Conv2d(in_ch, layer.out_channels, layer.kernel, stride=layer.stride, padding=layer.padding)
            fan_in = in_ch * layer.kernel * layer.kernel
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)
            convs.append(conv)
            in_ch = layer.out_channels
        self.convs = nn.ModuleList(convs)
        self.to(dtype)

    def forward_with_taps(self, x: torch.Tensor) -> ForwardResult:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input (N, {self.spec.in_channels}, H, W), got shape {tuple(x.shape)}"
            )
        taps: dict[int, torch.Tensor] = {}
        for i, (conv, layer) in enumerate(zip(self.convs, self.spec.layers)):
            x = conv(x)
            if layer.relu:
                x = F.relu(x)
            if i in self.spec.tap_layers:
                taps[i] = x
            if layer.pool:
                x = F.max_pool2d(x, layer.pool)
        logits = x.mean(dim=(2, 3))
        return ForwardResult(logits=logits, taps=taps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x).logits


def build_network(spec: ConvNetSpec, seed: int, dtype: torch.dtype = torch.float32) -> Network:
    return Network(spec, seed, dtype)


def snapshot_params(net: Network) -> ParamsSnapshot:
    names, arrays = [], []
    for name, p in net.named_parameters():
        names.append(name)
        arrays.append(p.detach().cpu().numpy().copy())
    for a in arrays:
        a.setflags(write=False)
    return ParamsSnapshot(tuple(names), tuple(arrays), net.spec_hash)


def sync_params(dst: Network, src: ParamsSnapshot) -> None:
    """Copy snapshot parameters into dst; optimizer state is untouched."""
    if dst.spec_hash != src.spec_hash:
        raise ValueError("snapshot spec hash does not match destination network")
    params = dict(dst.named_parameters())
    with torch.no_grad():
        for name, arr in zip(src.names, src.arrays):
            params[name].copy_(torch.from_numpy(arr.copy()).to(params[name].dtype))


def predict_probs(net: Network, x: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities, rows summing to 1."""
    return F.softmax(net(x), dim=1)


def save_checkpoint(path, spec: ConvNetSpec, snapshot: ParamsSnapshot, seed: int, step: int) -> None:
    """Raw little-endian float32 parameter file plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in snapshot.arrays)
    (path / "params.bin").write_bytes(blob)
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "step": step,
        "hash": hashlib.sha256(blob).hexdigest(),
        "spec_hash": snapshot.spec_hash,
        "param_names": list(snapshot.names),
        "param_shapes": [list(a.shape) for a in snapshot.arrays],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


@dataclass(frozen=True)
class Checkpoint:
    spec: ConvNetSpec
    snapshot: ParamsSnapshot
    seed: int
    step: int
    hash: str


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    spec = ConvNetSpec.from_dict(manifest["spec"])
    blob = (path / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["hash"]:
        raise ValueError(f"checkpoint {path}: params.bin does not match manifest hash")
    flat = np.frombuffer(blob, dtype="<f4")
    arrays, offset = [], 0
    for shape in manifest["param_shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[offset : offset + size].reshape(shape).astype(np.float32))
        offset += size
    if offset != flat.size:
        raise ValueError(f"checkpoint {path}: parameter sizes do not match params.bin")
    snapshot = ParamsSnapshot(tuple(manifest["param_names"]), tuple(arrays), manifest["spec_hash"])
    return Checkpoint(spec, snapshot, manifest["seed"], manifest["step"], manifest["hash"])


def load_network(path, dtype: torch.dtype = torch.float32) -> Network:
    ckpt = load_checkpoint(path)
    net = build_network(ckpt.spec, seed=0, dtype=dtype)
    sync_params(net, ckpt.snapshot)
    return net
