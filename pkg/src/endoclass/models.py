"""Backbone architectures and the two-network ensemble.

Two convolutional families are provided: a densely connected backbone
(each layer consumes the concatenation of everything before it) and a
residual backbone (bottleneck blocks with identity or projection
shortcuts).  The default layouts reproduce the classic 121-layer dense
and 50-layer residual channel plans; "tiny" variants with the same
structure but two single-layer stages keep the test suites fast.

The ensemble runs both backbones and fuses their outputs, by default
averaging softmax probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FusionMismatch, ShapeMismatch
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Layer,
                     Linear, MaxPool2d, ReLU, Sequential)

DENSENET = "densenet"
RESNET = "resnet"
MEAN_PROB = "mean_prob"
MEAN_LOGIT = "mean_logit"

BOTTLENECK_EXPANSION = 4      # residual bottleneck output = 4x block width
DENSE_BOTTLENECK_FACTOR = 4   # dense layer 1x1 width = 4x growth rate
TRANSITION_COMPRESSION = 2    # dense transitions halve the channel count


@dataclass
class ResidualBlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    bottleneck: bool = True

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class DenseBlockConfig:
    num_layers: int
    growth_rate: int
    in_channels: int

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.num_layers * self.growth_rate


@dataclass
class BackboneConfig:
    kind: str
    stage_sizes: tuple
    num_classes: int
    growth_rate: Optional[int] = None        # densenet only
    stage_channels: Optional[tuple] = None   # resnet block widths, pre-expansion
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    input_size: int = 224

    def __post_init__(self):
        self.stage_sizes = tuple(int(n) for n in self.stage_sizes)
        if self.stage_channels is not None:
            self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.kind == DENSENET and self.growth_rate is None:
            raise ValueError("densenet config needs a growth_rate")
        if self.kind == RESNET and self.stage_channels is None:
            raise ValueError("resnet config needs stage_channels")
        if self.kind not in (DENSENET, RESNET):
            raise ValueError(f"unknown backbone kind {self.kind!r}")

    @property
    def feature_dim(self) -> int:
        return channel_trace(self)[-1]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stage_sizes": list(self.stage_sizes),
            "num_classes": self.num_classes,
            "growth_rate": self.growth_rate,
            "stage_channels": (list(self.stage_channels)
                               if self.stage_channels is not None else None),
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "input_size": self.input_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stage_sizes"] = tuple(d["stage_sizes"])
        if d.get("stage_channels") is not None:
            d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


def channel_trace(cfg: BackboneConfig) -> list:
    """Channel count after the stem and after each stage/transition.

    The last entry is the penultimate feature width fed to the
    classifier.
    """
    trace = [cfg.stem_channels]
    c = cfg.stem_channels
    if cfg.kind == DENSENET:
        for i, n in enumerate(cfg.stage_sizes):
            c += n * cfg.growth_rate
            trace.append(c)
            if i != len(cfg.stage_sizes) - 1:
                c //= TRANSITION_COMPRESSION
                trace.append(c)
    else:
        for width in cfg.stage_channels:
            c = width * BOTTLENECK_EXPANSION
            trace.append(c)
    return trace


def densenet121_config(num_classes: int, input_size: int = 224) -> BackboneConfig:
    return BackboneConfig(kind=DENSENET, stage_sizes=(6, 12, 24, 16),
                          growth_rate=32, num_classes=num_classes,
                          stem_channels=64, stem_kernel=7, stem_stride=2,
                          input_size=input_size)


def resnet50_config(num_classes: int, input_size: int = 224) -> BackboneConfig:
    return BackboneConfig(kind=RESNET, stage_sizes=(3, 4, 6, 3),
                          stage_channels=(64, 128, 256, 512),
                          num_classes=num_classes, stem_channels=64,
                          stem_kernel=7, stem_stride=2, input_size=input_size)


def tiny_densenet_config(num_classes: int, input_size: int = 32) -> BackboneConfig:
    return BackboneConfig(kind=DENSENET, stage_sizes=(1, 1), growth_rate=8,
                          num_classes=num_classes, stem_channels=8,
                          stem_kernel=3, stem_stride=1, input_size=input_size)


def tiny_resnet_config(num_classes: int, input_size: int = 32) -> BackboneConfig:
    return BackboneConfig(kind=RESNET, stage_sizes=(1, 1), stage_channels=(4, 8),
                          num_classes=num_classes, stem_channels=8,
                          stem_kernel=3, stem_stride=1, input_size=input_size)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted exponentials)."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class ResidualBlock(Layer):
    """activation(F(x) + shortcut(x)) with an optional projection shortcut."""

    def __init__(self, name: str, cfg: ResidualBlockConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        if cfg.bottleneck:
            width = cfg.out_channels // BOTTLENECK_EXPANSION
            self.main = Sequential([
                Conv2d(f"{name}.conv1", cfg.in_channels, width, 1, rng=rng),
                BatchNorm2d(f"{name}.bn1", width),
                ReLU(),
                Conv2d(f"{name}.conv2", width, width, 3, stride=cfg.stride,
                       pad=1, rng=rng),
                BatchNorm2d(f"{name}.bn2", width),
                ReLU(),
                Conv2d(f"{name}.conv3", width, cfg.out_channels, 1, rng=rng),
                BatchNorm2d(f"{name}.bn3", cfg.out_channels),
            ])
        else:
            self.main = Sequential([
                Conv2d(f"{name}.conv1", cfg.in_channels, cfg.out_channels, 3,
                       stride=cfg.stride, pad=1, rng=rng),
                BatchNorm2d(f"{name}.bn1", cfg.out_channels),
                ReLU(),
                Conv2d(f"{name}.conv2", cfg.out_channels, cfg.out_channels, 3,
                       pad=1, rng=rng),
                BatchNorm2d(f"{name}.bn2", cfg.out_channels),
            ])
        if cfg.needs_projection:
            self.shortcut = Sequential([
                Conv2d(f"{name}.proj", cfg.in_channels, cfg.out_channels, 1,
                       stride=cfg.stride, rng=rng),
                BatchNorm2d(f"{name}.proj_bn", cfg.out_channels),
            ])
        else:
            self.shortcut = None
        self._mask = None

    def forward(self, x, train):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"residual block expected {self.cfg.in_channels} "
                                f"channels, got {x.shape[1]}")
        f = self.main.forward(x, train)
        s = self.shortcut.forward(x, train) if self.shortcut is not None else x
        out = f + s
        self._mask = (out > 0) if train else None
        return np.maximum(out, 0.0)

    def backward(self, dout):
        d = dout * self._mask
        self._mask = None
        dx = self.main.backward(d)
        if self.shortcut is not None:
            dx = dx + self.shortcut.backward(d)
        else:
            dx = dx + d
        return dx

    def params(self):
        out = self.main.params()
        if self.shortcut is not None:
            out += self.shortcut.params()
        return out

    def buffers(self):
        out = self.main.buffers()
        if self.shortcut is not None:
            out += self.shortcut.buffers()
        return out


class DenseLayer(Layer):
    """bn -> relu -> 1x1 conv -> bn -> relu -> 3x3 conv, emitting growth_rate maps."""

    def __init__(self, name: str, in_channels: int, growth_rate: int,
                 rng: np.random.Generator):
        width = DENSE_BOTTLENECK_FACTOR * growth_rate
        self.body = Sequential([
            BatchNorm2d(f"{name}.bn1", in_channels),
            ReLU(),
            Conv2d(f"{name}.conv1", in_channels, width, 1, rng=rng),
            BatchNorm2d(f"{name}.bn2", width),
            ReLU(),
            Conv2d(f"{name}.conv2", width, growth_rate, 3, pad=1, rng=rng),
        ])

    def forward(self, x, train):
        return self.body.forward(x, train)

    def backward(self, dout):
        return self.body.backward(dout)

    def params(self):
        return self.body.params()

    def buffers(self):
        return self.body.buffers()


class DenseBlock(Layer):
    """Stack of dense layers; each consumes the concat of all earlier outputs."""

    def __init__(self, name: str, cfg: DenseBlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = []
        c = cfg.in_channels
        for i in range(cfg.num_layers):
            self.layers.append(DenseLayer(f"{name}.layer{i}", c,
                                          cfg.growth_rate, rng))
            c += cfg.growth_rate
        self._chunks = None

    def forward(self, x, train):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch(f"dense block expected {self.cfg.in_channels} "
                                f"channels, got {x.shape[1]}")
        features = [x]
        for layer in self.layers:
            inp = np.concatenate(features, axis=1)
            features.append(layer.forward(inp, train))
        self._chunks = [f.shape[1] for f in features] if train else None
        return np.concatenate(features, axis=1)

    def backward(self, dout):
        # Split the incoming gradient per concatenated chunk, then walk the
        # layers in reverse, scattering each layer's input gradient back onto
        # every earlier chunk it consumed.
        bounds = np.cumsum(self._chunks)[:-1]
        grads = list(np.split(dout, bounds, axis=1))
        for i in range(len(self.layers) - 1, -1, -1):
            dinp = self.layers[i].backward(grads[i + 1])
            inner = np.split(dinp, np.cumsum(self._chunks[:i + 1])[:-1], axis=1)
            for j, piece in enumerate(inner):
                grads[j] = grads[j] + piece
        self._chunks = None
        return grads[0]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def buffers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.buffers())
        return out


class Transition(Layer):
    """bn -> relu -> 1x1 conv -> 2x2 average pool between dense blocks."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator):
        self.body = Sequential([
            BatchNorm2d(f"{name}.bn", in_channels),
            ReLU(),
            Conv2d(f"{name}.conv", in_channels, out_channels, 1, rng=rng),
            AvgPool2d(2),
        ])

    def forward(self, x, train):
        return self.body.forward(x, train)

    def backward(self, dout):
        return self.body.backward(dout)

    def params(self):
        return self.body.params()

    def buffers(self):
        return self.body.buffers()


class Backbone:
    """Stem + stages + global average pool + affine classifier head.

    ``forward`` returns (logits, features); ``backward`` takes the logits
    gradient (and optionally a direct features gradient) and accumulates
    parameter gradients.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 prefix: str):
        self.cfg = cfg
        stem_pad = cfg.stem_kernel // 2
        stem = [
            Conv2d(f"{prefix}.stem.conv", 3, cfg.stem_channels, cfg.stem_kernel,
                   stride=cfg.stem_stride, pad=stem_pad, rng=rng),
            BatchNorm2d(f"{prefix}.stem.bn", cfg.stem_channels),
            ReLU(),
            MaxPool2d(3, 2, pad=1) if cfg.stem_kernel == 7 else MaxPool2d(2, 2),
        ]
        body = []
        c = cfg.stem_channels
        if cfg.kind == DENSENET:
            for i, n in enumerate(cfg.stage_sizes):
                block_cfg = DenseBlockConfig(num_layers=n,
                                             growth_rate=cfg.growth_rate,
                                             in_channels=c)
                body.append(DenseBlock(f"{prefix}.block{i}", block_cfg, rng))
                c = block_cfg.out_channels
                if i != len(cfg.stage_sizes) - 1:
                    body.append(Transition(f"{prefix}.trans{i}", c,
                                           c // TRANSITION_COMPRESSION, rng))
                    c //= TRANSITION_COMPRESSION
            body.append(BatchNorm2d(f"{prefix}.final_bn", c))
            body.append(ReLU())
        else:
            for i, (width, n) in enumerate(zip(cfg.stage_channels, cfg.stage_sizes)):
                out_c = width * BOTTLENECK_EXPANSION
                for j in range(n):
                    stride = 2 if (i > 0 and j == 0) else 1
                    block_cfg = ResidualBlockConfig(in_channels=c,
                                                    out_channels=out_c,
                                                    stride=stride,
                                                    bottleneck=True)
                    body.append(ResidualBlock(f"{prefix}.stage{i}.block{j}",
                                              block_cfg, rng))
                    c = out_c
        assert c == cfg.feature_dim, (c, cfg.feature_dim)
        self.features_net = Sequential(stem + body)
        self.pool = GlobalAvgPool()
        self.classifier = Linear(f"{prefix}.classifier", cfg.feature_dim,
                                 cfg.num_classes, rng=rng)

    def forward(self, x, train: bool = False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected Bx3xHxW input, got {x.shape}")
        fmap = self.features_net.forward(x, train)
        features = self.pool.forward(fmap, train)
        logits = self.classifier.forward(features, train)
        return logits, features

    def backward(self, dlogits, dfeatures=None):
        d = self.classifier.backward(dlogits)
        if dfeatures is not None:
            d = d + dfeatures
        d = self.pool.backward(d)
        return self.features_net.backward(d)

    def params(self):
        return (self.features_net.params() + self.pool.params()
                + self.classifier.params())

    def buffers(self):
        return self.features_net.buffers()


class EnsembleModel:
    """Two backbones plus a fusion rule over their class outputs."""

    def __init__(self, backbone_a: Backbone, backbone_b: Backbone,
                 class_set, fusion: str = MEAN_PROB):
        if backbone_a.cfg.num_classes != backbone_b.cfg.num_classes:
            raise FusionMismatch(
                f"backbones disagree on K: {backbone_a.cfg.num_classes} "
                f"vs {backbone_b.cfg.num_classes}")
        if backbone_a.cfg.num_classes != len(class_set):
            raise FusionMismatch(
                f"backbones have K={backbone_a.cfg.num_classes} but the class "
                f"set has {len(class_set)} names")
        if fusion not in (MEAN_PROB, MEAN_LOGIT):
            raise ValueError(f"unknown fusion rule {fusion!r}")
        self.backbone_a = backbone_a
        self.backbone_b = backbone_b
        self.class_set = class_set
        self.fusion = fusion

    @property
    def num_classes(self) -> int:
        return self.backbone_a.cfg.num_classes

    @property
    def feature_dim(self) -> int:
        return self.backbone_a.cfg.feature_dim + self.backbone_b.cfg.feature_dim

    def fuse(self, logits_a, logits_b):
        if self.fusion == MEAN_PROB:
            return 0.5 * (softmax(logits_a) + softmax(logits_b))
        return softmax(0.5 * (logits_a + logits_b))

    def forward(self, x, train: bool = False):
        """Full pass: (fused probs, logits_a, logits_b, concat features)."""
        logits_a, feat_a = self.backbone_a.forward(x, train)
        logits_b, feat_b = self.backbone_b.forward(x, train)
        probs = self.fuse(logits_a, logits_b)
        return probs, logits_a, logits_b, np.concatenate([feat_a, feat_b], axis=1)

    def forward_train(self, x):
        """Training pass; returns (probs, logits_a, logits_b) with caches armed."""
        logits_a, _ = self.backbone_a.forward(x, train=True)
        logits_b, _ = self.backbone_b.forward(x, train=True)
        return self.fuse(logits_a, logits_b), logits_a, logits_b

    def backward(self, dlogits_a, dlogits_b):
        self.backbone_a.backward(dlogits_a)
        self.backbone_b.backward(dlogits_b)

    def predict_probs(self, x) -> np.ndarray:
        """Evaluation-mode fused probabilities for a preprocessed batch."""
        logits_a, _ = self.backbone_a.forward(x, train=False)
        logits_b, _ = self.backbone_b.forward(x, train=False)
        return self.fuse(logits_a, logits_b)

    def params(self):
        return self.backbone_a.params() + self.backbone_b.params()

    def buffers(self):
        return self.backbone_a.buffers() + self.backbone_b.buffers()

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def state_arrays(self):
        """(params dict, buffers dict) of live arrays, keyed by name."""
        params = {p.name: p.data for p in self.params()}
        buffers = {name: arr for name, arr in self.buffers()}
        return params, buffers

    def load_state(self, params: dict, buffers: dict):
        from .errors import IncompatibleConfig
        own_params, own_buffers = self.state_arrays()
        if set(own_params) != set(params) or set(own_buffers) != set(buffers):
            raise IncompatibleConfig("checkpoint parameter names do not match "
                                     "the model architecture")
        for name, arr in own_params.items():
            stored = np.asarray(params[name], dtype=np.float64)
            if stored.shape != arr.shape:
                raise IncompatibleConfig(
                    f"parameter {name} has shape {stored.shape}, "
                    f"model expects {arr.shape}")
            arr[...] = stored
        for name, arr in own_buffers.items():
            stored = np.asarray(buffers[name], dtype=np.float64)
            if stored.shape != arr.shape:
                raise IncompatibleConfig(
                    f"buffer {name} has shape {stored.shape}, "
                    f"model expects {arr.shape}")
            arr[...] = stored


def ensemble_forward(model: EnsembleModel, x: np.ndarray):
    """Convenience wrapper: evaluation-mode full ensemble pass."""
    return model.forward(x, train=False)


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator,
                   prefix: str) -> Backbone:
    return Backbone(cfg, rng, prefix)


def build_ensemble(variant: str, class_set, fusion: str = MEAN_PROB,
                   seed: int = 0, input_size: Optional[int] = None) -> EnsembleModel:
    """Construct a seeded ensemble; variant is "full" (121+50) or "tiny"."""
    k = len(class_set)
    if variant == "full":
        size = input_size if input_size is not None else 224
        cfg_a = densenet121_config(k, size)
        cfg_b = resnet50_config(k, size)
    elif variant == "tiny":
        size = input_size if input_size is not None else 32
        cfg_a = tiny_densenet_config(k, size)
        cfg_b = tiny_resnet_config(k, size)
    else:
        raise ValueError(f"unknown model variant {variant!r}")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0xA11,))))
    backbone_a = build_backbone(cfg_a, rng, "backbone_a")
    backbone_b = build_backbone(cfg_b, rng, "backbone_b")
    return EnsembleModel(backbone_a, backbone_b, class_set, fusion)


def extract_features(model: EnsembleModel, frames, stats, input_size: int,
                     batch_size: int = 32, cache=None):
    """Ensemble features for a list of frames along the deterministic path.

    Returns (features N x (dimA+dimB), labels N).
    """
    from .preprocess import iter_eval_batches
    feats = []
    labels = []
    for x, y in iter_eval_batches(frames, stats, (input_size, input_size),
                                  batch_size, cache=cache):
        _, _, _, f = model.forward(x, train=False)
        feats.append(f)
        labels.append(y)
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)
