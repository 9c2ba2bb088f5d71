"""The two 3D CNNs: a 9-class quantity classifier and a multi-input
hourglass simulator, plus the composite simulation loss.

Classifier: five conv blocks (conv k3 pad 1 -> leaky ReLU -> batch norm ->
max pool 2) taking 32x32x64 down to 1x1x2 while channels grow 1 -> 256,
then two fully connected layers and a per-class sigmoid.

Simulator: one five-block encoder per history grid (valid k3, valid k3,
padded k3 + pool 2, valid k5, valid k5) shrinking 32x32x64 to 6x6x22 at 512
channels; branch encodings are averaged elementwise and six transposed-conv
blocks decode back to a single-channel 32x32x64 grid through a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch, WrongHistoryLength

# (kernel, stride, padding, pool_after) per encoder block; the middle block
# is shape-preserving then pooled, the rest are valid convolutions.
ENCODER_BLOCKS = ((3, 1, 0, False), (3, 1, 0, False), (3, 1, 1, True),
                  (5, 1, 0, False), (5, 1, 0, False))
# (kernel, stride, padding) per decoder tconv block, excluding the final
# shape-preserving k=1 block.
DECODER_BLOCKS = ((5, 1, 0), (5, 1, 0), (2, 2, 0), (3, 1, 0), (3, 1, 0))

ENCODER_OUT_SPATIAL = (6, 6, 22)
GRID_SHAPE = (32, 32, 64)


@dataclass
class ClassifierConfig:
    num_classes: int = 9
    channels: tuple = (16, 32, 64, 128, 256)
    fc_width: int = 128
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    placeholder_type: str | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.num_classes != 9:
            raise ValueError("the quantity classifier is a 9-class model")
        if len(self.channels) != 5:
            raise ValueError("classifier needs exactly 5 conv blocks")


@dataclass
class SimulatorConfig:
    n_inputs: int = 4
    enc_channels: tuple = (32, 64, 128, 256, 512)
    dec_channels: tuple = (256, 128, 64, 32, 16)
    alpha: float = 0.1
    share_encoders: bool = False
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    placeholder_type: str | None = None

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.dec_channels = tuple(int(c) for c in self.dec_channels)
        if len(self.enc_channels) != 5:
            raise ValueError("simulator encoder needs exactly 5 blocks")
        if len(self.dec_channels) != 5:
            raise ValueError("simulator decoder needs 5 widths plus the final block")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.n_inputs < 1:
            raise ValueError("n_inputs must be >= 1")


def _uniform(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Model:
    """Named-parameter container shared by both networks."""

    kind = "model"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True

    def state_arrays(self):
        """Ordered name -> array view of all weights and running stats."""
        out = {name: p.data for name, p in self.params.items()}
        for name, buf in self.buffers.items():
            out[name] = buf
        return out

    def load_state(self, arrays):
        for name, p in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise ShapeMismatch(f"checkpoint param {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        for name in self.buffers:
            self.buffers[name] = np.asarray(arrays[name]).astype(self.buffers[name].dtype)

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for name in self.buffers:
            self.buffers[name] = self.buffers[name].astype(dtype)
        return self

    def _add_conv(self, rng, name, c_in, c_out, k, dtype, transposed=False):
        wshape = (c_in, c_out, k, k, k) if transposed else (c_out, c_in, k, k, k)
        fan_in = c_in * k ** 3
        self.params[f"{name}.w"] = Tensor(_uniform(rng, wshape, fan_in, dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True)

    def _add_bn(self, name, c, dtype):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.buffers[f"{name}.rm"] = np.zeros(c, dtype=dtype)
        self.buffers[f"{name}.rv"] = np.ones(c, dtype=dtype)

    def _bn(self, x, name, training):
        cfg = self.config
        return ad.batchnorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                            self.buffers[f"{name}.rm"], self.buffers[f"{name}.rv"],
                            training, momentum=cfg.bn_momentum, eps=cfg.bn_eps)


class Classifier(Model):
    kind = "classifier"

    def __init__(self, config: ClassifierConfig = None, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.config = config or ClassifierConfig()
        rng = np.random.default_rng(seed)
        cfg = self.config
        c_prev = 1
        for i, c in enumerate(cfg.channels):
            self._add_conv(rng, f"block{i}", c_prev, c, 3, dtype)
            self._add_bn(f"block{i}.bn", c, dtype)
            c_prev = c
        # 32x32x64 pooled five times -> 1x1x2 spatial
        flat = cfg.channels[-1] * 2
        self.params["fc1.w"] = Tensor(_uniform(rng, (flat, cfg.fc_width), flat, dtype), requires_grad=True)
        self.params["fc1.b"] = Tensor(_uniform(rng, (cfg.fc_width,), flat, dtype), requires_grad=True)
        self.params["fc2.w"] = Tensor(
            _uniform(rng, (cfg.fc_width, cfg.num_classes), cfg.fc_width, dtype), requires_grad=True)
        self.params["fc2.b"] = Tensor(
            _uniform(rng, (cfg.num_classes,), cfg.fc_width, dtype), requires_grad=True)

    def forward(self, x, training=False):
        """Map a (B, 1, 32, 32, 64) batch to (B, 9) scores in (0, 1)."""
        x = ad.as_tensor(x)
        if x.data.ndim != 5 or x.shape[1] != 1:
            raise ShapeMismatch(f"classifier expects (B, 1, X, Y, Z), got {x.shape}")
        cfg = self.config
        h = x
        for i in range(5):
            h = ad.conv3d(h, self.params[f"block{i}.w"], self.params[f"block{i}.b"],
                          stride=1, padding=1)
            h = ad.leaky_relu(h, cfg.leaky_slope)
            h = self._bn(h, f"block{i}.bn", training)
            h = ad.maxpool3d(h, 2)
        B = h.shape[0]
        h = ad.reshape(h, (B, -1))
        h = ad.dense(h, self.params["fc1.w"], self.params["fc1.b"])
        h = ad.leaky_relu(h, cfg.leaky_slope)
        h = ad.dense(h, self.params["fc2.w"], self.params["fc2.b"])
        return ad.sigmoid(h)


class Simulator(Model):
    kind = "simulator"

    def __init__(self, config: SimulatorConfig = None, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.config = config or SimulatorConfig()
        rng = np.random.default_rng(seed)
        cfg = self.config
        n_branches = 1 if cfg.share_encoders else cfg.n_inputs
        for b in range(n_branches):
            c_prev = 1
            for i, ((k, _, _, _), c) in enumerate(zip(ENCODER_BLOCKS, cfg.enc_channels)):
                self._add_conv(rng, f"enc{b}.block{i}", c_prev, c, k, dtype)
                self._add_bn(f"enc{b}.block{i}.bn", c, dtype)
                c_prev = c
        c_prev = cfg.enc_channels[-1]
        for i, ((k, _, _), c) in enumerate(zip(DECODER_BLOCKS, cfg.dec_channels)):
            self._add_conv(rng, f"dec{i}", c_prev, c, k, dtype, transposed=True)
            self._add_bn(f"dec{i}.bn", c, dtype)
            c_prev = c
        self._add_conv(rng, "dec5", c_prev, 1, 1, dtype, transposed=True)

    def encode_branch(self, x, branch=0, training=False):
        """Run one history grid through its encoder sub-network."""
        cfg = self.config
        b = 0 if cfg.share_encoders else branch
        h = ad.as_tensor(x)
        for i, (k, stride, pad, pool) in enumerate(ENCODER_BLOCKS):
            h = ad.conv3d(h, self.params[f"enc{b}.block{i}.w"],
                          self.params[f"enc{b}.block{i}.b"], stride=stride, padding=pad)
            h = ad.leaky_relu(h, cfg.leaky_slope)
            h = self._bn(h, f"enc{b}.block{i}.bn", training)
            if pool:
                h = ad.maxpool3d(h, 2)
        return h

    def decode(self, h, training=False):
        cfg = self.config
        for i, (k, stride, pad) in enumerate(DECODER_BLOCKS):
            h = ad.tconv3d(h, self.params[f"dec{i}.w"], self.params[f"dec{i}.b"],
                           stride=stride, padding=pad)
            h = ad.leaky_relu(h, cfg.leaky_slope)
            h = self._bn(h, f"dec{i}.bn", training)
        h = ad.tconv3d(h, self.params["dec5.w"], self.params["dec5.b"])
        return ad.sigmoid(h)

    def forward(self, history, training=False):
        """Map ``n_inputs`` grids of shape (B, 1, 32, 32, 64) to the simulated
        next grid of the same shape, entries in (0, 1)."""
        cfg = self.config
        if len(history) != cfg.n_inputs:
            raise WrongHistoryLength(
                f"expected {cfg.n_inputs} history grids, got {len(history)}")
        encodings = [self.encode_branch(g, branch=i, training=training)
                     for i, g in enumerate(history)]
        avg = encodings[0]
        for e in encodings[1:]:
            avg = avg + e
        avg = avg * (1.0 / cfg.n_inputs)
        return self.decode(avg, training=training)


def predict_class(scores):
    """Argmax class index; ties break to the lowest index.

    Accepts a single score vector or a batch; returns int or int array.
    """
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if arr.ndim == 1:
        return int(np.argmax(arr))
    return np.argmax(arr, axis=-1)


def composite_loss(pred, target, classifier: Classifier, labels, alpha,
                   ce_mean=False, l2_scale=1.0):
    """L2 term plus alpha times frozen-classifier cross entropy.

    Gradients flow through both terms into ``pred`` only; the classifier is
    evaluated in inference mode and its parameters must be frozen by the
    caller. Returns (loss, l2_value, ce_value).
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    l2 = ad.l2_loss(pred, t)
    if l2_scale != 1.0:
        l2 = l2 * l2_scale
    if alpha == 0.0:
        return l2, float(l2.data), 0.0
    scores = classifier.forward(pred, training=False)
    ce = ad.cross_entropy(scores, labels, mean=ce_mean)
    loss = l2 + ce * alpha
    return loss, float(l2.data), float(ce.data)
