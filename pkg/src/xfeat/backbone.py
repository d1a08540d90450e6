"""Featherweight encoder, pyramid fusion and reliability head.

The encoder triples the channel count while halving resolution:
six blocks with channels [4, 8, 24, 64, 64, 128].  Pyramid taps at 1/8,
1/16 and 1/32 are projected to the descriptor width, upsampled and summed,
then a three-layer fusion block yields the dense descriptor map F.  A 1x1
conv on the fusion block's penultimate representation regresses the
reliability logits.  The reference descriptor pathway has exactly 23 convs
(16 encoder + 3 projections + 3 fusion + 1 reliability).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (
    Tensor, FlopCounter, conv2d, batchnorm2d, bilinear_resize, pad_to_multiple,
)


@dataclass
class BackboneConfig:
    block_channels: list = field(default_factory=lambda: [4, 8, 24, 64, 64, 128])
    block_layer_counts: list = field(default_factory=lambda: [2, 2, 3, 3, 3, 3])
    block_strides: list = field(default_factory=lambda: [2, 2, 2, 2, 2, 1])
    fusion_layers: int = 3
    descriptor_dim: int = 64
    keypoint_hidden: int = 64
    use_skip: bool = True

    def validate(self):
        if not (len(self.block_channels) == len(self.block_layer_counts)
                == len(self.block_strides) == 6):
            raise ValueError("backbone needs exactly six blocks")
        if min(self.block_channels) < 1 or self.fusion_layers != 3:
            raise ValueError("invalid backbone config")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def reduced_config(**kw) -> BackboneConfig:
    """Small-channel config used for gradient checks and desk-scale training."""
    return BackboneConfig(block_channels=[2, 4, 6, 8, 8, 16], **kw)


class XFeatModel:
    """Parameter and buffer container for the whole network.

    `params` maps name -> Tensor (requires_grad), `state` holds the BN
    running statistics as plain arrays.  Forward passes are define-by-run
    functions over this container.
    """

    def __init__(self, config: BackboneConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        self.training = False

    def parameters(self):
        return self.params

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def conv_layer_names(self, pathway="descriptor"):
        """Conv layers per pathway, in forward order (for introspection)."""
        names = [n[:-2] for n in self.params if n.endswith(".w") and "fc" not in n]
        if pathway == "descriptor":
            return [n for n in names if not n.startswith("kp.") and not n.startswith("ref.")]
        if pathway == "keypoint":
            return [n for n in names if n.startswith("kp.")]
        raise ValueError(pathway)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _add_conv(model, rng, name, c_in, c_out, k, with_bn=True):
    dt = model.dtype
    fan_in = c_in * k * k
    model.params[name + ".w"] = Tensor(
        _kaiming_uniform(rng, (c_out, c_in, k, k), fan_in, dt), requires_grad=True)
    model.params[name + ".b"] = Tensor(np.zeros(c_out, dtype=dt), requires_grad=True)
    if with_bn:
        model.params[name + ".gamma"] = Tensor(np.ones(c_out, dtype=dt), requires_grad=True)
        model.params[name + ".beta"] = Tensor(np.zeros(c_out, dtype=dt), requires_grad=True)
        model.state[name + ".mean"] = np.zeros(c_out, dtype=dt)
        model.state[name + ".var"] = np.ones(c_out, dtype=dt)


def _add_linear(model, rng, name, d_in, d_out):
    dt = model.dtype
    model.params[name + ".w"] = Tensor(
        _kaiming_uniform(rng, (d_in, d_out), d_in, dt), requires_grad=True)
    model.params[name + ".b"] = Tensor(np.zeros(d_out, dtype=dt), requires_grad=True)


def build_model(config: BackboneConfig | None = None, rng_seed=0, dtype=np.float32) -> XFeatModel:
    """Create the full model with seeded Kaiming-uniform initialization."""
    config = config or BackboneConfig()
    model = XFeatModel(config, dtype=dtype)
    rng = np.random.default_rng(rng_seed)
    d = config.descriptor_dim

    c_prev = 1
    for bi, (c, layers, _) in enumerate(zip(config.block_channels,
                                            config.block_layer_counts,
                                            config.block_strides)):
        for li in range(layers):
            _add_conv(model, rng, f"enc.b{bi + 1}.l{li + 1}", c_prev if li == 0 else c, c, 3)
        c_prev = c

    _add_conv(model, rng, "proj8", config.block_channels[2], d, 1)
    _add_conv(model, rng, "proj16", config.block_channels[3], d, 1)
    _add_conv(model, rng, "proj32", config.block_channels[5], d, 1)
    _add_conv(model, rng, "fuse.l1", d, d, 3)
    _add_conv(model, rng, "fuse.l2", d, d, 3)
    _add_conv(model, rng, "fuse.l3", d, d, 3, with_bn=False)  # plain conv, signed output
    _add_conv(model, rng, "rel", d, 1, 1, with_bn=False)

    kh = config.keypoint_hidden
    _add_conv(model, rng, "kp.l1", 64, kh, 1)
    _add_conv(model, rng, "kp.l2", kh, kh, 1)
    _add_conv(model, rng, "kp.l3", kh, kh, 1)
    _add_conv(model, rng, "kp.l4", kh, 65, 1, with_bn=False)

    # match refinement MLP: concat of two descriptors -> 8x8 offset logits
    _add_linear(model, rng, "ref.fc1", 2 * d, 128)
    _add_linear(model, rng, "ref.fc2", 128, 128)
    _add_linear(model, rng, "ref.fc3", 128, 64)
    return model


def basic_layer(model, name, x, stride=1, counter=None, relu=True):
    """conv -> BN -> ReLU unit (BN/ReLU optional for plain output convs)."""
    p = model.params
    k = p[name + ".w"].shape[2]
    out = conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride,
                 padding=(k - 1) // 2, counter=counter, name=name)
    if name + ".gamma" in p:
        out = batchnorm2d(out, p[name + ".gamma"], p[name + ".beta"],
                          model.state[name + ".mean"], model.state[name + ".var"],
                          training=model.training)
    if relu:
        out = out.relu()
    return out


def forward_encoder(model: XFeatModel, image: Tensor, counter: FlopCounter | None = None):
    """Run the six encoder blocks; returns taps at 1/8, 1/16 and 1/32.

    `image` must be N x 1 x H x W with H, W multiples of 32.
    """
    n, c, h, w = image.shape
    if c != 1:
        raise ValueError("encoder expects grayscale input")
    if h % 32 or w % 32:
        raise ValueError("input must be padded to a multiple of 32")
    cfg = model.config
    x = image
    taps = {}
    for bi, (layers, stride) in enumerate(zip(cfg.block_layer_counts, cfg.block_strides)):
        for li in range(layers):
            x = basic_layer(model, f"enc.b{bi + 1}.l{li + 1}", x,
                            stride=stride if li == 0 else 1, counter=counter)
        if bi == 2:
            taps["level8"] = x
        elif bi == 3:
            taps["level16"] = x
        elif bi == 5:
            taps["level32"] = x
    return taps


def fuse_pyramid(model: XFeatModel, enc: dict, counter: FlopCounter | None = None):
    """Project, upsample and sum the pyramid levels; emit F and R logits."""
    p8 = basic_layer(model, "proj8", enc["level8"], counter=counter)
    p16 = basic_layer(model, "proj16", enc["level16"], counter=counter)
    p32 = basic_layer(model, "proj32", enc["level32"], counter=counter)
    h8, w8 = p8.shape[2], p8.shape[3]
    x = p8 + bilinear_resize(p16, h8, w8) + bilinear_resize(p32, h8, w8)
    x = basic_layer(model, "fuse.l1", x, counter=counter)
    x = basic_layer(model, "fuse.l2", x, counter=counter)
    if model.config.use_skip:
        x = x + p8
    r_logits = basic_layer(model, "rel", x, counter=counter, relu=False)
    feat = basic_layer(model, "fuse.l3", x, counter=counter, relu=False)
    return feat, r_logits


def forward_features(model: XFeatModel, image: np.ndarray | Tensor,
                     counter: FlopCounter | None = None):
    """Full descriptor pathway on an unpadded grayscale image batch.

    Pads to a multiple of 32 with edge replication, then crops F and the
    reliability logits back to ceil(H/8) x ceil(W/8).
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 2:
        data = data[None, None]
    elif data.ndim == 3:
        data = data[:, None]
    h, w = data.shape[2], data.shape[3]
    x = Tensor(pad_to_multiple(data.astype(model.dtype), 32))
    enc = forward_encoder(model, x, counter)
    feat, r_logits = fuse_pyramid(model, enc, counter)
    ch, cw = -(-h // 8), -(-w // 8)
    return feat.crop2d(ch, cw), r_logits.crop2d(ch, cw)
