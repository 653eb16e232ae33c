"""Network builders: generators, patch discriminators, projection heads,
and the desk-scale embedder used for metrics and retrieval.

All parameters live in plain dicts of autodiff Tensors so that
checkpointing and the optimizer can stay format-agnostic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    conv2d,
    conv_transpose2d,
    dropout,
    instance_norm,
)

WEIGHT_INIT_STD = 0.02
NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"S2FCKPT1"
CHECKPOINT_VERSION = 1


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class _Net:
    """Shared parameter bookkeeping for all network classes."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self):
        return list(self.params.items())

    def load_params(self, values: dict[str, np.ndarray]):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"checkpoint/architecture mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            if self.params[name].shape != arr.shape:
                raise ValueError(
                    f"checkpoint/architecture mismatch: {name} has shape {arr.shape}, "
                    f"expected {self.params[name].shape}")
            self.params[name].data = arr.astype(self.params[name].data.dtype)


class _ConvBlock:
    def __init__(self, net: _Net, name: str, in_ch: int, out_ch: int, k: int,
                 stride: int, padding: int, rng, dtype, norm: bool, act: str):
        self.stride = stride
        self.padding = padding
        self.norm = norm
        self.act = act
        self.weight = net._param(f"{name}.weight",
                                 rng.normal(0.0, WEIGHT_INIT_STD, (out_ch, in_ch, k, k)).astype(dtype))
        self.bias = net._param(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        if norm:
            self.gamma = net._param(f"{name}.gamma", np.ones((1, out_ch, 1, 1), dtype=dtype))
            self.beta = net._param(f"{name}.beta", np.zeros((1, out_ch, 1, 1), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        if self.norm:
            y = instance_norm(y, self.gamma, self.beta, eps=NORM_EPS)
        if self.act == "relu":
            y = y.relu()
        elif self.act == "lrelu":
            y = y.leaky_relu(0.2)
        elif self.act == "tanh":
            y = y.tanh()
        return y


class _UpBlock:
    """Stride-2 transposed conv (k=4, p=1) that exactly doubles H and W."""

    def __init__(self, net: _Net, name: str, in_ch: int, out_ch: int, rng, dtype):
        self.weight = net._param(f"{name}.weight",
                                 rng.normal(0.0, WEIGHT_INIT_STD, (in_ch, out_ch, 4, 4)).astype(dtype))
        self.bias = net._param(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self.gamma = net._param(f"{name}.gamma", np.ones((1, out_ch, 1, 1), dtype=dtype))
        self.beta = net._param(f"{name}.beta", np.zeros((1, out_ch, 1, 1), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = conv_transpose2d(x, self.weight, self.bias, stride=2, padding=1)
        y = instance_norm(y, self.gamma, self.beta, eps=NORM_EPS)
        return y.relu()


class _ResBlock:
    def __init__(self, net: _Net, name: str, ch: int, rng, dtype, dropout_p: float = 0.0):
        self.dropout_p = dropout_p
        self.c1 = _ConvBlock(net, f"{name}.c1", ch, ch, 3, 1, 1, rng, dtype, norm=True, act="relu")
        self.c2 = _ConvBlock(net, f"{name}.c2", ch, ch, 3, 1, 1, rng, dtype, norm=True, act="none")

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        y = self.c1(x)
        if self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("residual dropout is enabled but no RNG was provided")
            y = dropout(y, self.dropout_p, rng)
        return x + self.c2(y)


@dataclass
class FeatureStack:
    """Per-tap-layer sampled patch features, with the locations that
    produced them so the translated-image pass can reuse the same ones."""

    layers: list = field(default_factory=list)  # (layer_index, locations, features (N, L, C))

    def location_map(self) -> dict[int, np.ndarray]:
        return {layer: locs for layer, locs, _ in self.layers}


class GeneratorNet(_Net):
    """Encoder / residual / decoder image translator with tanh output.

    Feature stages are indexable for patch taps:
      0 = the input image itself, 1 = stem conv, 2..3 = the two
      downsampling convs, 4..3+n_res = each residual block output.
    """

    def __init__(self, image_size: int, base_channels: int, n_res_blocks: int,
                 tap_points, rng, dtype=np.float32, dropout_p: float = 0.0,
                 identity_mode: bool = False):
        super().__init__()
        self.image_size = image_size
        self.base_channels = base_channels
        self.n_res_blocks = n_res_blocks
        self.dropout_p = dropout_p
        self.identity_mode = identity_mode
        self.encoder_depth = 3 + n_res_blocks  # highest valid tap index

        tap_points = list(tap_points)
        if any(b <= a for a, b in zip(tap_points, tap_points[1:])):
            raise ValueError(f"tap points must be strictly increasing, got {tap_points}")
        if tap_points and (tap_points[0] < 0 or tap_points[-1] > self.encoder_depth):
            raise ValueError(
                f"tap point outside encoder depth: {tap_points} (valid 0..{self.encoder_depth})")
        self.tap_points = tap_points

        b = base_channels
        self.stem = _ConvBlock(self, "stem", 3, b, 7, 1, 3, rng, dtype, norm=True, act="relu")
        self.down1 = _ConvBlock(self, "down1", b, 2 * b, 3, 2, 1, rng, dtype, norm=True, act="relu")
        self.down2 = _ConvBlock(self, "down2", 2 * b, 4 * b, 3, 2, 1, rng, dtype, norm=True, act="relu")
        self.res = [_ResBlock(self, f"res{i}", 4 * b, rng, dtype, dropout_p)
                    for i in range(n_res_blocks)]
        self.up1 = _UpBlock(self, "up1", 4 * b, 2 * b, rng, dtype)
        self.up2 = _UpBlock(self, "up2", 2 * b, b, rng, dtype)
        self.head = _ConvBlock(self, "head", b, 3, 7, 1, 3, rng, dtype, norm=False, act="tanh")

        # channel width at each feature stage, for projection-head sizing
        self.stage_channels = [3, b, 2 * b, 4 * b] + [4 * b] * n_res_blocks

    def _encoder_stages(self, x: Tensor, upto: int, rng=None):
        feats = [x]
        h = x
        stages = [self.stem, self.down1, self.down2] + self.res
        for i, stage in enumerate(stages, start=1):
            if i > upto:
                break
            h = stage(h, rng) if isinstance(stage, _ResBlock) else stage(h)
            feats.append(h)
        return feats

    def forward(self, x: Tensor, rng=None) -> Tensor:
        if self.identity_mode:
            return x
        h = self._encoder_stages(x, self.encoder_depth, rng)[-1]
        h = self.up1(h)
        h = self.up2(h)
        return self.head(h)

    def forward_with_taps(self, x: Tensor, rng=None):
        """One pass returning both the translation and the tap features."""
        feats = self._encoder_stages(x, self.encoder_depth, rng)
        taps = {i: feats[i] for i in self.tap_points}
        if self.identity_mode:
            return x, taps
        h = self.up1(feats[-1])
        h = self.up2(h)
        return self.head(h), taps

    def encode(self, x: Tensor, rng=None) -> dict[int, Tensor]:
        """Encoder-only pass up to the deepest tap point."""
        if not self.tap_points:
            raise ValueError("generator has no tap points configured")
        feats = self._encoder_stages(x, self.tap_points[-1], rng)
        return {i: feats[i] for i in self.tap_points}

    __call__ = forward


class DiscriminatorNet(_Net):
    """Patch discriminator: a grid of realism logits, one per receptive field."""

    def __init__(self, image_size: int, base_channels: int, n_layers: int, rng,
                 in_channels: int = 3, dtype=np.float32):
        super().__init__()
        self.image_size = image_size
        self.base_channels = base_channels
        self.n_layers = n_layers
        self.in_channels = in_channels
        self.blocks = []
        ch_in = in_channels
        for i in range(n_layers):
            ch_out = base_channels * min(2 ** i, 8)
            stride = 2 if i < n_layers - 1 else 1
            self.blocks.append(_ConvBlock(self, f"d{i}", ch_in, ch_out, 4, stride, 1,
                                          rng, dtype, norm=(i > 0), act="lrelu"))
            ch_in = ch_out
        self.out = _ConvBlock(self, "out", ch_in, 1, 4, 1, 1, rng, dtype, norm=False, act="none")

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for blk in self.blocks:
            h = blk(h)
        return self.out(h)

    __call__ = forward


class ProjectionHeads(_Net):
    """One two-layer perceptron per tap layer, mapping sampled patch
    features to unit-norm embeddings of a common width."""

    def __init__(self, input_channels, embed_dim: int, rng, dtype=np.float32):
        super().__init__()
        self.input_channels = list(input_channels)
        self.embed_dim = embed_dim
        self.weights = []
        for i, c in enumerate(self.input_channels):
            w1 = self._param(f"h{i}.w1", rng.normal(0.0, WEIGHT_INIT_STD, (c, embed_dim)).astype(dtype))
            b1 = self._param(f"h{i}.b1", np.zeros(embed_dim, dtype=dtype))
            w2 = self._param(f"h{i}.w2", rng.normal(0.0, WEIGHT_INIT_STD, (embed_dim, embed_dim)).astype(dtype))
            b2 = self._param(f"h{i}.b2", np.zeros(embed_dim, dtype=dtype))
            self.weights.append((w1, b1, w2, b2))

    def project_one(self, index: int, feats: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.weights[index]
        if feats.shape[-1] != w1.shape[0]:
            raise ShapeError(
                f"projection head {index} expects width {w1.shape[0]}, got {feats.shape[-1]}")
        n, loc, _ = feats.shape
        flat = feats.reshape(n * loc, feats.shape[-1])
        h = (flat @ w1 + b1).relu()
        out = h @ w2 + b2
        sq = (out * out).sum(axis=-1, keepdims=True)
        unit = out / (sq + 1e-24).sqrt()
        return unit.reshape(n, loc, self.embed_dim)


class EmbedderNet(_Net):
    """Four-block conv classifier; pooled features double as the metric
    and retrieval embedding."""

    def __init__(self, image_size: int, base_channels: int, n_classes: int, rng,
                 dtype=np.float32):
        super().__init__()
        self.image_size = image_size
        self.base_channels = base_channels
        self.n_classes = n_classes
        self.trained = False
        b = base_channels
        chans = [3, b, 2 * b, 4 * b, 4 * b]
        self.blocks = [
            _ConvBlock(self, f"e{i}", chans[i], chans[i + 1], 3, 2, 1, rng, dtype,
                       norm=(i > 0), act="lrelu")
            for i in range(4)
        ]
        self.feature_dim = chans[-1]
        self.fc_w = self._param("fc.weight",
                                rng.normal(0.0, WEIGHT_INIT_STD, (self.feature_dim, n_classes)).astype(dtype))
        self.fc_b = self._param("fc.bias", np.zeros(n_classes, dtype=dtype))

    def features(self, x: Tensor) -> Tensor:
        h = x
        for blk in self.blocks:
            h = blk(h)
        return h.mean(axis=(2, 3))

    def logits(self, x: Tensor) -> Tensor:
        return self.features(x) @ self.fc_w + self.fc_b

    def probabilities(self, x: Tensor) -> Tensor:
        return self.logits(x).softmax(axis=-1)


# -- builders -----------------------------------------------------------------


def build_generator(image_size: int, base_channels: int, n_res_blocks: int,
                    tap_points, rng=None, seed: int = 0, dtype=np.float32,
                    dropout_p: float = 0.0, identity_mode: bool = False) -> GeneratorNet:
    if not _is_power_of_two(image_size) or image_size < 32:
        raise ValueError(f"image_size must be a power of two >= 32, got {image_size}")
    if n_res_blocks < 1:
        raise ValueError(f"n_res_blocks must be >= 1, got {n_res_blocks}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return GeneratorNet(image_size, base_channels, n_res_blocks, tap_points, rng,
                        dtype=dtype, dropout_p=dropout_p, identity_mode=identity_mode)


def default_tap_points(n_res_blocks: int) -> list[int]:
    """Input image, both downsampling stages, and the middle residual block."""
    return [0, 2, 3, 3 + (n_res_blocks + 1) // 2]


def build_discriminator(image_size: int, base_channels: int, n_layers: int,
                        rng=None, seed: int = 0, in_channels: int = 3,
                        dtype=np.float32) -> DiscriminatorNet:
    if not _is_power_of_two(image_size) or image_size < 32:
        raise ValueError(f"image_size must be a power of two >= 32, got {image_size}")
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    return DiscriminatorNet(image_size, base_channels, n_layers, rng,
                            in_channels=in_channels, dtype=dtype)


def build_projection_heads(gen: GeneratorNet, embed_dim: int = 256, rng=None,
                           seed: int = 0, dtype=np.float32) -> ProjectionHeads:
    channels = [gen.stage_channels[i] for i in gen.tap_points]
    rng = rng if rng is not None else np.random.default_rng(seed)
    return ProjectionHeads(channels, embed_dim, rng, dtype=dtype)


def build_embedder(image_size: int, base_channels: int, n_classes: int,
                   rng=None, seed: int = 0, dtype=np.float32) -> EmbedderNet:
    rng = rng if rng is not None else np.random.default_rng(seed)
    return EmbedderNet(image_size, base_channels, n_classes, rng, dtype=dtype)


# -- patch feature sampling ------------------------------------------------------


def sample_locations(taps: dict[int, Tensor], n_locations: int,
                     rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Draw the same number of spatial indices (without replacement) for
    every tap layer. The returned map is reused verbatim for the
    translated-image pass so positives line up location-by-location."""
    out = {}
    for layer in sorted(taps):
        h, w = taps[layer].shape[2], taps[layer].shape[3]
        avail = h * w
        if n_locations < 1 or n_locations > avail:
            raise ValueError(
                f"n_locations={n_locations} invalid for tap layer {layer} with {avail} locations")
        if n_locations == avail:
            out[layer] = np.arange(avail, dtype=np.intp)
        else:
            out[layer] = np.sort(rng.choice(avail, size=n_locations, replace=False)).astype(np.intp)
    return out


def gather_patch_features(taps: dict[int, Tensor],
                          locations: dict[int, np.ndarray]) -> FeatureStack:
    """Pull per-location feature vectors out of tap feature maps."""
    stack = FeatureStack()
    for layer in sorted(taps):
        feat = taps[layer]
        n, c, h, w = feat.shape
        locs = locations[layer]
        if locs.size and (locs.min() < 0 or locs.max() >= h * w):
            raise ShapeError(f"location index out of bounds for {h}x{w} feature map")
        flat = feat.reshape(n, c, h * w)
        picked = flat.index_select(2, locs).transpose((0, 2, 1))  # (N, L, C)
        stack.layers.append((layer, locs, picked))
    return stack


def encode_patch_features(gen: GeneratorNet, image: Tensor, n_locations: int,
                          rng: np.random.Generator | None = None,
                          locations: dict[int, np.ndarray] | None = None) -> FeatureStack:
    """Encoder pass + location sampling. Pass ``locations`` (from a prior
    stack's ``location_map()``) to reuse the exact same spatial indices."""
    taps = gen.encode(image)
    if locations is None:
        if rng is None:
            raise ValueError("encode_patch_features needs an RNG when locations are not given")
        locations = sample_locations(taps, n_locations, rng)
    return gather_patch_features(taps, locations)


def project_features(heads: ProjectionHeads, stack: FeatureStack) -> FeatureStack:
    """Map a raw feature stack through the per-layer heads; every output
    embedding is L2-normalized."""
    if len(stack.layers) != len(heads.weights):
        raise ShapeError(
            f"stack has {len(stack.layers)} layers but heads expect {len(heads.weights)}")
    out = FeatureStack()
    for i, (layer, locs, feats) in enumerate(stack.layers):
        out.layers.append((layer, locs, heads.project_one(i, feats)))
    return out


# -- checkpoint container ---------------------------------------------------------
#
# Layout: magic, u32 header length, JSON header, then raw little-endian
# parameter blocks in header order. The header records architecture
# hyperparameters and optional RNG state, so a file is self-describing.


def save_checkpoint(path, kind: str, arch: dict, param_groups: dict[str, dict[str, Tensor]],
                    rng_state=None, extra: dict | None = None):
    entries = []
    blobs = []
    for group, params in param_groups.items():
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data)
            code = "<f4" if arr.dtype == np.float32 else "<f8"
            entries.append({"name": f"{group}/{name}", "shape": list(arr.shape), "dtype": code})
            blobs.append(arr.astype(code).tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": arch,
        "rng_state": rng_state,
        "extra": extra or {},
        "params": entries,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (header dict, {group: {name: ndarray}})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        groups: dict[str, dict[str, np.ndarray]] = {}
        for entry in header["params"]:
            group, name = entry["name"].split("/", 1)
            shape = tuple(entry["shape"])
            dt = np.dtype(entry["dtype"])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
            arr = np.frombuffer(fh.read(n_bytes), dtype=dt).reshape(shape)
            groups.setdefault(group, {})[name] = arr.copy()
    return header, groups
