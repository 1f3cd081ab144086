"""Residual fully-convolutional smoothing network and its model file format.

Two presets:

PAPER26
    conv, conv, stride-2 conv, 10 residual blocks (two dilated convs each,
    dilations 1,1,2,2,4,4,8,8,16,1), stride-2 deconv, conv, final conv to
    3 channels. 26 convolutions, 64 feature maps.
TOY8
    8 convolutions with 16 feature maps and dilations 1,1,2,2,4,4,1,1 (the
    middle four grouped as two residual blocks), no resampling.

Every convolution except the last is followed by normalization and ReLU.
The last convolution is zero-initialized and its output is added to the
input image, so an untrained network is the identity.

Model file (little-endian)::

    b"USIS" | u32 version | u32 preset tag | u32 layer count
    per layer: u32 kind | u32 in_ch | u32 out_ch | u32 stride | u32 dilation
               | u32 tensor count | per tensor: u32 ndim | u32 dims... | f32 data
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .imagecore import Image, as_array, atomic_write_bytes

MAGIC = b"USIS"
FORMAT_VERSION = 1
PRESETS = ("PAPER26", "TOY8")
KINDS = ("conv", "strided_conv", "deconv", "norm", "relu", "add_skip", "residual_block")
PAPER26_DILATIONS = (1, 1, 2, 2, 4, 4, 8, 8, 16, 1)
TOY8_DILATIONS = (1, 1, 2, 2, 4, 4, 1, 1)
EMA_DECAY = 0.99


class ModelFormatError(Exception):
    pass


class ModelVersionError(ModelFormatError):
    pass


@dataclass
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    stride: int = 1
    dilation: int = 1
    params: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def conv_count(self) -> int:
        if self.kind in ("conv", "strided_conv", "deconv"):
            return 1
        return 2 if self.kind == "residual_block" else 0


# parameter names per kind, in file order; "rm"/"rv" are running statistics and
# "rn" counts the training steps folded into them
_PARAM_NAMES = {
    "conv": ("w", "b"),
    "strided_conv": ("w", "b"),
    "deconv": ("w", "b"),
    "norm": ("gain", "shift", "rm", "rv", "rn"),
    "relu": (),
    "add_skip": (),
    "residual_block": ("w1", "b1", "gain1", "shift1", "rm1", "rv1", "rn1",
                       "w2", "b2", "gain2", "shift2", "rm2", "rv2", "rn2"),
}
_BUFFERS = {"rm", "rv", "rn", "rm1", "rv1", "rn1", "rm2", "rv2", "rn2"}


def _f32(arr) -> np.ndarray:
    """Round to float32 precision, keep float64 storage (exact file round trip)."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


class Network:
    def __init__(self, preset: str, layers: list[LayerSpec]):
        self.preset = preset
        self.layers = layers
        self._graph = None

    # construction

    @property
    def conv_layer_count(self) -> int:
        return sum(layer.conv_count for layer in self.layers)

    def parameter_refs(self) -> list[tuple[int, str]]:
        """(layer index, name) of every trainable array, in a fixed order."""
        refs = []
        for li, layer in enumerate(self.layers):
            for name in _PARAM_NAMES[layer.kind]:
                if name not in _BUFFERS:
                    refs.append((li, name))
        return refs

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[li].params[name] for li, name in self.parameter_refs()]

    def round_parameters(self) -> None:
        for layer in self.layers:
            for name, arr in layer.params.items():
                arr[...] = _f32(arr)

    def copy(self) -> "Network":
        layers = [LayerSpec(l.kind, l.in_ch, l.out_ch, l.stride, l.dilation,
                            {k: v.copy() for k, v in l.params.items()}) for l in self.layers]
        return Network(self.preset, layers)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(model_bytes(self)).hexdigest()

    # forward / backward

    def forward(self, x, training: bool = False) -> np.ndarray:
        """Run the network on a (n, 3, H, W) array; records the graph for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if self.preset == "PAPER26" and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ValueError("PAPER26 needs even image dimensions")
        inp = ad.Tensor(x, requires_grad=True)
        leaves = {}

        def leaf(li, name):
            t = ad.Tensor(self.layers[li].params[name], requires_grad=True)
            leaves[(li, name)] = t
            return t

        h = inp
        for li, layer in enumerate(self.layers):
            k = layer.kind
            if k in ("conv", "strided_conv"):
                h = ad.conv2d(h, leaf(li, "w"), leaf(li, "b"), layer.stride, layer.dilation)
            elif k == "deconv":
                h = ad.conv_transpose2d(h, leaf(li, "w"), leaf(li, "b"), layer.stride)
            elif k == "norm":
                p = layer.params
                h = ad.channel_norm(h, leaf(li, "gain"), leaf(li, "shift"), p["rm"], p["rv"], training, EMA_DECAY, p["rn"])
            elif k == "relu":
                h = ad.relu(h)
            elif k == "add_skip":
                h = ad.add(h, inp)
            elif k == "residual_block":
                p = layer.params
                r = ad.conv2d(h, leaf(li, "w1"), leaf(li, "b1"), 1, layer.dilation)
                r = ad.relu(ad.channel_norm(r, leaf(li, "gain1"), leaf(li, "shift1"), p["rm1"], p["rv1"], training, EMA_DECAY, p["rn1"]))
                r = ad.conv2d(r, leaf(li, "w2"), leaf(li, "b2"), 1, layer.dilation)
                r = ad.channel_norm(r, leaf(li, "gain2"), leaf(li, "shift2"), p["rm2"], p["rv2"], training, EMA_DECAY, p["rn2"])
                h = ad.relu(ad.add(h, r))
        if training:
            # keep running statistics float32-exact, like the parameters
            for layer in self.layers:
                for name in _BUFFERS.intersection(layer.params):
                    layer.params[name][...] = _f32(layer.params[name])
        self._graph = (inp, h, leaves)
        return h.value

    def backward(self, loss_grad) -> list[np.ndarray]:
        """Gradients of sum(loss_grad * output) for each array in parameters()."""
        if self._graph is None:
            raise RuntimeError("backward called before forward")
        inp, out, leaves = self._graph
        out.backward(np.asarray(loss_grad, dtype=np.float64).reshape(out.shape))
        grads = []
        for ref in self.parameter_refs():
            g = leaves[ref].grad
            grads.append(np.zeros_like(self.layers[ref[0]].params[ref[1]]) if g is None else g)
        return grads

    def input_gradient(self) -> np.ndarray | None:
        """Gradient w.r.t. the input of the last forward, after backward()."""
        return None if self._graph is None else self._graph[0].grad


def _conv_params(rng, ci, co, zero=False):
    if zero:
        w = np.zeros((co, ci, 3, 3))
    else:
        w = rng.standard_normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))
    return {"w": _f32(w), "b": np.zeros(co)}


def _norm_params(c):
    return {"gain": np.ones(c), "shift": np.zeros(c), "rm": np.zeros(c), "rv": np.ones(c), "rn": np.zeros(1)}


def _block_params(rng, c):
    a = _conv_params(rng, c, c)
    b = _conv_params(rng, c, c)
    na, nb = _norm_params(c), _norm_params(c)
    out = {}
    for suffix, conv, norm in (("1", a, na), ("2", b, nb)):
        out["w" + suffix] = conv["w"]
        out["b" + suffix] = conv["b"]
        out["gain" + suffix] = norm["gain"]
        out["shift" + suffix] = norm["shift"]
        out["rm" + suffix] = norm["rm"]
        out["rv" + suffix] = norm["rv"]
        out["rn" + suffix] = norm["rn"]
    return out


def _conv_block(rng, layers, kind, ci, co, stride=1, dilation=1):
    spec = LayerSpec(kind, ci, co, stride, dilation, _conv_params(rng, ci, co))
    if kind == "deconv":
        # stored as the weight of the convolution being transposed: (in, out, 3, 3)
        spec.params["w"] = _f32(rng.standard_normal((ci, co, 3, 3)) * np.sqrt(2.0 / (ci * 9)))
        spec.params["b"] = np.zeros(co)
    layers.append(spec)
    layers.append(LayerSpec("norm", co, co, params=_norm_params(co)))
    layers.append(LayerSpec("relu", co, co))


def build_network(preset: str = "TOY8", seed: int = 0, width: int | None = None,
                  image_channels: int = 3) -> Network:
    """Fresh network with fan-in scaled normal init and a zero final layer."""
    from .imagecore import make_rng

    rng = make_rng(seed)
    layers: list[LayerSpec] = []
    c_img = image_channels
    if preset == "PAPER26":
        c = width or 64
        _conv_block(rng, layers, "conv", c_img, c)
        _conv_block(rng, layers, "conv", c, c)
        _conv_block(rng, layers, "strided_conv", c, c, stride=2)
        for d in PAPER26_DILATIONS:
            layers.append(LayerSpec("residual_block", c, c, 1, d, _block_params(rng, c)))
        _conv_block(rng, layers, "deconv", c, c, stride=2)
        _conv_block(rng, layers, "conv", c, c)
    elif preset == "TOY8":
        c = width or 16
        _conv_block(rng, layers, "conv", c_img, c, dilation=TOY8_DILATIONS[0])
        _conv_block(rng, layers, "conv", c, c, dilation=TOY8_DILATIONS[1])
        layers.append(LayerSpec("residual_block", c, c, 1, TOY8_DILATIONS[2], _block_params(rng, c)))
        layers.append(LayerSpec("residual_block", c, c, 1, TOY8_DILATIONS[4], _block_params(rng, c)))
        _conv_block(rng, layers, "conv", c, c, dilation=TOY8_DILATIONS[6])
    else:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    layers.append(LayerSpec("conv", c, c_img, 1, 1, _conv_params(rng, c, c_img, zero=True)))
    layers.append(LayerSpec("add_skip", c_img, c_img))
    return Network(preset, layers)


def forward_smooth(net: Network, I, training: bool = False) -> Image:
    """One forward pass: I + residual(I), unclamped."""
    arr = as_array(I)
    out = net.forward(arr[None], training=training)[0]
    return Image(out, unclamped=True)


def receptive_field(net: Network, upto: int | None = None) -> int:
    """Side of the input window seen by one unit at the input of layer ``upto``.

    Uses r += (k - 1) * dilation * jump, jump *= stride. Defined up to the
    first transposed convolution.
    """
    r, jump = 1, 1
    for layer in net.layers[:upto]:
        if layer.kind in ("conv", "strided_conv"):
            r += 2 * layer.dilation * jump
            jump *= layer.stride
        elif layer.kind == "residual_block":
            r += 4 * layer.dilation * jump
        elif layer.kind == "deconv":
            raise ValueError("receptive_field is only defined up to the deconvolution")
    return r


# -- model file --------------------------------------------------------------------------

_PRESET_TAGS = {"PAPER26": 0, "TOY8": 1}


def model_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, _PRESET_TAGS[net.preset], len(net.layers)))
    for layer in net.layers:
        names = _PARAM_NAMES[layer.kind]
        buf.write(struct.pack("<IIIIII", KINDS.index(layer.kind), layer.in_ch, layer.out_ch,
                              layer.stride, layer.dilation, len(names)))
        for name in names:
            arr = layer.params[name]
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(net: Network, path) -> None:
    atomic_write_bytes(path, model_bytes(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("model file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def model_from_bytes(data: bytes) -> Network:
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"model format version {version}, expected {FORMAT_VERSION}")
    tag = rd.u32()
    presets = {v: k for k, v in _PRESET_TAGS.items()}
    if tag not in presets:
        raise ModelFormatError(f"unknown preset tag {tag}")
    n_layers = rd.u32()
    layers = []
    for _ in range(n_layers):
        kind_id, ci, co, stride, dilation, n_tensors = rd.u32(6)
        if kind_id >= len(KINDS):
            raise ModelFormatError(f"unknown layer kind {kind_id}")
        kind = KINDS[kind_id]
        names = _PARAM_NAMES[kind]
        if n_tensors != len(names):
            raise ModelFormatError(f"{kind} layer has {n_tensors} tensors, expected {len(names)}")
        params = {}
        for name in names:
            ndim = rd.u32()
            dims = rd.u32(ndim) if ndim > 1 else (rd.u32(),)
            count = int(np.prod(dims))
            arr = np.frombuffer(rd.take(4 * count), dtype="<f4").astype(np.float64).reshape(dims)
            params[name] = arr.copy()
        layers.append(LayerSpec(kind, ci, co, stride, dilation, params))
    if rd.pos != len(data):
        raise ModelFormatError("trailing bytes after last layer")
    return Network(presets[tag], layers)


def load_model(path) -> Network:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelFormatError(f"cannot read {path}: {exc}") from exc
    return model_from_bytes(data)
