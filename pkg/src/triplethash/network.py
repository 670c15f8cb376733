"""Small convolutional network trained from scratch, in float64.

The architecture ends in a fully-connected layer of `bit_width` units
followed by ReLU; that non-negative output is the real-valued descriptor
that later gets thresholded into a hash code. Direct (im2col) convolution
is plenty fast at 28x28 / 32x32 input sizes.
"""

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, NumericError, ShapeError, UsageError

PARAMS_MAGIC = b"THNP"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | max_pool | fully_connected | relu
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    window: Optional[int] = None
    out_dim: Optional[int] = None

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride)
        elif self.kind == "max_pool":
            d.update(window=self.window)
        elif self.kind == "fully_connected":
            d.update(out_dim=self.out_dim)
        return d

    @staticmethod
    def from_dict(d):
        return LayerSpec(**d)


def conv(out_channels, kernel, stride=1):
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride)


def max_pool(window):
    return LayerSpec("max_pool", window=window)


def fully_connected(out_dim):
    return LayerSpec("fully_connected", out_dim=out_dim)


def relu():
    return LayerSpec("relu")


def default_layer_spec(bit_width):
    """Two conv blocks plus a small MLP head ending in the hashing layer."""
    return [
        conv(8, 5, 1),
        relu(),
        max_pool(2),
        conv(16, 5, 1),
        relu(),
        max_pool(2),
        fully_connected(64),
        relu(),
        fully_connected(bit_width),
        relu(),
    ]


@dataclass
class NetworkParams:
    specs: list  # list[LayerSpec]
    input_dims: tuple  # (H, W, C)
    bit_width: int
    layers: list  # per spec: {"w": ndarray, "b": ndarray} or None


@dataclass
class ForwardTrace:
    params_id: int
    caches: list
    consumed: bool = False


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    velocity: Optional[list] = None  # lazily shaped like params.layers

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")


def _infer_shapes(specs, input_dims):
    """Walk the spec chain, yielding (spec, in_shape, out_shape) tuples."""
    shape = tuple(input_dims)  # (H, W, C) or (D,) once flattened
    chain = []
    for spec in specs:
        in_shape = shape
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigError("conv layer after flattening")
            h, w, c = shape
            k, s = spec.kernel, spec.stride
            if h < k or w < k:
                raise ConfigError(f"conv kernel {k} larger than input {h}x{w}")
            shape = ((h - k) // s + 1, (w - k) // s + 1, spec.out_channels)
        elif spec.kind == "max_pool":
            if len(shape) != 3:
                raise ConfigError("max_pool layer after flattening")
            h, w, c = shape
            shape = (h // spec.window, w // spec.window, c)
            if shape[0] == 0 or shape[1] == 0:
                raise ConfigError("max_pool window larger than input")
        elif spec.kind == "fully_connected":
            shape = (spec.out_dim,)
        elif spec.kind == "relu":
            pass
        else:
            raise ConfigError(f"unknown layer kind: {spec.kind}")
        chain.append((spec, in_shape, shape))
    return chain


def _validate_head(specs, bit_width):
    if (
        len(specs) < 2
        or specs[-2].kind != "fully_connected"
        or specs[-2].out_dim != bit_width
        or specs[-1].kind != "relu"
    ):
        raise ConfigError(
            "network must end with fully_connected(bit_width) followed by relu"
        )


def build_network(specs, input_dims, seed):
    """Initialize weights uniform in (-s, s) with s = sqrt(2/fan_in), biases zero."""
    chain = _infer_shapes(specs, input_dims)
    bit_width = specs[-2].out_dim if len(specs) >= 2 and specs[-2].out_dim else 0
    _validate_head(specs, bit_width)

    rng = np.random.default_rng(seed)
    layers = []
    for spec, in_shape, _ in chain:
        if spec.kind == "conv":
            c = in_shape[2]
            fan_in = spec.kernel * spec.kernel * c
            scale = np.sqrt(2.0 / fan_in)
            w = rng.uniform(-scale, scale, size=(spec.kernel, spec.kernel, c, spec.out_channels))
            layers.append({"w": w, "b": np.zeros(spec.out_channels)})
        elif spec.kind == "fully_connected":
            fan_in = int(np.prod(in_shape))
            scale = np.sqrt(2.0 / fan_in)
            w = rng.uniform(-scale, scale, size=(fan_in, spec.out_dim))
            layers.append({"w": w, "b": np.zeros(spec.out_dim)})
        else:
            layers.append(None)
    return NetworkParams(list(specs), tuple(input_dims), bit_width, layers)


def _im2col(x, k, s):
    """(N,H,W,C) -> (N,H',W',k,k,C) patch view with stride s, then a 2D matrix."""
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    # sliding_window_view puts C before the window axes; reorder to (k,k,C)
    patches = windows.transpose(0, 1, 2, 4, 5, 3)
    n, ho, wo = patches.shape[:3]
    return patches.reshape(n * ho * wo, -1), (n, ho, wo)


def forward(params, batch):
    """Run the network on a batch of ImageSamples; returns (features, trace)."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    x = np.stack([s.pixels for s in batch]).astype(np.float64)
    if x.shape[1:] != params.input_dims:
        raise ShapeError(
            f"batch images {x.shape[1:]} do not match network input {params.input_dims}"
        )
    return forward_array(params, x)


def forward_array(params, x):
    """forward() on an already-stacked (N, H, W, C) pixel array."""
    caches = []
    for spec, layer in zip(params.specs, params.layers):
        if spec.kind == "conv":
            cols, (n, ho, wo) = _im2col(x, spec.kernel, spec.stride)
            wmat = layer["w"].reshape(-1, spec.out_channels)
            out = cols @ wmat + layer["b"]
            caches.append({"x": x})
            x = out.reshape(n, ho, wo, spec.out_channels)
        elif spec.kind == "max_pool":
            w = spec.window
            n, h, width, c = x.shape
            hc, wc = (h // w) * w, (width // w) * w
            xr = (
                x[:, :hc, :wc, :]
                .reshape(n, hc // w, w, wc // w, w, c)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, hc // w, wc // w, c, w * w)
            )
            idx = np.argmax(xr, axis=-1)
            caches.append({"in_shape": x.shape, "idx": idx})
            x = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        elif spec.kind == "fully_connected":
            flat = x.reshape(x.shape[0], -1)
            caches.append({"x": flat, "in_shape": x.shape})
            x = flat @ layer["w"] + layer["b"]
        elif spec.kind == "relu":
            caches.append({"mask": x > 0})
            x = np.maximum(x, 0.0)
    trace = ForwardTrace(params_id=id(params), caches=caches)
    return x, trace


def backward(params, trace, dl_df):
    """Backpropagate a feature gradient; returns gradients shaped like params.layers."""
    if trace.consumed:
        raise UsageError("forward trace already consumed by a previous backward")
    if trace.params_id != id(params):
        raise UsageError("trace does not belong to these params")
    trace.consumed = True

    grad = np.asarray(dl_df, dtype=np.float64)
    grads = [None] * len(params.layers)
    for i in range(len(params.specs) - 1, -1, -1):
        spec, layer, cache = params.specs[i], params.layers[i], trace.caches[i]
        if spec.kind == "relu":
            grad = grad * cache["mask"]
        elif spec.kind == "fully_connected":
            flat = cache["x"]
            grads[i] = {"w": flat.T @ grad, "b": grad.sum(axis=0)}
            grad = (grad @ layer["w"].T).reshape(cache["in_shape"])
        elif spec.kind == "max_pool":
            w = spec.window
            n, h, width, c = cache["in_shape"]
            hc, wc = (h // w) * w, (width // w) * w
            h2, w2 = hc // w, wc // w
            scatter = np.zeros((n, h2, w2, c, w * w))
            np.put_along_axis(scatter, cache["idx"][..., None], grad[..., None], axis=-1)
            dx = np.zeros(cache["in_shape"])
            dx[:, :hc, :wc, :] = (
                scatter.reshape(n, h2, w2, c, w, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, hc, wc, c)
            )
            grad = dx
        elif spec.kind == "conv":
            x = cache["x"]
            k, s, oc = spec.kernel, spec.stride, spec.out_channels
            cols, (n, ho, wo) = _im2col(x, k, s)
            dout = grad.reshape(-1, oc)
            wmat = layer["w"].reshape(-1, oc)
            grads[i] = {
                "w": (cols.T @ dout).reshape(layer["w"].shape),
                "b": dout.sum(axis=0),
            }
            dcols = (dout @ wmat.T).reshape(n, ho, wo, k, k, x.shape[3])
            dx = np.zeros_like(x)
            for ky in range(k):
                for kx in range(k):
                    dx[:, ky : ky + s * ho : s, kx : kx + s * wo : s, :] += dcols[
                        :, :, :, ky, kx, :
                    ]
            grad = dx
    return grads


def sgd_step(params, grads, state):
    """In-place momentum SGD: v = mu*v - lr*g; p += v. Returns (params, state)."""
    if state.velocity is None:
        state.velocity = [
            None if l is None else {"w": np.zeros_like(l["w"]), "b": np.zeros_like(l["b"])}
            for l in params.layers
        ]
    for layer, grad, vel in zip(params.layers, grads, state.velocity):
        if layer is None or grad is None:
            continue
        for key in ("w", "b"):
            if not np.all(np.isfinite(grad[key])):
                raise NumericError("non-finite gradient; training aborted")
            vel[key] = state.momentum * vel[key] - state.learning_rate * grad[key]
            layer[key] = layer[key] + vel[key]
    return params, state


def save_params(params, path):
    """Versioned binary dump: JSON header + raw little-endian float64 payloads."""
    header = json.dumps(
        {
            "specs": [s.to_dict() for s in params.specs],
            "input_dims": list(params.input_dims),
            "bit_width": params.bit_width,
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<I", PARAMS_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for layer in params.layers:
            if layer is None:
                continue
            for key in ("w", "b"):
                arr = np.ascontiguousarray(layer[key], dtype="<f8")
                f.write(arr.tobytes())


def load_params(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PARAMS_MAGIC:
            raise FormatError(f"{path}: bad params magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != PARAMS_VERSION:
            raise FormatError(f"{path}: unsupported params version {version}")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode())
        specs = [LayerSpec.from_dict(d) for d in header["specs"]]
        params = build_network(specs, tuple(header["input_dims"]), seed=0)
        for layer in params.layers:
            if layer is None:
                continue
            for key in ("w", "b"):
                shape = layer[key].shape
                n_bytes = int(np.prod(shape)) * 8
                raw = f.read(n_bytes)
                if len(raw) != n_bytes:
                    raise FormatError(f"{path}: truncated parameter payload")
                layer[key] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1) != b"":
            raise FormatError(f"{path}: trailing bytes after parameter payload")
    return params
