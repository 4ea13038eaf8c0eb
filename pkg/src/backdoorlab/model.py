"""Small classifiers with manual forward/backward over a flat parameter vector.

A network is an ordered chain of layers acting on float64 batches, with all
parameters packed into one flat vector and a per-layer (offset, length)
layout. The final dense layer (weights and biases) is the *head*; everything
before it is the *backbone*. The split matters because purification
fine-tunes the head only, against features the frozen backbone produces once.

Gradients are exact analytic backprop, validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, RngState, as_f64


class SpecError(ValueError):
    """The layer chain is structurally invalid."""


class LabelError(ValueError):
    """A class label is outside [0, class_count)."""


class StalenessError(RuntimeError):
    """A FeatureCache no longer matches the network's backbone parameters."""


class FormatError(ValueError):
    """A checkpoint file does not parse."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | maxpool | flatten
    out: int = 0
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    window: int = 0

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense out={self.out}"
        if self.kind == "conv2d":
            return f"conv2d channels={self.channels} kernel={self.kernel} stride={self.stride}"
        if self.kind == "maxpool":
            return f"maxpool window={self.window}"
        return self.kind


def dense(out: int) -> LayerSpec:
    return LayerSpec("dense", out=out)


def conv2d(channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", channels=channels, kernel=kernel, stride=stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int) -> LayerSpec:
    return LayerSpec("maxpool", window=window)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def _shape_after(shape: tuple, spec: LayerSpec, index: int) -> tuple:
    """Output shape of one layer, raising SpecError on the first bad layer."""
    if spec.kind == "dense":
        if len(shape) != 1:
            raise SpecError(f"layer {index}: dense needs a flat input, got shape {shape}")
        if spec.out < 1:
            raise SpecError(f"layer {index}: dense out must be >= 1")
        return (spec.out,)
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise SpecError(f"layer {index}: conv2d needs (channels, h, w) input, got {shape}")
        c, h, w = shape
        k, s = spec.kernel, spec.stride
        if k < 1 or s < 1 or spec.channels < 1:
            raise SpecError(f"layer {index}: bad conv2d parameters {spec}")
        if k > h or k > w:
            raise SpecError(f"layer {index}: kernel {k} exceeds spatial extent {h}x{w}")
        return (spec.channels, (h - k) // s + 1, (w - k) // s + 1)
    if spec.kind == "relu":
        return shape
    if spec.kind == "maxpool":
        if len(shape) != 3:
            raise SpecError(f"layer {index}: maxpool needs (channels, h, w) input, got {shape}")
        c, h, w = shape
        if spec.window < 1 or spec.window > h or spec.window > w:
            raise SpecError(f"layer {index}: maxpool window {spec.window} does not fit {h}x{w}")
        return (c, h // spec.window, w // spec.window)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise SpecError(f"layer {index}: unknown kind {spec.kind!r}")


def _param_count(shape: tuple, spec: LayerSpec) -> int:
    if spec.kind == "dense":
        return spec.out * shape[0] + spec.out
    if spec.kind == "conv2d":
        return spec.channels * shape[0] * spec.kernel * spec.kernel + spec.channels
    return 0


@dataclass
class Network:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int
    params: np.ndarray
    layout: tuple[tuple[int, int], ...]  # per-layer (offset, length), zero-length for param-free

    @property
    def head_slice(self) -> slice:
        off, length = self.layout[-1]
        return slice(off, off + length)

    @property
    def head_params(self) -> np.ndarray:
        return self.params[self.head_slice]

    @property
    def head_dim(self) -> int:
        return self.layout[-1][1]

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr([s.describe() for s in self.layers]).encode())
        h.update(repr(self.input_shape).encode())
        h.update(self.params[: self.layout[-1][0]].tobytes())
        return h.hexdigest()

    def copy(self) -> "Network":
        return Network(self.layers, self.input_shape, self.class_count,
                       self.params.copy(), self.layout)


@dataclass
class FeatureCache:
    """Head-input activations for a fixed dataset under a frozen backbone."""

    features: np.ndarray  # (n, head_input_dim)
    backbone_digest: str
    data_digest: str

    def check_fresh(self, net: Network) -> None:
        d = net.backbone_digest()
        if d != self.backbone_digest:
            raise StalenessError(
                f"feature cache stale: cached backbone {self.backbone_digest[:12]} "
                f"!= current {d[:12]}"
            )


def init_network(spec: list[LayerSpec], input_shape, class_count: int,
                 rng: RngState) -> Network:
    """Build a network with fan-in-scaled uniform weights and zero biases.

    ``input_shape`` is an int for flat inputs or a (channels, h, w) tuple.
    The chain must end in dense(class_count).
    """
    if isinstance(input_shape, int):
        input_shape = (input_shape,)
    input_shape = tuple(int(v) for v in input_shape)
    layers = tuple(spec)
    if not layers or layers[-1].kind != "dense" or layers[-1].out != class_count:
        raise SpecError(f"layer chain must end in dense({class_count})")

    shape = input_shape
    layout = []
    offset = 0
    for i, sp in enumerate(layers):
        n = _param_count(shape, sp)
        layout.append((offset, n))
        offset += n
        shape = _shape_after(shape, sp, i)
    params = np.zeros(offset, dtype=np.float64)

    # One child stream per parameterized layer keeps initialization stable
    # when an unrelated layer is added or removed.
    streams = rng.split(len(layers))
    shape = input_shape
    for i, sp in enumerate(layers):
        off, n = layout[i]
        if n:
            if sp.kind == "dense":
                fan_in, n_weights = shape[0], sp.out * shape[0]
            else:
                fan_in = shape[0] * sp.kernel * sp.kernel
                n_weights = sp.channels * fan_in
            bound = 1.0 / math.sqrt(fan_in)
            w = streams[i].generator().uniform(-bound, bound, size=n_weights)
            params[off : off + n_weights] = w
            # biases stay zero: a zero input then propagates to logits == head biases
        shape = _shape_after(shape, sp, i)

    return Network(layers, input_shape, class_count, params, tuple(layout))


# ---------------------------------------------------------------------------
# layer forward/backward kernels
# ---------------------------------------------------------------------------

def _dense_fwd(x, w, b):
    return x @ w.T + b


def _dense_bwd(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _conv_windows(x, k, s):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s, :, :]  # (n, c_in, h_out, w_out, k, k)


def _conv_fwd(x, w, b, k, s):
    win = _conv_windows(x, k, s)
    y = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    return y + b[None, :, None, None]


def _conv_bwd(dy, x, w, k, s):
    win = _conv_windows(x, k, s)
    dw = np.einsum("nohw,nchwij->ocij", dy, win, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    n, c_in, h, wd = x.shape
    h_out, w_out = dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    # scatter dcols back over the k*k taps; windows may overlap when s < k
    dcols = np.einsum("nohw,ocij->nchwij", dy, w, optimize=True)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki : ki + s * h_out : s, kj : kj + s * w_out : s] += dcols[:, :, :, :, ki, kj]
    return dx, dw, db


def _maxpool_fwd(x, w):
    n, c, h, wd = x.shape
    h2, w2 = h // w, wd // w
    xr = x[:, :, : h2 * w, : w2 * w].reshape(n, c, h2, w, w2, w)
    flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, w * w)
    idx = flat.argmax(axis=-1)  # first max wins on ties
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool_bwd(dy, idx, in_shape, w):
    n, c, h, wd = in_shape
    h2, w2 = h // w, wd // w
    flat = np.zeros((n, c, h2, w2, w * w), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=np.float64)
    dx[:, :, : h2 * w, : w2 * w] = (
        flat.reshape(n, c, h2, w2, w, w).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * w, w2 * w)
    )
    return dx


def _layer_params(net: Network, i: int, shape: tuple):
    sp = net.layers[i]
    off, n = net.layout[i]
    if sp.kind == "dense":
        d_in = shape[0]
        w = net.params[off : off + sp.out * d_in].reshape(sp.out, d_in)
        b = net.params[off + sp.out * d_in : off + n]
        return w, b
    if sp.kind == "conv2d":
        c_in = shape[0]
        nw = sp.channels * c_in * sp.kernel * sp.kernel
        w = net.params[off : off + nw].reshape(sp.channels, c_in, sp.kernel, sp.kernel)
        b = net.params[off + nw : off + n]
        return w, b
    return None, None


def _check_batch(net: Network, x) -> np.ndarray:
    x = as_f64(x, "x")
    if x.ndim == len(net.input_shape):  # single sample convenience
        x = x[None, ...]
    if x.shape[1:] != net.input_shape:
        if len(net.input_shape) == 1 and int(np.prod(x.shape[1:])) == net.input_shape[0]:
            x = x.reshape(x.shape[0], net.input_shape[0])
        else:
            raise DimensionError(
                f"batch shape {x.shape[1:]} does not match network input {net.input_shape}"
            )
    return x


def _forward_trace(net: Network, x: np.ndarray):
    """Run all layers, returning per-layer inputs and auxiliary caches."""
    acts = [x]
    caches = []
    shape = net.input_shape
    for i, sp in enumerate(net.layers):
        w, b = _layer_params(net, i, shape)
        if sp.kind == "dense":
            x = _dense_fwd(x, w, b)
            caches.append(None)
        elif sp.kind == "conv2d":
            x = _conv_fwd(x, w, b, sp.kernel, sp.stride)
            caches.append(None)
        elif sp.kind == "relu":
            x = np.maximum(x, 0.0)
            caches.append(None)
        elif sp.kind == "maxpool":
            x, idx = _maxpool_fwd(x, sp.window)
            caches.append(idx)
        elif sp.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
            caches.append(None)
        acts.append(x)
        shape = _shape_after(shape, sp, i)
    return acts, caches


def forward(net: Network, x) -> np.ndarray:
    """Logits for a batch; one row per sample, class_count columns."""
    x = _check_batch(net, x)
    acts, _ = _forward_trace(net, x)
    return acts[-1]


def predict(net: Network, x) -> np.ndarray:
    """Argmax labels per row; ties break toward the lowest class index."""
    return np.argmax(forward(net, x), axis=1)


def backbone_features(net: Network, x) -> FeatureCache:
    """Head-input activations for ``x`` under the current (frozen) backbone."""
    x = _check_batch(net, x)
    feats = x
    shape = net.input_shape
    for i, sp in enumerate(net.layers[:-1]):
        w, b = _layer_params(net, i, shape)
        if sp.kind == "dense":
            feats = _dense_fwd(feats, w, b)
        elif sp.kind == "conv2d":
            feats = _conv_fwd(feats, w, b, sp.kernel, sp.stride)
        elif sp.kind == "relu":
            feats = np.maximum(feats, 0.0)
        elif sp.kind == "maxpool":
            feats = _maxpool_fwd(feats, sp.window)[0]
        elif sp.kind == "flatten":
            feats = feats.reshape(feats.shape[0], -1)
        shape = _shape_after(shape, sp, i)
    if len(shape) != 1:
        feats = feats.reshape(feats.shape[0], -1)
    data_digest = hashlib.sha256(x.tobytes()).hexdigest()
    return FeatureCache(feats, net.backbone_digest(), data_digest)


def _check_labels(y, class_count: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError(f"labels must be a vector, got shape {y.shape}")
    bad = np.where((y < 0) | (y >= class_count))[0]
    if bad.size:
        raise LabelError(f"label {int(y[bad[0]])} at index {int(bad[0])} outside [0, {class_count})")
    return y.astype(np.int64)


def softmax_and_loss(logits: np.ndarray, y: np.ndarray):
    """Stabilized softmax probabilities and mean cross-entropy."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    log_probs = z - np.log(denom)
    loss = -float(np.mean(log_probs[np.arange(len(y)), y]))
    return probs, loss


def loss_and_grad(net: Network, x, y, scope: str = "full",
                  cache: FeatureCache | None = None):
    """Mean cross-entropy and its gradient over the requested scope.

    ``scope="full"`` returns a gradient over the whole parameter vector;
    ``scope="head_only"`` returns the head block only and may reuse a
    FeatureCache instead of re-running the backbone.
    """
    if scope not in ("full", "head_only"):
        raise ValueError(f"unknown scope {scope!r}")
    y = _check_labels(y, net.class_count)

    if scope == "head_only":
        if cache is not None:
            cache.check_fresh(net)
            feats = cache.features
        else:
            feats = backbone_features(net, x).features
        head = net.layers[-1]
        d_in = feats.shape[1]
        off, n = net.layout[-1]
        w = net.params[off : off + head.out * d_in].reshape(head.out, d_in)
        b = net.params[off + head.out * d_in : off + n]
        logits = _dense_fwd(feats, w, b)
        probs, loss = softmax_and_loss(logits, y)
        dlogits = probs.copy()
        dlogits[np.arange(len(y)), y] -= 1.0
        dlogits /= len(y)
        dw = dlogits.T @ feats
        db = dlogits.sum(axis=0)
        return loss, np.concatenate([dw.ravel(), db])

    x = _check_batch(net, x)
    acts, caches = _forward_trace(net, x)
    probs, loss = softmax_and_loss(acts[-1], y)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)

    grad = np.zeros_like(net.params)
    shapes = [net.input_shape]
    for i, sp in enumerate(net.layers):
        shapes.append(_shape_after(shapes[-1], sp, i))

    dy = dlogits
    for i in range(len(net.layers) - 1, -1, -1):
        sp = net.layers[i]
        off, n = net.layout[i]
        x_in = acts[i]
        w, b = _layer_params(net, i, shapes[i])
        if sp.kind == "dense":
            dy, dw, db = _dense_bwd(dy, x_in, w)
            grad[off : off + dw.size] = dw.ravel()
            grad[off + dw.size : off + n] = db
        elif sp.kind == "conv2d":
            dy, dw, db = _conv_bwd(dy, x_in, w, sp.kernel, sp.stride)
            grad[off : off + dw.size] = dw.ravel()
            grad[off + dw.size : off + n] = db
        elif sp.kind == "relu":
            dy = dy * (x_in > 0.0)
        elif sp.kind == "maxpool":
            dy = _maxpool_bwd(dy, caches[i], x_in.shape, sp.window)
        elif sp.kind == "flatten":
            dy = dy.reshape(x_in.shape)
    return loss, grad


def per_sample_head_grads(net: Network, cache: FeatureCache, y) -> np.ndarray:
    """Per-sample gradients of the log-likelihood w.r.t. the head.

    Row j is the gradient of log p(y_j | x_j) (log-likelihood sign, not
    loss sign) with respect to the head weights and biases, laid out to
    match the head's slice of the flat parameter vector. The mean of the
    rows times -1 equals the head_only loss gradient.
    """
    cache.check_fresh(net)
    y = _check_labels(y, net.class_count)
    feats = cache.features
    head = net.layers[-1]
    d_in = feats.shape[1]
    off, n = net.layout[-1]
    w = net.params[off : off + head.out * d_in].reshape(head.out, d_in)
    b = net.params[off + head.out * d_in : off + n]
    probs, _ = softmax_and_loss(_dense_fwd(feats, w, b), y)
    err = -probs
    err[np.arange(len(y)), y] += 1.0  # one_hot - p
    dw = err[:, :, None] * feats[:, None, :]  # (n, out, d_in)
    return np.concatenate([dw.reshape(len(y), -1), err], axis=1)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"NGFCKPT1"


def _header_text(net: Network) -> str:
    lines = [
        "input_shape=" + ",".join(str(v) for v in net.input_shape),
        f"class_count={net.class_count}",
        f"param_count={net.params.size}",
    ]
    for sp in net.layers:
        lines.append("layer=" + sp.describe())
    return "\n".join(lines) + "\n"


def save_checkpoint(net: Network, path) -> None:
    header = _header_text(net).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(net.params.astype("<f8").tobytes())


def _parse_layer(desc: str) -> LayerSpec:
    parts = desc.split()
    kind = parts[0]
    kv = dict(p.split("=", 1) for p in parts[1:])
    if kind == "dense":
        return dense(int(kv["out"]))
    if kind == "conv2d":
        return conv2d(int(kv["channels"]), int(kv["kernel"]), int(kv["stride"]))
    if kind == "maxpool":
        return maxpool(int(kv["window"]))
    if kind in ("relu", "flatten"):
        return LayerSpec(kind)
    raise FormatError(f"unknown layer kind in checkpoint: {kind!r}")


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (hlen,) = (int.from_bytes(f.read(8), "little"),)
        header = f.read(hlen).decode("utf-8")
        fields = {}
        layers = []
        for line in header.strip().split("\n"):
            key, val = line.split("=", 1)
            if key == "layer":
                layers.append(_parse_layer(val))
            else:
                fields[key] = val
        input_shape = tuple(int(v) for v in fields["input_shape"].split(","))
        class_count = int(fields["class_count"])
        param_count = int(fields["param_count"])
        raw = f.read(param_count * 8)
        if len(raw) != param_count * 8:
            raise FormatError(f"truncated parameter block: got {len(raw)} bytes")
        params = np.frombuffer(raw, dtype="<f8").astype(np.float64)

    shape = input_shape
    layout = []
    offset = 0
    for i, sp in enumerate(layers):
        n = _param_count(shape, sp)
        layout.append((offset, n))
        offset += n
        shape = _shape_after(shape, sp, i)
    if offset != param_count:
        raise FormatError(f"param_count {param_count} inconsistent with layers ({offset})")
    return Network(tuple(layers), input_shape, class_count, params, tuple(layout))


def reference_mlp(class_count: int, hidden: tuple[int, int] = (32, 32)) -> list[LayerSpec]:
    """Two-hidden-layer MLP used throughout the desk-scale experiments."""
    return [dense(hidden[0]), relu(), dense(hidden[1]), relu(), dense(class_count)]


def reference_cnn(class_count: int, channels: tuple[int, int] = (8, 16)) -> list[LayerSpec]:
    """Two conv+pool blocks and a dense head; small enough for Hessian probes."""
    return [
        conv2d(channels[0], 3), relu(), maxpool(2),
        conv2d(channels[1], 3), relu(), maxpool(2),
        flatten(), dense(class_count),
    ]
