"""Plain sequential conv-net models: construction, surgery, folding, accounting.

A model is an immutable tuple of layers.  Every :class:`Conv` carries an
implicit ReLU; a :class:`Scaling` layer, when present, sits directly after the
conv block it scales.  The head is GAP followed by one :class:`Dense` layer
whose output is a logit (the sigmoid lives in the loss and in prediction).

Transforms never mutate their input; they return new models that share the
arrays they did not touch.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .errors import EmptyNetworkError, ModelError, ShapeError

POOL = "P"
VGG16_PLAN = (64, 64, POOL, 128, 128, POOL, 256, 256, 256, POOL,
              512, 512, 512, POOL, 512, 512, 512, POOL)


@dataclass(frozen=True, eq=False)
class Conv:
    kernel: np.ndarray
    bias: np.ndarray
    frozen: bool = True

    @property
    def in_channels(self):
        return self.kernel.shape[2]

    @property
    def out_channels(self):
        return self.kernel.shape[3]


@dataclass(frozen=True, eq=False)
class MaxPool:
    pass


@dataclass(frozen=True, eq=False)
class Scaling:
    s: np.ndarray


@dataclass(frozen=True, eq=False)
class GAP:
    pass


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    trainable: bool = True


Layer = Union[Conv, MaxPool, Scaling, GAP, Dense]

_KINDS = {Conv: "conv", MaxPool: "maxpool", Scaling: "scaling", GAP: "gap", Dense: "dense"}


def layer_kind(layer):
    return _KINDS[type(layer)]


@dataclass(frozen=True, eq=False)
class NetworkModel:
    layers: tuple
    input_shape: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        validate(self)

    @property
    def dtype(self):
        return self.head.weight.dtype

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    @property
    def convs(self):
        return [layer for layer in self.layers if isinstance(layer, Conv)]

    def conv_positions(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    @property
    def has_scaling(self):
        return any(isinstance(layer, Scaling) for layer in self.layers)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def validate(model):
    """Check channel compatibility and the layer-ordering rules."""
    layers = model.layers
    if not layers or not isinstance(layers[-1], Dense):
        raise ModelError("model must end with a dense head")
    if sum(isinstance(layer, Dense) for layer in layers) != 1:
        raise ModelError("model must have exactly one dense layer")
    if len(layers) < 2 or not isinstance(layers[-2], GAP):
        raise ModelError("dense head must be preceded by global average pooling")
    if sum(isinstance(layer, GAP) for layer in layers) != 1:
        raise ModelError("model must have exactly one GAP layer")
    if len(model.input_shape) != 3:
        raise ModelError(f"input shape must be (h, w, c), got {model.input_shape}")
    h, w, c = model.input_shape
    dtype = layers[-1].weight.dtype
    prev = None
    for i, layer in enumerate(layers):
        arrays = [getattr(layer, f.name) for f in dataclasses.fields(layer)
                  if isinstance(getattr(layer, f.name), np.ndarray)]
        for a in arrays:
            if a.dtype != dtype:
                raise ModelError(f"layer {i} has dtype {a.dtype}, model dtype is {dtype}")
        if isinstance(layer, Conv):
            if layer.kernel.ndim != 4 or layer.kernel.shape[0] % 2 == 0:
                raise ModelError(f"layer {i}: bad kernel shape {layer.kernel.shape}")
            if layer.in_channels != c:
                raise ModelError(f"layer {i}: kernel expects {layer.in_channels} channels, gets {c}")
            if layer.bias.shape != (layer.out_channels,):
                raise ModelError(f"layer {i}: bias shape {layer.bias.shape}")
            c = layer.out_channels
        elif isinstance(layer, Scaling):
            if not isinstance(prev, Conv):
                raise ModelError(f"layer {i}: scaling layer must follow a conv layer")
            if layer.s.shape != (c,):
                raise ModelError(f"layer {i}: scaling vector {layer.s.shape} for {c} channels")
        elif isinstance(layer, MaxPool):
            if h % 2 or w % 2:
                raise ModelError(f"layer {i}: max-pool on odd spatial extent {(h, w)}")
            h, w = h // 2, w // 2
        elif isinstance(layer, Dense):
            if layer.weight.ndim != 2 or layer.weight.shape[0] != c:
                raise ModelError(f"dense weight {layer.weight.shape} for {c} features")
            if layer.weight.shape[1] < 1 or layer.bias.shape != (layer.weight.shape[1],):
                raise ModelError(f"dense bias {layer.bias.shape} for weight {layer.weight.shape}")
        prev = layer
    if model.has_scaling:
        for i, layer in enumerate(layers):
            if isinstance(layer, Conv) and layer.frozen and not isinstance(layers[i + 1], Scaling):
                raise ModelError(f"frozen conv at layer {i} has no scaling layer")


# ---------------------------------------------------------------------------
# construction


def _he_kernel(rng, k, c_in, c_out, dtype):
    std = np.sqrt(2.0 / (k * k * c_in))
    return (rng.standard_normal((k, k, c_in, c_out), dtype=np.float64) * std).astype(dtype)


def init_dense(rng, n_in, n_out, dtype):
    """Glorot-uniform weight with zero bias."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    weight = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
    return Dense(weight, np.zeros(n_out, dtype=dtype), trainable=True)


def build_vgg16_like(channel_plan: Sequence = VGG16_PLAN, input_shape=(512, 512, 3),
                     num_outputs=1, *, seed=0, weights=None, kernel_size=3,
                     dtype=np.float32):
    """Baseline architecture: frozen conv+ReLU blocks and pools, GAP, dense head.

    ``channel_plan`` lists conv widths with ``"P"`` marking a 2x2 max-pool.
    ``weights`` optionally supplies ``[(kernel, bias), ...]`` for the convs in
    order; otherwise kernels are He-normal from ``seed``.
    """
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    h, w, c = (int(v) for v in input_shape)
    n_convs = sum(1 for p in channel_plan if p != POOL and p != "M")
    if weights is not None and len(weights) != n_convs:
        raise ModelError(f"weight file has {len(weights)} conv layers, plan has {n_convs}")
    layers = []
    conv_i = 0
    for item in channel_plan:
        if item in (POOL, "M"):
            if h % 2 or w % 2:
                raise ModelError(f"max-pool would see odd spatial extent {(h, w)}")
            h, w = h // 2, w // 2
            layers.append(MaxPool())
            continue
        width = int(item)
        if width < 1:
            raise ModelError(f"conv width must be positive, got {item}")
        if weights is not None:
            kernel, bias = (np.asarray(a) for a in weights[conv_i])
            expected = (kernel_size, kernel_size, c, width)
            if kernel.shape != expected or bias.shape != (width,):
                raise ModelError(
                    f"conv {conv_i}: weight file kernel {kernel.shape}/bias {bias.shape}, "
                    f"architecture expects {expected}/({width},)"
                )
            kernel, bias = kernel.astype(dtype), bias.astype(dtype)
        else:
            kernel = _he_kernel(rng, kernel_size, c, width, dtype)
            bias = np.zeros(width, dtype=dtype)
        layers.append(Conv(kernel, bias, frozen=True))
        c = width
        conv_i += 1
    if conv_i == 0:
        raise ModelError("channel plan has no conv layers")
    layers.append(GAP())
    layers.append(init_dense(rng, c, num_outputs, dtype))
    return NetworkModel(tuple(layers), tuple(int(v) for v in input_shape),
                        {"iteration": 0, "provenance": "build_vgg16_like"})


def load_pretrained_npz(path, channel_plan=VGG16_PLAN, input_shape=(512, 512, 3),
                        num_outputs=1, *, seed=0, dtype=np.float32):
    """Build a baseline from an ``.npz`` holding ``conv{i}.kernel``/``conv{i}.bias``.

    Kernels must already be channels-last cross-correlation kernels
    ``(k, k, c_in, c_out)``; see the README for the key mapping.
    """
    with np.load(path) as data:
        n_convs = sum(1 for p in channel_plan if p not in (POOL, "M"))
        weights = []
        for i in range(n_convs):
            try:
                weights.append((data[f"conv{i}.kernel"], data[f"conv{i}.bias"]))
            except KeyError as exc:
                raise ModelError(f"weight file lacks {exc.args[0]}") from None
        extra = set(data.files) - {f"conv{i}.{n}" for i in range(n_convs) for n in ("kernel", "bias")}
        if extra:
            raise ModelError(f"weight file has entries not in the architecture: {sorted(extra)}")
    model = build_vgg16_like(channel_plan, input_shape, num_outputs, seed=seed,
                             weights=weights, dtype=dtype)
    return model.replace(metadata={**model.metadata, "provenance": f"pretrained:{path}"})


def attach_scaling(model, init=1.0):
    """Insert a scaling layer after every frozen conv; s starts at ``init``."""
    if model.has_scaling:
        raise ModelError("model already has scaling layers")
    layers = []
    for layer in model.layers:
        layers.append(layer)
        if isinstance(layer, Conv) and layer.frozen:
            layers.append(Scaling(np.full(layer.out_channels, init, dtype=model.dtype)))
    return model.replace(layers=tuple(layers))


def strip_scaling(model):
    return model.replace(layers=tuple(l for l in model.layers if not isinstance(l, Scaling)))


def scaling_vectors(model):
    """Scaling vectors in conv order (``None`` for convs without one)."""
    out = []
    layers = model.layers
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            out.append(nxt.s if isinstance(nxt, Scaling) else None)
    return out


def reinit_head(model, seed):
    head = model.head
    rng = np.random.default_rng(seed)
    new = init_dense(rng, head.weight.shape[0], head.weight.shape[1], model.dtype)
    return model.replace(layers=model.layers[:-1] + (new,))


def with_precision(model, dtype):
    """Copy of ``model`` with every tensor cast to ``dtype``."""
    dtype = np.dtype(dtype)
    layers = []
    for layer in model.layers:
        changes = {f.name: getattr(layer, f.name).astype(dtype)
                   for f in dataclasses.fields(layer)
                   if isinstance(getattr(layer, f.name), np.ndarray)}
        layers.append(dataclasses.replace(layer, **changes))
    return model.replace(layers=tuple(layers))


# ---------------------------------------------------------------------------
# parameters and forward pass


def trainable_parameters(model):
    """``{name: array}`` for every trainable tensor, in layer order."""
    params = {}
    positions = model.conv_positions()
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Scaling):
            params[f"scaling{positions.index(i - 1)}"] = layer.s
        elif isinstance(layer, Conv) and not layer.frozen:
            j = positions.index(i)
            params[f"conv{j}.kernel"] = layer.kernel
            params[f"conv{j}.bias"] = layer.bias
        elif isinstance(layer, Dense) and layer.trainable:
            params["dense.weight"] = layer.weight
            params["dense.bias"] = layer.bias
    return params


def with_parameters(model, params):
    """Return ``model`` with trainable tensors replaced from ``params``."""
    layers = list(model.layers)
    positions = model.conv_positions()
    for i, layer in enumerate(layers):
        if isinstance(layer, Scaling):
            name = f"scaling{positions.index(i - 1)}"
            if name in params:
                layers[i] = Scaling(np.asarray(params[name], dtype=model.dtype))
        elif isinstance(layer, Conv) and not layer.frozen:
            j = positions.index(i)
            layers[i] = Conv(params.get(f"conv{j}.kernel", layer.kernel),
                             params.get(f"conv{j}.bias", layer.bias), frozen=False)
        elif isinstance(layer, Dense) and layer.trainable:
            layers[i] = Dense(params.get("dense.weight", layer.weight),
                              params.get("dense.bias", layer.bias), trainable=True)
    return model.replace(layers=tuple(layers))


def first_trainable_layer(model):
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Scaling) or (isinstance(layer, Conv) and not layer.frozen) \
                or (isinstance(layer, Dense) and layer.trainable):
            return i
    return len(model.layers)


def run_layers(model, x, start=0, stop=None):
    """Pure forward pass through ``model.layers[start:stop]`` (no tape)."""
    stop = len(model.layers) if stop is None else stop
    for layer in model.layers[start:stop]:
        if isinstance(layer, Conv):
            x = T.relu(T.conv2d_forward(x, layer.kernel, layer.bias))
        elif isinstance(layer, Scaling):
            x = T.channel_scaling_forward(x, layer.s)
        elif isinstance(layer, MaxPool):
            x = T.max_pool_2x2(x)
        elif isinstance(layer, GAP):
            x = T.global_average_pool(x)
        elif isinstance(layer, Dense):
            x = T.dense_forward(x, layer.weight, layer.bias)
    return x


def _check_input(model, x):
    x = np.asarray(x)
    if x.shape[-3:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward(model, x, tape=None, *, params=None, start=0, watch_last_conv=False):
    """Logits for ``x`` (single image or batch).

    With a ``tape``, the pass is recorded and trainable tensors become named
    tape parameters.  ``params`` overrides trainable tensors by name.  ``start``
    lets the caller feed an already computed activation for layer ``start``.
    ``watch_last_conv`` names the output of the final conv block
    ``"last_conv"`` on the tape (after its scaling layer if there is one).
    """
    if start == 0:
        x = _check_input(model, x)
    if tape is None and not watch_last_conv:
        if params:
            model = with_parameters(model, params)
        return run_layers(model, x, start)
    if tape is None:
        raise ValueError("watch_last_conv requires a tape")
    params = params or {}
    layers = model.layers
    positions = model.conv_positions()
    last = positions[-1]
    last_block_end = last + 1 if last + 1 < len(layers) and isinstance(layers[last + 1], Scaling) else last
    node = tape.constant(x)
    for i in range(start, len(layers)):
        layer = layers[i]
        if isinstance(layer, Conv):
            j = positions.index(i)
            if layer.frozen:
                kernel, bias = tape.constant(layer.kernel), tape.constant(layer.bias)
            else:
                kernel = tape.parameter(f"conv{j}.kernel", params.get(f"conv{j}.kernel", layer.kernel))
                bias = tape.parameter(f"conv{j}.bias", params.get(f"conv{j}.bias", layer.bias))
            node = tape.relu(tape.conv2d(node, kernel, bias))
        elif isinstance(layer, Scaling):
            name = f"scaling{positions.index(i - 1)}"
            node = tape.channel_scaling(node, tape.parameter(name, params.get(name, layer.s)))
        elif isinstance(layer, MaxPool):
            node = tape.max_pool_2x2(node)
        elif isinstance(layer, GAP):
            node = tape.global_average_pool(node)
        elif isinstance(layer, Dense):
            if layer.trainable:
                weight = tape.parameter("dense.weight", params.get("dense.weight", layer.weight))
                bias = tape.parameter("dense.bias", params.get("dense.bias", layer.bias))
            else:
                weight, bias = tape.constant(layer.weight), tape.constant(layer.bias)
            node = tape.dense(node, weight, bias)
        if watch_last_conv and i == last_block_end:
            tape.watch("last_conv", node)
    return node


def predict_proba(model, x, batch_size=256):
    """Sigmoid of output 0 for a batch of images."""
    x = _check_input(model, x)
    if x.ndim == 3:
        return float(T.sigmoid(forward(model, x)[0]))
    out = [T.sigmoid(forward(model, x[i:i + batch_size])[:, 0]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=model.dtype)


# ---------------------------------------------------------------------------
# keep sets and surgery


@dataclass(frozen=True)
class KeepSet:
    """Retained channel indices, one sorted tuple per conv layer in order."""

    indices: tuple

    def __post_init__(self):
        cleaned = []
        for layer_keep in self.indices:
            values = tuple(int(v) for v in layer_keep)
            if len(set(values)) != len(values):
                raise ModelError(f"duplicate channel index in keep set {values}")
            cleaned.append(tuple(sorted(values)))
        object.__setattr__(self, "indices", tuple(cleaned))

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.indices[i]

    def sizes(self):
        return tuple(len(k) for k in self.indices)

    @classmethod
    def all(cls, model):
        return cls(tuple(tuple(range(c.out_channels)) for c in model.convs))

    def compose(self, inner: "KeepSet"):
        """Keep set equal to applying ``self`` then ``inner`` (indexed in the pruned model)."""
        if len(inner) > len(self):
            raise ModelError("inner keep set has more layers than outer")
        return KeepSet(tuple(tuple(self.indices[l][i] for i in inner.indices[l])
                             for l in range(len(inner))))

    def to_json(self):
        return json.dumps({"keep": [list(k) for k in self.indices]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(tuple(tuple(k) for k in json.loads(text)["keep"]))


def _check_keep(model, keep):
    convs = model.convs
    if len(keep) != len(convs):
        raise ModelError(f"keep set has {len(keep)} layers, model has {len(convs)} convs")
    for l, (conv, k) in enumerate(zip(convs, keep.indices)):
        if any(i < 0 or i >= conv.out_channels for i in k):
            raise ModelError(f"keep set for conv {l} references channel outside 0..{conv.out_channels - 1}")


def select_channels(model, keep: KeepSet, *, seed=0):
    """Delete conv output channels not in ``keep`` and the matching input slices.

    Scaling layers are dropped.  Retained kernel and bias values are copied
    without arithmetic.  A conv whose keep set is empty is removed together with
    every later conv, and the dense head is re-initialized from ``seed`` for the
    last surviving width.
    """
    _check_keep(model, keep)
    layers = []
    conv_i = 0
    prev_keep = None
    cascaded = False
    for layer in model.layers:
        if isinstance(layer, Scaling):
            continue
        if isinstance(layer, Conv):
            if cascaded:
                continue
            out_keep = np.asarray(keep[conv_i], dtype=np.intp)
            conv_i += 1
            if out_keep.size == 0:
                if not layers or not any(isinstance(l, Conv) for l in layers):
                    raise EmptyNetworkError("every channel of the first conv layer was removed")
                cascaded = True
                continue
            kernel = layer.kernel
            if prev_keep is not None:
                kernel = kernel[:, :, prev_keep, :]
            kernel = kernel[..., out_keep]
            layers.append(Conv(np.ascontiguousarray(kernel), layer.bias[out_keep], layer.frozen))
            prev_keep = out_keep
        elif isinstance(layer, Dense):
            if cascaded:
                rng = np.random.default_rng(seed)
                layers.append(init_dense(rng, int(prev_keep.size), layer.weight.shape[1], model.dtype))
            else:
                layers.append(Dense(np.ascontiguousarray(layer.weight[prev_keep]), layer.bias,
                                    layer.trainable))
        else:
            layers.append(layer)
    return model.replace(layers=tuple(layers))


def fold_scaling(model, keep: KeepSet, *, scale_bias=True, seed=0):
    """Prune with ``keep``, multiply retained kernels (and biases) by s, drop scaling.

    Only the dense head of the returned model is trainable.
    """
    if not model.has_scaling:
        raise ModelError("fold_scaling needs a model with scaling layers")
    _check_keep(model, keep)
    layers = list(model.layers)
    for i, layer in enumerate(layers):
        if isinstance(layer, Scaling):
            conv = layers[i - 1]
            s = layer.s.astype(model.dtype)
            bias = conv.bias * s if scale_bias else conv.bias
            layers[i - 1] = Conv(conv.kernel * s, bias, conv.frozen)
    scaled = model.replace(layers=tuple(layers))
    pruned = select_channels(scaled, keep, seed=seed)
    out = []
    for layer in pruned.layers:
        if isinstance(layer, Conv):
            out.append(Conv(layer.kernel, layer.bias, frozen=True))
        elif isinstance(layer, Dense):
            out.append(Dense(layer.weight, layer.bias, trainable=True))
        else:
            out.append(layer)
    return pruned.replace(layers=tuple(out))


# ---------------------------------------------------------------------------
# accounting


def count_parameters(model):
    per_layer = []
    total = trainable = 0
    for layer in model.layers:
        if isinstance(layer, Conv):
            n = layer.kernel.size + layer.bias.size
            is_trainable = not layer.frozen
        elif isinstance(layer, Scaling):
            n = layer.s.size
            is_trainable = True
        elif isinstance(layer, Dense):
            n = layer.weight.size + layer.bias.size
            is_trainable = layer.trainable
        else:
            n, is_trainable = 0, False
        per_layer.append({"kind": layer_kind(layer), "params": int(n), "trainable": is_trainable})
        total += n
        trainable += n if is_trainable else 0
    return {"total": int(total), "trainable": int(trainable), "per_layer": per_layer}


def count_channels(model):
    return tuple(c.out_channels for c in model.convs)


def models_equal(a, b):
    """Structural equality with bitwise tensor comparison."""
    if a.input_shape != b.input_shape or a.metadata != b.metadata or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        for f in dataclasses.fields(la):
            va, vb = getattr(la, f.name), getattr(lb, f.name)
            if isinstance(va, np.ndarray):
                if va.dtype != vb.dtype or va.shape != vb.shape or va.tobytes() != vb.tobytes():
                    return False
            elif va != vb:
                return False
    return True
