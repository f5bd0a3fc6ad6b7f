"""Network description, parameter initialization and the forward/backward pass.

The convolutions of a training step go through a *conv executor*; the local
executor calls :mod:`convshard.tensor` directly, the cluster executor
(:class:`convshard.cluster.Master`) scatters them across workers.  Everything
else (normalization, pooling, fully connected, loss, SGD) always runs in the
calling process.
"""
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class Conv:
    num_kernels: int
    kh: int = 5
    kw: int = 5


@dataclass(frozen=True)
class Norm:
    depth: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    bias: float = 2.0


@dataclass(frozen=True)
class Pool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FullyConnected:
    out_units: int


@dataclass(frozen=True)
class SoftmaxLoss:
    classes: int


_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, Norm, Pool, FullyConnected, SoftmaxLoss)}


@dataclass(frozen=True)
class ConvGeometry:
    """Shape facts about one convolutional layer, as seen by the wire and the cost model."""

    layer_index: int  # position in NetworkSpec.layers
    ordinal: int  # 0 for the first conv layer, 1 for the second, ...
    in_channels: int
    in_h: int
    in_w: int
    num_kernels: int
    kh: int
    kw: int

    @property
    def out_h(self):
        return self.in_h - self.kh + 1

    @property
    def out_w(self):
        return self.in_w - self.kw + 1

    @property
    def kernel_shape(self):
        return (self.num_kernels, self.in_channels, self.kh, self.kw)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple = (3, 32, 32)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shapes()  # validates the chain

    def shapes(self):
        """Per-sample output shape after every layer (the input shape is not included)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SoftmaxLoss) and i != len(self.layers) - 1:
                raise ConfigurationError("SoftmaxLoss must be the last layer")
            if isinstance(layer, Conv):
                c, h, w = _expect_spatial(shape, i)
                if layer.num_kernels < 1 or layer.kh < 1 or layer.kw < 1:
                    raise ConfigurationError(f"layer {i}: invalid convolution {layer}")
                if h < layer.kh or w < layer.kw:
                    raise DimensionError(f"layer {i}: {h}x{w} input smaller than {layer.kh}x{layer.kw} kernel")
                shape = (layer.num_kernels, h - layer.kh + 1, w - layer.kw + 1)
            elif isinstance(layer, Norm):
                _expect_spatial(shape, i)
                if layer.depth < 1 or layer.depth % 2 == 0 or layer.bias <= 0:
                    raise ConfigurationError(f"layer {i}: invalid normalization {layer}")
            elif isinstance(layer, Pool):
                c, h, w = _expect_spatial(shape, i)
                if layer.window != layer.stride or h % layer.stride or w % layer.stride:
                    raise DimensionError(f"layer {i}: cannot pool {h}x{w} with stride {layer.stride}")
                shape = (c, h // layer.stride, w // layer.stride)
            elif isinstance(layer, FullyConnected):
                shape = (layer.out_units,)
            elif isinstance(layer, SoftmaxLoss):
                if shape != (layer.classes,):
                    raise DimensionError(f"layer {i}: loss over {layer.classes} classes after output {shape}")
            else:
                raise ConfigurationError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        return out

    def conv_geometry(self):
        geo = []
        shape = self.input_shape
        for i, (layer, out_shape) in enumerate(zip(self.layers, self.shapes())):
            if isinstance(layer, Conv):
                c, h, w = shape
                geo.append(ConvGeometry(i, len(geo), c, h, w, layer.num_kernels, layer.kh, layer.kw))
            shape = out_shape
        return geo

    @property
    def classes(self):
        last = self.layers[-1]
        if not isinstance(last, SoftmaxLoss):
            raise ConfigurationError("network has no loss layer")
        return last.classes

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = _LAYER_TYPES.get(entry.pop("type", None))
            if kind is None:
                raise ConfigurationError(f"unknown layer type in {d['layers']!r}")
            layers.append(kind(**entry))
        return cls(tuple(layers), tuple(d.get("input_shape", (3, 32, 32))), d.get("name", ""))


def _expect_spatial(shape, i):
    if len(shape) != 3:
        raise DimensionError(f"layer {i} needs a (c, h, w) input, got {shape}")
    return shape


PRESETS = {"50:500": (50, 500), "150:800": (150, 800), "300:1000": (300, 1000), "500:1500": (500, 1500)}


def preset(name, classes=10, norm=None):
    """One of the four reference architectures, e.g. ``preset("50:500")``.

    Conv(5x5) -> Norm -> Pool(2) -> Conv(5x5) -> Norm -> Pool(2) -> FC -> softmax loss,
    on 32x32x3 inputs.
    """
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    c1, c2 = PRESETS[name]
    return custom_net(c1, c2, classes=classes, norm=norm, name=name)


def custom_net(c1, c2, input_shape=(3, 32, 32), kernel=5, classes=10, norm=None, name=""):
    """The reference layer sequence with arbitrary kernel counts and input size."""
    norm = norm or Norm()
    layers = (
        Conv(c1, kernel, kernel), norm, Pool(),
        Conv(c2, kernel, kernel), norm, Pool(),
        FullyConnected(classes), SoftmaxLoss(classes),
    )
    return NetworkSpec(layers, input_shape, name or f"{c1}:{c2}")


def init_params(spec, seed=0, std=None):
    """Zero-mean Gaussian weights, zero biases, drawn in layer order.

    ``std=None`` scales each layer by ``1 / sqrt(fan_in)`` so activations keep
    roughly unit variance through depth; a number fixes it for every layer.
    """
    rng = np.random.default_rng(seed)
    params = {}
    shape = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kh * layer.kw
            sd = std if std is not None else fan_in**-0.5
            params[f"conv{i}.weight"] = rng.normal(0.0, sd, (layer.num_kernels, shape[0], layer.kh, layer.kw))
        elif isinstance(layer, FullyConnected):
            fan_in = int(np.prod(shape))
            sd = std if std is not None else fan_in**-0.5
            params[f"fc{i}.weight"] = rng.normal(0.0, sd, (layer.out_units, fan_in))
            params[f"fc{i}.bias"] = np.zeros(layer.out_units)
        shape = out_shape
    return params


class LocalConv:
    """Conv executor that computes everything in the current process."""

    def __init__(self, clock=None):
        self.clock = clock

    def _phase(self):
        return self.clock.phase("conv") if self.clock is not None else nullcontext()

    def forward(self, geo, x, kernels):
        with self._phase():
            return T.conv2d_forward(x, kernels)

    def backward_input(self, geo, grad_out, kernels):
        with self._phase():
            return T.conv2d_backward_input(grad_out, kernels)

    def backward_kernels(self, geo, x, grad_out, kernels):
        with self._phase():
            return T.conv2d_backward_kernels(x, grad_out, kernels.shape)


@dataclass
class StepResult:
    params: dict
    loss: float
    accuracy: float
    grads: dict = field(repr=False, default_factory=dict)


def forward(spec, params, images, conv=None, clock=None, keep_cache=True):
    """Run the network up to (not including) the loss; returns ``(logits, cache)``.

    With ``keep_cache=False`` nothing is saved for a backward pass and
    normalization runs in place, which keeps inference-only passes small.
    """
    conv = conv or LocalConv(clock)
    comp = (lambda: clock.phase("comp")) if clock is not None else nullcontext
    geos = {g.layer_index: g for g in spec.conv_geometry()}
    x = np.asarray(images, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"images of shape {x.shape[1:]} do not match network input {spec.input_shape}")
    cache = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, SoftmaxLoss):
            break
        if isinstance(layer, Conv):
            out = conv.forward(geos[i], x, params[f"conv{i}.weight"])
            saved = x
        else:
            with comp():
                if isinstance(layer, Norm):
                    # in place only on arrays this pass created
                    inplace = not keep_cache and i > 0
                    out = T.lrn_forward(x, layer.depth, layer.alpha, layer.beta, layer.bias, out=x if inplace else None)
                    saved = x
                elif isinstance(layer, Pool):
                    out, saved = T.maxpool_forward(x, layer.window, layer.stride)
                else:
                    out = T.fc_forward(x, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
                    saved = x
        if keep_cache:
            cache.append(saved)
        x = out
        saved = None
    return x, cache


def backward(spec, params, cache, grad_logits, conv=None, clock=None):
    """Backpropagate ``grad_logits`` through the cached forward pass; returns the gradient dict."""
    conv = conv or LocalConv(clock)
    comp = (lambda: clock.phase("comp")) if clock is not None else nullcontext
    geos = {g.layer_index: g for g in spec.conv_geometry()}
    first_conv = min(geos)
    grads = {}
    g = grad_logits
    for i in reversed(range(len(cache))):
        if i < first_conv:
            break
        layer = spec.layers[i]
        saved = cache[i]
        if isinstance(layer, Conv):
            w = params[f"conv{i}.weight"]
            grads[f"conv{i}.weight"] = conv.backward_kernels(geos[i], saved, g, w)
            # the gradient w.r.t. the images is never needed
            g = conv.backward_input(geos[i], g, w) if i != first_conv else None
            continue
        with comp():
            if isinstance(layer, Norm):
                g = T.lrn_backward(saved, g, layer.depth, layer.alpha, layer.beta, layer.bias)
            elif isinstance(layer, Pool):
                g = T.maxpool_backward(g, saved)
            else:
                g, gw, gb = T.fc_backward(saved, params[f"fc{i}.weight"], g)
                grads[f"fc{i}.weight"] = gw
                grads[f"fc{i}.bias"] = gb
    return grads


def train_step(spec, params, images, labels, lr, conv=None, clock=None):
    """One SGD step on a batch; the conv executor decides where convolutions run."""
    comp = (lambda: clock.phase("comp")) if clock is not None else nullcontext
    logits, cache = forward(spec, params, images, conv, clock)
    with comp():
        loss, grad_logits = T.softmax_loss(logits, labels)
        accuracy = float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
    grads = backward(spec, params, cache, grad_logits, conv, clock)
    with comp():
        new_params = T.sgd_step(params, grads, lr)
    return StepResult(new_params, loss, accuracy, grads)


def evaluate(spec, params, images, labels, batch=256):
    """Loss and accuracy over a dataset, computed locally in chunks of ``batch``."""
    total_loss = 0.0
    correct = 0
    n = len(labels)
    for s in range(0, n, batch):
        logits, _ = forward(spec, params, images[s : s + batch])
        loss, _ = T.softmax_loss(logits, labels[s : s + batch])
        total_loss += loss * len(logits)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[s : s + batch]))
    return total_loss / n, correct / n
