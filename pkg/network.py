"""
Signal-to-signal networks with hand-written reverse-mode gradients.

A network is an ordered list of layer specs applied to the whole signal:
Dense layers act on the flattened vector, ConvSame layers on the image
(single channel, stride 1, zero padding, one scalar bias per layer).
A residual network adds its input to the output of the last layer; its
last layer starts at zero, so a fresh residual network is the identity.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.signal import convolve, correlate

from numerics_core import ArityMismatchError, InvalidArgumentError, SeededRng

logger = logging.getLogger(__name__)

Tensor = np.ndarray


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise InvalidArgumentError(f"Dense dimensions must be positive, got {self.n_in}x{self.n_out}")

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if int(np.prod(input_shape)) != self.n_in:
            raise ArityMismatchError(f"Dense({self.n_in}, {self.n_out}) cannot take input of shape {input_shape}")
        return (self.n_out,)

    def to_dict(self) -> Dict:
        return {'type': 'dense', 'in': self.n_in, 'out': self.n_out}


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(input_shape)

    def to_dict(self) -> Dict:
        return {'type': 'relu'}


@dataclass(frozen=True)
class ConvSame:
    kh: int
    kw: int

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1:
            raise InvalidArgumentError(f"Kernel dimensions must be positive, got {self.kh}x{self.kw}")

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(input_shape) != 2:
            raise ArityMismatchError(f"ConvSame needs a 2D input, got shape {input_shape}")
        return tuple(input_shape)

    @property
    def padding(self) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        top, left = (self.kh - 1) // 2, (self.kw - 1) // 2
        return (top, self.kh - 1 - top), (left, self.kw - 1 - left)

    def to_dict(self) -> Dict:
        return {'type': 'conv_same', 'kh': self.kh, 'kw': self.kw}


LayerSpec = Union[Dense, ReLU, ConvSame]


def layer_from_dict(data: Dict) -> LayerSpec:
    kind = data.get('type')
    if kind == 'dense':
        return Dense(int(data['in']), int(data['out']))
    if kind == 'relu':
        return ReLU()
    if kind == 'conv_same':
        return ConvSame(int(data['kh']), int(data['kw']))
    raise InvalidArgumentError(f"Unknown layer type: {kind}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_shape', tuple(int(d) for d in self.input_shape))
        shapes = self.shapes()
        if self.residual and shapes[-1] != self.input_shape:
            raise ArityMismatchError(f"A residual network must keep its input shape {self.input_shape}, "
                                     f"got output shape {shapes[-1]}")
        if self.residual and not any(isinstance(layer, (Dense, ConvSame)) for layer in self.layers):
            raise InvalidArgumentError("A residual network needs at least one parametric layer")

    def shapes(self) -> List[Tuple[int, ...]]:
        """Input shape followed by the output shape of every layer"""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.shapes()[-1]

    def to_dict(self) -> Dict:
        return {'input_shape': list(self.input_shape), 'layers': [layer.to_dict() for layer in self.layers],
                'residual': self.residual}

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkSpec":
        return cls(tuple(layer_from_dict(item) for item in data['layers']), tuple(data['input_shape']),
                   bool(data.get('residual', False)))


def dense_network(length: int, hidden: int = 1000, residual: bool = False) -> NetworkSpec:
    return NetworkSpec((Dense(length, hidden), ReLU(), Dense(hidden, hidden), ReLU(), Dense(hidden, length)),
                       (length,), residual)


def conv_network(shape: Tuple[int, int], kernel: Optional[Tuple[int, int]] = None,
                 residual: bool = False) -> NetworkSpec:
    kh, kw = kernel if kernel is not None else shape
    return NetworkSpec((ConvSame(kh, kw), ReLU(), ConvSame(kh, kw), ReLU(), ConvSame(kh, kw)), tuple(shape), residual)


class ParamStore(OrderedDict):
    """Named parameter tensors in layer order ('layer0.weight', 'layer0.bias', ...)"""

    def copy(self) -> "ParamStore":
        return ParamStore((name, value.copy()) for name, value in self.items())

    def zeros_like(self) -> "ParamStore":
        return ParamStore((name, np.zeros_like(value)) for name, value in self.items())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.values())


def init_params(spec: NetworkSpec, rng: SeededRng) -> ParamStore:
    """
    Uniform in +-sqrt(6 / fan_in) for weights and kernels, zero biases.
    The last parametric layer of a residual network starts at zero.
    """
    params = ParamStore()
    last = None
    for index, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / layer.n_in)
            params[f'layer{index}.weight'] = rng.uniform(-bound, bound, size=(layer.n_out, layer.n_in))
            params[f'layer{index}.bias'] = np.zeros(layer.n_out)
        elif isinstance(layer, ConvSame):
            bound = np.sqrt(6.0 / (layer.kh * layer.kw))
            params[f'layer{index}.kernel'] = rng.uniform(-bound, bound, size=(layer.kh, layer.kw))
            params[f'layer{index}.bias'] = np.zeros(())
        if isinstance(layer, (Dense, ConvSame)):
            last = index
    if spec.residual:
        for name in params:
            if name.startswith(f'layer{last}.'):
                params[name] = np.zeros_like(params[name])
    return params


def _conv_same(image: np.ndarray, kernel: np.ndarray, layer: ConvSame) -> np.ndarray:
    padded = np.pad(image, layer.padding)
    return correlate(padded, kernel, mode='valid')


def _check_input(spec: NetworkSpec, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        if x.size != int(np.prod(spec.input_shape)):
            raise ArityMismatchError(f"Network expects input of shape {spec.input_shape}, got {x.shape}")
        x = x.reshape(spec.input_shape)
    return x


def _forward_cached(spec: NetworkSpec, params: ParamStore, x: Tensor) -> List[Tensor]:
    activations = [_check_input(spec, x)]
    for index, layer in enumerate(spec.layers):
        current = activations[-1]
        if isinstance(layer, Dense):
            out = params[f'layer{index}.weight'] @ current.ravel() + params[f'layer{index}.bias']
        elif isinstance(layer, ConvSame):
            out = _conv_same(current, params[f'layer{index}.kernel'], layer) + params[f'layer{index}.bias']
        else:
            out = np.maximum(current, 0.0)
        activations.append(out)
    return activations


def forward(spec: NetworkSpec, params: ParamStore, x: Tensor) -> Tensor:
    activations = _forward_cached(spec, params, x)
    if spec.residual:
        return activations[-1] + activations[0]
    return activations[-1]


def backward(spec: NetworkSpec, params: ParamStore, x: Tensor,
             output_grad: Tensor) -> Tuple[ParamStore, Tensor]:
    """Gradients of <output_grad, forward(x)> with respect to every parameter and to x"""
    activations = _forward_cached(spec, params, x)
    grad = np.asarray(output_grad, dtype=np.float64)
    if grad.size != activations[-1].size:
        raise ArityMismatchError(f"Output gradient has {grad.size} entries, network output has {activations[-1].size}")
    grad = grad.reshape(activations[-1].shape)
    skip_grad = grad.reshape(activations[0].shape) if spec.residual else None
    param_grads = params.zeros_like()
    for index in reversed(range(len(spec.layers))):
        layer = spec.layers[index]
        layer_input = activations[index]
        if isinstance(layer, Dense):
            flat_input = layer_input.ravel()
            param_grads[f'layer{index}.weight'] = np.outer(grad, flat_input)
            param_grads[f'layer{index}.bias'] = grad.copy()
            grad = (params[f'layer{index}.weight'].T @ grad).reshape(layer_input.shape)
        elif isinstance(layer, ConvSame):
            padded = np.pad(layer_input, layer.padding)
            param_grads[f'layer{index}.kernel'] = correlate(padded, grad, mode='valid')
            param_grads[f'layer{index}.bias'] = np.asarray(grad.sum())
            full = convolve(grad, params[f'layer{index}.kernel'], mode='full')
            (top, _), (left, _) = layer.padding
            grad = full[top:top + layer_input.shape[0], left:left + layer_input.shape[1]]
        else:
            # subgradient 0 at the kink
            grad = grad * (layer_input > 0)
    if skip_grad is not None:
        grad = grad + skip_grad
    return param_grads, grad


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore, grads: ParamStore) -> ParamStore:
    """Bias-corrected Adam update; advances `state` in place and returns the new parameters"""
    if list(params.keys()) != list(grads.keys()):
        raise ArityMismatchError("Gradient names do not match parameter names")
    state.t += 1
    updated = ParamStore()
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ArityMismatchError(f"Gradient for {name} has shape {grad.shape}, expected {value.shape}")
        m = state.first_moment.get(name, np.zeros_like(value))
        v = state.second_moment.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad ** 2
        state.first_moment[name] = m
        state.second_moment[name] = v
        updated[name] = value - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps_hat)
    return updated
