"""Dense layer primitives, the fused softmax/cross-entropy loss, Adam and gradient checking.

Everything is float64. Models expose two methods used by the training loop and by
`gradcheck`:

* `parameters()` - ordered name -> live numpy array mapping (updated in place)
* `loss_and_grads(batch)` - mean batch loss and a gradient dict with the same names
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class ShapeException(Exception):
    pass


@dataclass(eq=False)
class DenseParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.ndim != 1 or self.W.shape[1] != self.b.shape[0]:
            raise ShapeException('inconsistent layer shapes W{} b{}'.format(self.W.shape, self.b.shape))

    @property
    def in_dim(self)->int:
        return int(self.W.shape[0])

    @property
    def out_dim(self)->int:
        return int(self.W.shape[1])

    @property
    def size(self)->int:
        return int(self.W.size + self.b.size)


class GCNLayerParams(DenseParams):
    pass


@dataclass(eq=False)
class DenseBatch:
    """Row vectors `inputs` (B, d) with integer `labels` (B,)."""
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self)->int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray)->'DenseBatch':
        return DenseBatch(inputs=self.inputs[index], labels=self.labels[index])


def dense_forward(x: np.ndarray, params: DenseParams)->np.ndarray:
    if x.shape[-1] != params.in_dim:
        raise ShapeException('input has {} features, layer expects {}'.format(x.shape[-1], params.in_dim))
    return x @ params.W + params.b


def gcn_layer_forward(a_norm: np.ndarray, h: np.ndarray, params: GCNLayerParams)->np.ndarray:
    """A_norm . H . W + b, for one graph (k,k)/(k,in) or a batch (B,k,k)/(B,k,in)."""
    if a_norm.shape[-1] != a_norm.shape[-2]:
        raise ShapeException('adjacency must be square, got {}'.format(a_norm.shape))
    if h.shape[-2] != a_norm.shape[-1]:
        raise ShapeException('adjacency {} does not match {} node rows'.format(a_norm.shape, h.shape[-2]))
    if h.shape[-1] != params.in_dim:
        raise ShapeException('node features have {} columns, layer expects {}'.format(h.shape[-1], params.in_dim))
    return (a_norm @ h) @ params.W + params.b


def relu(m: np.ndarray)->np.ndarray:
    return np.maximum(m, 0.0)


def softmax(logits: np.ndarray)->np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int)->Tuple[float, np.ndarray]:
    """Loss -log p[label] and its gradient p - one_hot(label) with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits)
    log_sum = m + np.log(np.sum(np.exp(logits - m)))
    p = np.exp(logits - log_sum)
    grad = p.copy()
    grad[label] -= 1.0
    return float(log_sum - logits[label]), grad


def batch_softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray)->Tuple[float, np.ndarray]:
    """Mean loss over the batch and the gradient of that mean."""
    m = np.max(logits, axis=1, keepdims=True)
    log_sum = m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))
    rows = np.arange(logits.shape[0])
    losses = log_sum[:, 0] - logits[rows, labels]
    grad = np.exp(logits - log_sum)
    grad[rows, labels] -= 1.0
    n = float(logits.shape[0])
    return float(np.mean(losses)), grad / n


@dataclass(eq=False)
class AdamState:
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float)->Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to the parameter arrays."""
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeException('gradient "{}" has shape {}, parameter has {}'.format(name, g.shape, param.shape))
        if name not in state.m:
            state.m[name] = np.zeros(param.shape, dtype=np.float64)
            state.v[name] = np.zeros(param.shape, dtype=np.float64)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        param -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator)->np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ShapeException('fans must be positive, got {} and {}'.format(fan_in, fan_out))
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_dense(fan_in: int, fan_out: int, rng: np.random.Generator, params_class: type=DenseParams)->DenseParams:
    return params_class(W=glorot_init(fan_in=fan_in, fan_out=fan_out, rng=rng), b=np.zeros(fan_out, dtype=np.float64))


class SoftmaxRegression:
    """Linear classifier, logits = x W + b. Used as the smooth gradcheck control."""

    kind = 'softmax-regression'

    def __init__(self, linear: DenseParams):
        self.linear = linear

    @classmethod
    def initialize(cls, rng: np.random.Generator, input_dim: int=9)->'SoftmaxRegression':
        return cls(linear=init_dense(fan_in=input_dim, fan_out=2, rng=rng))

    def layers(self)->Dict[str, DenseParams]:
        return OrderedDict([('linear', self.linear)])

    def parameters(self)->Dict[str, np.ndarray]:
        return OrderedDict([('linear.W', self.linear.W), ('linear.b', self.linear.b)])

    def logits(self, batch: DenseBatch)->np.ndarray:
        return dense_forward(x=batch.inputs, params=self.linear)

    def loss_and_grads(self, batch: DenseBatch)->Tuple[float, Dict[str, np.ndarray]]:
        loss, d_logits = batch_softmax_cross_entropy(logits=self.logits(batch=batch), labels=batch.labels)
        return loss, OrderedDict([('linear.W', batch.inputs.T @ d_logits), ('linear.b', d_logits.sum(axis=0))])


def relative_error(analytic: float, numeric: float)->float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)


def gradcheck(model, sample, epsilon: float=1e-5, gradient_hook: Optional[Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]]]=None)->float:
    """Largest relative error between analytic and central finite-difference gradients.

    `gradient_hook` may rewrite the analytic gradients before comparison; it exists
    so that a deliberately broken gradient can be used as a negative control.
    """
    _, analytic = model.loss_and_grads(sample)
    if gradient_hook is not None:
        analytic = gradient_hook(analytic)
    worst = 0.0
    for name, param in model.parameters().items():
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + epsilon
            loss_plus, _ = model.loss_and_grads(sample)
            param[index] = original - epsilon
            loss_minus, _ = model.loss_and_grads(sample)
            param[index] = original
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            worst = max(worst, relative_error(analytic=float(analytic[name][index]), numeric=numeric))
    return worst
