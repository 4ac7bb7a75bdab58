"""Layer containers, the Adam optimiser and a finite-difference gradient checker."""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]


def _param(values):
    return Tensor(values, requires_grad=True, dtype=np.float32)


def _uniform(rng, bound, shape):
    return _param(rng.uniform(-bound, bound, size=shape))


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng):
        # He-style uniform fan-in scaling
        self.weight = _uniform(rng, np.sqrt(6.0 / (in_ch * 9)), (out_ch, in_ch, 3, 3))
        self.bias = _param(np.zeros(out_ch))

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = _uniform(rng, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))
        self.bias = _param(np.zeros(out_dim))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class GRUCell(Module):
    def __init__(self, in_dim, hidden, rng):
        bound = 1.0 / np.sqrt(hidden)
        for gate in "zrh":
            setattr(self, f"w_{gate}", _uniform(rng, bound, (hidden, in_dim)))
            setattr(self, f"u_{gate}", _uniform(rng, bound, (hidden, hidden)))
            setattr(self, f"b_{gate}", _param(np.zeros(hidden)))
        self.hidden = hidden

    def __call__(self, x, h):
        return T.gru_step(x, h, self)


class ConvBlock(Module):
    """conv -> ReLU -> BatchNorm, twice."""

    def __init__(self, in_ch, out_ch, rng):
        self.conv1 = Conv2d(in_ch, out_ch, rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, rng)
        self.bn2 = BatchNorm2d(out_ch)

    def __call__(self, x):
        x = self.bn1(T.relu(self.conv1(x)))
        return self.bn2(T.relu(self.conv2(x)))


class Adam:
    """Bias-corrected Adam.  Moments are kept in float64."""

    def __init__(self, params, lr=0.002, betas=(0.9, 0.99), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list = field(default_factory=list)
    n_checked: int = 0

    def passed(self, tol):
        return self.max_rel_error < tol


def grad_check(fn, inputs, h=1e-3, max_per_input=None, skip=None, rng=None, promote=()):
    """Compare analytic gradients of the scalar ``fn()`` with central differences.

    ``fn`` is re-evaluated with each checked element of each input perturbed by
    +-h; differences are accumulated in float64 using the perturbation that was
    actually stored.  The error of one input is ``max|a - n| / max(max|a|, max|n|)``
    over its checked elements.  ``skip`` maps an input index to a boolean mask of
    elements to leave out (non-differentiable points such as ReLU at 0).

    ``promote`` lists modules or tensors whose data is cast to float64 while the
    differences are taken, so a 32-bit graph is checked against a 64-bit oracle.
    The original arrays are restored afterwards.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    skip = skip or {}
    for x in inputs:
        x.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64) for x in inputs]

    promoted = []
    for m in promote:
        tensors = [m] if isinstance(m, Tensor) else m.parameters()
        promoted.extend((t, t.data) for t in tensors)
    seen = set()
    for t, data in promoted:
        if id(t) not in seen:
            seen.add(id(t))
            t.data = data.astype(np.float64)

    errors = []
    n_checked = 0
    try:
        errors, n_checked = _differences(fn, inputs, analytic, h, max_per_input, skip, rng)
    finally:
        for t, data in promoted:
            t.data = data
    return GradCheckReport(max(errors, default=0.0), errors, n_checked)


def _differences(fn, inputs, analytic, h, max_per_input, skip, rng):
    errors = []
    n_checked = 0
    with T.no_grad():
        for k, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            candidates = np.arange(flat.size)
            if k in skip:
                candidates = candidates[~np.asarray(skip[k]).reshape(-1)]
            if max_per_input is not None and candidates.size > max_per_input:
                candidates = np.sort(rng.choice(candidates, max_per_input, replace=False))
            num = np.zeros(candidates.size)
            for j, idx in enumerate(candidates):
                orig = flat[idx]
                flat[idx] = orig + h
                up = float(flat[idx])
                fp = float(fn().data)
                flat[idx] = orig - h
                down = float(flat[idx])
                fm = float(fn().data)
                flat[idx] = orig
                num[j] = (fp - fm) / (up - down)
            ana = analytic[k].reshape(-1)[candidates]
            denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
            err = 0.0 if denom == 0 else float(np.abs(ana - num).max() / denom)
            errors.append(err)
            n_checked += candidates.size
    return errors, n_checked
