"""Adam with step-decayed learning rate, gradient clipping and finite-difference checks."""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from autodiff import Parameter, no_grad
from errors import StateError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    decay_factor: float = 0.5
    decay_period: Optional[int] = None
    base_lr: Optional[float] = None
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.lr

    def scheduled_lr(self) -> float:
        """Learning rate for the update about to happen (halved every decay_period steps)."""
        if not self.decay_period:
            return self.base_lr
        return self.base_lr * self.decay_factor ** (self.step // self.decay_period)


def adam_step(params: Dict[str, Parameter], state: AdamState, grads: Optional[Dict[str, np.ndarray]] = None):
    """One bias-corrected Adam update, in place. Parameters without a gradient raise StateError."""
    state.lr = state.scheduled_lr()
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name] if grads is not None else param.grad
        if grad is None:
            raise StateError(f"parameter '{name}' has no gradient; run backward() first")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)


def zero_grad(params: Iterable[Parameter]):
    for param in params:
        param.grad = None


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float(np.sum(np.square(param.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Parameter], max_norm: float = 5.0) -> float:
    """Rescale all gradients together so their global L2 norm is at most max_norm.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for param in params:
            if param.grad is not None:
                param.grad = param.grad * scale
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: Dict[str, float]
    tolerance: float
    deterministic: bool
    dtype: str

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.deterministic and self.worst <= self.tolerance


def grad_check(
    closure: Callable[[], "object"],
    params: Dict[str, Parameter],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: Optional[int] = 64,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients with central differences of a scalar closure.

    The closure must rebuild the loss from the current parameter values. Parameters
    should be float64; a float32 graph cannot reach the default tolerance.
    """
    rng = np.random.default_rng(seed)
    zero_grad(params.values())
    loss = closure()
    loss.backward()
    analytic = {name: np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    with no_grad():
        deterministic = closure().item() == loss.item()

    errors = {}
    for name, param in params.items():
        param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            with no_grad():
                flat[idx] = original + h
                plus = closure().item()
                flat[idx] = original - h
                minus = closure().item()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[idx]
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, rel)
        errors[name] = worst
    zero_grad(params.values())
    dtype = str(next(iter(params.values())).dtype) if params else "float64"
    return GradCheckReport(errors, tolerance, deterministic, dtype)
