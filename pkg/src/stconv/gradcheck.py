"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from .autograd import Tape, Var, backward


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def numeric_grad(f, arr: np.ndarray, index, h: float = 1e-5) -> float:
    """d f / d arr[index] by central differences; ``arr`` is restored afterwards."""
    old = arr[index]
    arr[index] = old + h
    fp = float(f())
    arr[index] = old - h
    fm = float(f())
    arr[index] = old
    return (fp - fm) / (2 * h)


def check_gradients(build_loss, leaves: dict[str, Var], h: float = 1e-5, samples: int | None = None,
                    rng=None) -> dict[str, float]:
    """Compare tape gradients of ``build_loss(tape)`` against finite differences.

    ``build_loss`` must return a scalar Var and be deterministic. For each
    leaf, either every element or ``samples`` random elements are probed.
    Returns the relative error per leaf name.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for v in leaves.values():
        v.grad = None
        v.requires_grad = True
    tape = Tape()
    loss = build_loss(tape)
    backward(tape, loss)
    analytic = {k: (np.zeros_like(v.data) if v.grad is None else v.grad.copy()) for k, v in leaves.items()}

    def f():
        return build_loss(None).data

    errors = {}
    for name, v in leaves.items():
        flat = list(np.ndindex(v.data.shape))
        if samples is not None and samples < len(flat):
            pick = rng.choice(len(flat), size=samples, replace=False)
            flat = [flat[i] for i in pick]
        num = np.array([numeric_grad(f, v.data, i, h) for i in flat])
        ana = np.array([analytic[name][i] for i in flat])
        errors[name] = relative_error(ana, num)
    return errors
