"""Central finite-difference gradient checking."""
import numpy as np

from .autodiff import Tensor, kink_probe, no_grad


def numeric_grad(fn, arrays, wrt, step=1e-5):
    """d fn(*arrays) / d arrays[wrt] by central differences.

    ``fn`` may return a float or an array of terms to be summed.  Terms are
    differenced before summation, so entries the perturbation leaves
    unchanged cancel exactly instead of adding rounding noise.
    """
    x = arrays[wrt]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = fn(*arrays)
        x[idx] = orig - step
        fm = fn(*arrays)
        x[idx] = orig
        grad[idx] = np.sum(np.asarray(fp) - np.asarray(fm)) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def max_scaled_error(analytic, numeric):
    """Largest |a - n| relative to the largest gradient magnitude in the tensor.

    Used where individual entries may be ~0 by construction, which makes the
    entrywise ratio meaningless.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.max(np.abs(numeric)) + 1e-8
    return float(np.max(np.abs(analytic - numeric)) / denom)


def check_op(op, arrays, step=1e-5, seed=0):
    """Compare analytic and numeric gradients of ``sum(r * op(*inputs))``.

    ``r`` is a fixed random projection so that every output entry matters.
    Returns the worst entrywise relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays])
    r = np.random.default_rng(seed).standard_normal(out.shape)

    def f(*arrs):
        with no_grad():
            return op(*[Tensor(a) for a in arrs]).data * r

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*tensors)
    y.backward(r)
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(f, arrays, i, step)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def check_params(fn, params, step=1e-5, seed=0):
    """Like ``check_op`` but for a closure over named float64 ``Param`` leaves.

    ``fn()`` rebuilds the graph from the current parameter values; each
    parameter entry is perturbed in place for the numeric estimate.
    Returns ``{name: relative error}``.
    """
    out = fn()
    r = np.random.default_rng(seed).standard_normal(out.shape)
    for p in params:
        p.grad = None
    fn().backward(r)
    errors = {}
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f(*_):
            with no_grad():
                return fn().data * r

        num = numeric_grad(f, [p.data], 0, step)
        errors[p.name] = relative_error(analytic, num)
    return errors


def kink_distance(fn, *args):
    """Smallest |relu input| met while evaluating ``fn(*args)`` (inf if none)."""
    with no_grad(), kink_probe() as seen:
        fn(*args)
    return min(seen, default=float("inf"))


def check_directional(fn, params, step=1e-5, seed=0):
    """Directional-derivative check, one random direction per leaf.

    For each leaf ``p`` and a standard-normal direction ``v`` compares
    ``sum(grad * v)`` with ``(f(p + step v) - f(p - step v)) / (2 step)``.
    Costs two forward passes per leaf instead of two per entry.
    Returns ``{name: relative error}``.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    r = rng.standard_normal(out.shape)
    for p in params:
        p.grad = None
    fn().backward(r)
    errors = {}
    for p in params:
        v = rng.standard_normal(p.shape)
        analytic = float(np.sum((p.grad if p.grad is not None else 0.0) * v))
        base = p.data.copy()
        with no_grad():
            p.data = base + step * v
            fp = fn().data * r
            p.data = base - step * v
            fm = fn().data * r
        p.data = base
        numeric = float(np.sum(fp - fm)) / (2 * step)
        errors[p.name] = abs(analytic - numeric) / (abs(numeric) + 1e-8)
    return errors
