"""Score-normalization kernels in double precision.

Every kernel maps a finite logit vector ``z`` of length ``n`` to a probability
vector. All of them reduce to a plain softmax of rescaled logits:

    softmax        exp(z_i)
    ssmax          n ** (s * z_i)            == exp((s ln n) z_i)
    ssmax_bias     exp((s ln n + b) z_i)
    softmax_pn     exp((s p_n + b) z_i)      with p_n looked up per length

so the single stable routine :func:`softmax` does the actual work.
"""

from __future__ import annotations

import math

import numpy as np

VARIANTS = ("softmax", "ssmax", "ssmax_bias", "softmax_pn")


class KernelDomainError(ValueError):
    """Non-finite input, mismatched lengths, or an invalid scalar."""


class KernelRangeError(IndexError):
    """Input length outside the supported range (e.g. longer than a p_n table)."""


class BoundPreconditionError(ValueError):
    """The max-element bounds need a unique maximum and s > 0."""


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise KernelDomainError(f"expected a non-empty 1-d logit vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise KernelDomainError("logits must be finite")
    return z


def _check_scalar(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise KernelDomainError(f"{name} must be finite, got {value}")
    return value


def softmax(z) -> np.ndarray:
    z = _as_logits(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def ssmax(z, s: float) -> np.ndarray:
    """Scalable-Softmax: softmax of the logits multiplied by ``s * ln(n)``.

    At n == 1 the factor is zero and the result is ``[1.0]``.
    """
    z = _as_logits(z)
    s = _check_scalar("s", s)
    return softmax((s * math.log(z.size)) * z)


def ssmax_bias(z, s: float, b: float) -> np.ndarray:
    z = _as_logits(z)
    s = _check_scalar("s", s)
    b = _check_scalar("b", b)
    return softmax((s * math.log(z.size) + b) * z)


def softmax_pn(z, s: float, b: float, pn) -> np.ndarray:
    """Softmax with a learned per-length temperature ``s * p_n + b``.

    ``pn[n - 1]`` holds the entry for vectors of length ``n``.
    """
    z = _as_logits(z)
    s = _check_scalar("s", s)
    b = _check_scalar("b", b)
    pn = np.asarray(pn, dtype=np.float64)
    n = z.size
    if n > pn.size:
        raise KernelRangeError(f"vector length {n} exceeds p_n table length {pn.size}")
    return softmax((s * float(pn[n - 1]) + b) * z)


def scale_factor(n: int, variant: str, s: float = 1.0, b: float = 0.0, pn=None) -> float:
    """The multiplier applied to the logits by ``variant`` for a length-``n`` vector."""
    if variant == "softmax":
        return 1.0
    if variant == "ssmax":
        return s * math.log(n)
    if variant == "ssmax_bias":
        return s * math.log(n) + b
    if variant == "softmax_pn":
        if pn is None or n > len(pn):
            raise KernelRangeError(f"no p_n entry for length {n}")
        return s * float(pn[n - 1]) + b
    raise KernelDomainError(f"unknown variant {variant!r}")


def kernel_backward(z, s: float, upstream, variant: str = "ssmax", b: float = 0.0, pn=None):
    """Vector-Jacobian product of a kernel.

    Returns ``(grad_z, grads)`` where ``grads`` maps each scalar parameter of the
    variant (``s``, ``b``, and for ``softmax_pn`` the used table entry ``p_n``)
    to its gradient. Plain softmax has no scalar parameters.
    """
    z = _as_logits(z)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != z.shape:
        raise KernelDomainError(f"upstream shape {upstream.shape} does not match logits {z.shape}")
    if not np.all(np.isfinite(upstream)):
        raise KernelDomainError("upstream gradient must be finite")
    s = _check_scalar("s", s)
    b = _check_scalar("b", b)

    n = z.size
    c = scale_factor(n, variant, s, b, pn)
    y = softmax(c * z)
    # (diag(y) - y y^T) g
    jg = y * (upstream - np.dot(y, upstream))
    grad_z = c * jg
    dc = float(np.dot(z, jg))

    grads: dict[str, float] = {}
    if variant == "ssmax":
        grads["s"] = math.log(n) * dc
    elif variant == "ssmax_bias":
        grads["s"] = math.log(n) * dc
        grads["b"] = dc
    elif variant == "softmax_pn":
        p = float(pn[n - 1])
        grads["s"] = p * dc
        grads["b"] = dc
        grads["p_n"] = s * dc
    return grad_z, grads


def max_output_bounds(z, s: float) -> tuple[float, float, float]:
    """Analytic bounds on the largest output element.

    Returns ``(softmax_upper, ssmax_lower, ssmax_upper)``: an upper bound on
    ``max(softmax(z))`` and a lower/upper pair sandwiching ``max(ssmax(z, s))``.
    """
    z = _as_logits(z)
    s = _check_scalar("s", s)
    n = z.size
    if n < 2:
        raise BoundPreconditionError("bounds need at least two elements")
    if s <= 0:
        raise BoundPreconditionError(f"bounds assume s > 0, got {s}")
    ordered = np.sort(z)
    z_max, z_2nd, z_min = ordered[-1], ordered[-2], ordered[0]
    if not z_max > z_2nd:
        raise BoundPreconditionError("bounds assume a unique maximum (z_max > z_2nd)")

    softmax_upper = 1.0 / ((n - 1) * math.exp(-(z_max - z_min)) + 1.0)
    log_n = math.log(n)
    ssmax_upper = 1.0 / ((n - 1) * math.exp(-s * log_n * (z_max - z_min)) + 1.0)
    ssmax_lower = 1.0 / ((n - 1) * math.exp(-s * log_n * (z_max - z_2nd)) + 1.0)
    return softmax_upper, ssmax_lower, ssmax_upper


def fig1_vector(n: int, low: float = -2.0, high: float = 3.0) -> np.ndarray:
    """All entries ``low`` except the last, which is ``high``."""
    z = np.full(n, low, dtype=np.float64)
    z[-1] = high
    return z


def fig3_vector(n: int, z_max: float) -> np.ndarray:
    """``n - 1`` evenly spaced points on [0, 1] followed by a free element ``z_max``."""
    if n < 3:
        raise KernelRangeError(f"the sweep pattern needs n >= 3, got {n}")
    grid = np.arange(n - 1, dtype=np.float64) / (n - 2)
    return np.append(grid, float(z_max))


def fading_curve(pattern: str, sizes, s: float | None = None, z_max_values=None) -> list[dict]:
    """Tabulate max-output curves for Softmax and SSMax.

    ``pattern="fig1"``: one row per size with the largest output of each kernel
    (``s`` defaults to 0.43).

    ``pattern="fig3"``: one row per (size, z_max) with the output assigned to the
    free element ``z_max`` by Softmax and by SSMax at scaling ``s`` (default 1).
    """
    if pattern == "fig1":
        s = 0.43 if s is None else s
        rows = []
        for n in sizes:
            n = int(n)
            if n < 1:
                raise KernelRangeError(f"size must be positive, got {n}")
            z = fig1_vector(n)
            rows.append({"n": n, "softmax": float(softmax(z).max()), "ssmax": float(ssmax(z, s).max())})
        return rows
    if pattern == "fig3":
        s = 1.0 if s is None else s
        if z_max_values is None:
            z_max_values = np.linspace(0.0, 6.0, 61)
        rows = []
        for n in sizes:
            n = int(n)
            for zm in z_max_values:
                z = fig3_vector(n, zm)
                rows.append(
                    {
                        "n": n,
                        "s": float(s),
                        "z_max": float(zm),
                        "softmax": float(softmax(z)[-1]),
                        "ssmax": float(ssmax(z, s)[-1]),
                    }
                )
        return rows
    raise KernelDomainError(f"unknown pattern {pattern!r}; expected 'fig1' or 'fig3'")
