"""Independent reference computations used only by the tests."""
from __future__ import annotations

import numpy as np


def jacobi_eigvalsh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by classical two-sided cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def singular_values_2x2(g) -> np.ndarray:
    """Closed form: roots of the characteristic polynomial of GᵀG."""
    g = np.asarray(g, dtype=np.float64)
    gram = g.T @ g
    tr = np.trace(gram)
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    disc = np.sqrt(max(tr * tr / 4.0 - det, 0.0))
    return np.sqrt(np.maximum([tr / 2.0 + disc, tr / 2.0 - disc], 0.0))


def orthogonal_grid_2x2(points: int = 10_000):
    """`points` orthogonal 2x2 matrices: half rotations, half reflections, evenly spaced angles."""
    half = points // 2
    phi = np.linspace(0.0, 2.0 * np.pi, half, endpoint=False)
    c, s = np.cos(phi), np.sin(phi)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    ref = np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2)
    return np.concatenate([rot, ref])


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Numerical gradient of scalar f with respect to array x (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b, floor: float = 1e-7) -> float:
    """Norm-wise relative error; `floor` keeps analytically-zero gradients (conv bias before BN) meaningful."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def layer_gradient_errors(layer, x, rng, train=True) -> dict:
    """Backprop vs central differences for loss = sum(out * r), over inputs and parameters."""
    out = layer.forward(x, train)
    r = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * r))

    layer.forward(x, train)
    dx = layer.backward(r)
    errors = {"input": rel_error(dx, central_difference(loss, x))}
    for p in layer.params:
        errors[p.name] = rel_error(p.grad, central_difference(loss, p.data))
    return errors
