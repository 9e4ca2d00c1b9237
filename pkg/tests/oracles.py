"""Independent reference computations used by the test-suite.

None of these go through the tape: gradients come from central finite
differences, bounds from a linear scan, convolutions from explicit loops.
"""

import numpy as np


def central_diff(f, arr, indices=None, h=1e-3):
    """d f / d arr[i] by central differences, perturbing ``arr`` in place.

    Uses the actually-representable step ``(x+h) - (x-h)`` so 32-bit
    parameters do not bias the estimate.
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        hi_x = float(flat[i])
        f_hi = float(f())
        flat[i] = orig - h
        lo_x = float(flat[i])
        f_lo = float(f())
        flat[i] = orig
        out.append((f_hi - f_lo) / (hi_x - lo_x))
    return np.array(out)


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def conv2d_loops(x, w, b):
    """Direct nested-loop zero-padded cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for y in range(h):
            for z in range(wd):
                out[o, y, z] = np.sum(xp[:, y:y + k, z:z + k] * w[o]) + (b[o] if b is not None else 0.0)
    return out


def scan_bounds(sorted_keys, t):
    """Lower/upper bound keys by linear scan, with the clamp rule at both ends."""
    lower = upper = None
    for k in sorted_keys:
        if k == t:
            return k, k
        if k < t:
            lower = k
        elif upper is None:
            upper = k
    if lower is None:
        lower = upper
    if upper is None:
        upper = lower
    return lower, upper
