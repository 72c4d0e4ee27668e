"""Independent oracles shared by the test modules."""

import numpy as np

from invrobust.autodiff import Tape, Tensor


def naive_conv2d(x, k, b, padding):
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        xp = np.zeros((n, h + kh - 1, w + kw - 1, cin))
        xp[:, pt : pt + h, pl : pl + w, :] = x
        oh, ow = h, w
    else:
        xp = x
        oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((n, oh, ow, cout))
    for a in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    s = b[o]
                    for p in range(kh):
                        for q in range(kw):
                            for c in range(cin):
                                s += xp[a, i + p, j + q, c] * k[p, q, c, o]
                    out[a, i, j, o] = s
    return out


def naive_matmul(a, w, b):
    n, d = a.shape
    u = w.shape[1]
    out = np.zeros((n, u))
    for i in range(n):
        for j in range(u):
            s = b[j]
            for t in range(d):
                s += a[i, t] * w[t, j]
            out[i, j] = s
    return out


def central_difference(f, arrays, wrt, h=1e-3, indices=None):
    """d f / d arrays[wrt] by central differences, optionally at selected flat indices."""
    base = arrays[wrt]
    grad = np.zeros(base.size)
    idx = range(base.size) if indices is None else indices
    for i in idx:
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[wrt].flat[i] += h
        minus[wrt].flat[i] -= h
        grad[i] = (f(*plus) - f(*minus)) / (2 * h)
    return grad.reshape(base.shape)


def tape_gradients(build, arrays):
    """Run ``build`` on differentiable copies of ``arrays``; return loss and per-input gradients."""
    with Tape() as tape:
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build(*ts)
    grads = tape.backward(loss)
    return float(loss.data), [grads[t] for t in ts]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))
