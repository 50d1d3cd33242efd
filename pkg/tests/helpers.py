import numpy as np


def rel_errors(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def naive_conv(x, w, b):
    """Quadruple loop 3x3 convolution with zero padding."""
    c_in, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for y in range(h):
            for xx in range(wd):
                acc = float(b[o])
                for c in range(c_in):
                    for dy in range(3):
                        for dx in range(3):
                            yy, xs = y + dy - 1, xx + dx - 1
                            if 0 <= yy < h and 0 <= xs < wd:
                                acc += x[c, yy, xs] * w[o, c, dy, dx]
                out[o, y, xx] = acc
    return out
