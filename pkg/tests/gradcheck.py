"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Gradients of scalar f(*arrays) w.r.t. each array, by central differences."""
    grads = []
    for a in arrays:
        ga = np.zeros_like(a)
        flat = a.ravel()
        gflat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(ga)
    return grads


def rel_error(analytic, numeric):
    """Max absolute difference scaled by the oracle's magnitude."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.abs(numeric).max() + 1e-10
    return float(np.abs(analytic - numeric).max() / denom)
