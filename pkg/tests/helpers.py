import numpy as np

from sdlab.nn import ArchSpec

MLP = ArchSpec("mlp", (2, 16, 16, 3))


def fd_grad(f, w, idx, h=1e-4):
    out = []
    for i in idx:
        e = np.zeros_like(w)
        e[i] = h
        out.append((f(w + e) - f(w - e)) / (2 * h))
    return np.array(out)
