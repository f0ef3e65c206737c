"""NumPy gather/scatter for the im2col convolution path (fallback)."""

import numpy as np


def gather(x, k):
    """(n,X,Y,Z,c) -> (P, k^3*c) patch matrix over all valid windows."""
    n, X, Y, Z, cin = x.shape
    Xo, Yo, Zo = X - k + 1, Y - k + 1, Z - k + 1
    col = np.empty((n, Xo, Yo, Zo, k, k, k, cin), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            for dk in range(k):
                col[:, :, :, :, di, dj, dk, :] = x[:, di:di + Xo, dj:dj + Yo, dk:dk + Zo, :]
    return col.reshape(n * Xo * Yo * Zo, k ** 3 * cin)


def scatter_add(gcol, in_shape, k):
    """Adjoint of `gather`: accumulate patch-matrix gradients onto the grid."""
    n, X, Y, Z, cin = in_shape
    Xo, Yo, Zo = X - k + 1, Y - k + 1, Z - k + 1
    gcol = gcol.reshape(n, Xo, Yo, Zo, k, k, k, cin)
    gx = np.zeros(tuple(in_shape), dtype=gcol.dtype)
    for di in range(k):
        for dj in range(k):
            for dk in range(k):
                gx[:, di:di + Xo, dj:dj + Yo, dk:dk + Zo, :] += gcol[:, :, :, :, di, dj, dk, :]
    return gx
