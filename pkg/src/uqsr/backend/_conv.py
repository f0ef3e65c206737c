"""Valid 3D convolution: strategy selection and GEMM orchestration.

Arrays are channel-last (n, X, Y, Z, c); weights (k, k, k, cin, cout).
Contractions are numpy matmuls (BLAS). Two strategies per pass:

* im2col: explicit (P, k^3*cin) patch matrix, one GEMM. Fewest FLOPs,
  but the patch matrix costs memory traffic proportional to its size.
  The gather/scatter provider is pluggable (NumPy loops or compiled C).
* shift-GEMM: one accumulating GEMM per kernel offset over row-shifted
  views of the flat (n*X*Y*Z, c) voxel matrix. No patch matrix at all;
  rows whose spatial index would wrap are cut away with the invalid
  output margin, and the backward passes zero-embed the output gradient
  so wrapped rows contribute nothing.

The choice is a throughput model (GEMM rate vs memory rate); it only
affects speed, never results beyond float summation order.
"""

import numpy as np

# Patch-matrix budget: im2col wins until its buffer gets big enough that
# build-and-reread traffic beats the shift path's wasted FLOPs; past the
# budget shift-GEMM also acts as the memory guard for large tiles. The
# shift path is hopeless for narrow channel counts (skinny-K GEMMs), and
# those always produce small patch matrices, so one byte cutoff covers it.
_IM2COL_MAX_BYTES = 128 * 2 ** 20


def _use_im2col(P, K, itemsize):
    return P * K * itemsize <= _IM2COL_MAX_BYTES


def _offsets(k, Y, Z):
    q = 0
    for di in range(k):
        for dj in range(k):
            for dk in range(k):
                yield q, (di * Y + dj) * Z + dk
                q += 1


def _embed_gout(gout, in_shape):
    """Zero-pad the output gradient back onto the full input grid."""
    n, X, Y, Z, _ = in_shape
    nb, Xo, Yo, Zo, cout = gout.shape
    full = np.zeros((n, X, Y, Z, cout), dtype=gout.dtype)
    full[:, :Xo, :Yo, :Zo, :] = gout
    return full.reshape(-1, cout)


class Conv3d:
    """The three convolution passes over a pluggable gather provider."""

    def __init__(self, gather_mod):
        self._g = gather_mod

    def forward(self, x, w, b, keep_col=False):
        """Returns (out, col); col is the patch matrix when the im2col
        strategy ran and the caller asked to keep it (reusable by
        backward_weight), else None."""
        n, X, Y, Z, cin = x.shape
        k, _, _, _, cout = w.shape
        Xo, Yo, Zo = X - k + 1, Y - k + 1, Z - k + 1
        P, R, K = n * Xo * Yo * Zo, n * X * Y * Z, k ** 3 * cin
        col = None
        if k == 1:
            out = x.reshape(-1, cin) @ w[0, 0, 0]
            out = out.reshape(n, Xo, Yo, Zo, cout)
        elif _use_im2col(P, K, x.itemsize):
            col = self._g.gather(x, k)
            out = col @ w.reshape(K, cout)
            out = out.reshape(n, Xo, Yo, Zo, cout)
            if not keep_col:
                col = None
        else:
            xmat = x.reshape(R, cin)
            full = np.empty((R, cout), dtype=x.dtype)
            for q, off in _offsets(k, Y, Z):
                wq = w.reshape(-1, cin, cout)[q]
                if off == 0:
                    np.matmul(xmat, wq, out=full)
                else:
                    full[:R - off] += xmat[off:] @ wq
            out = np.ascontiguousarray(
                full.reshape(n, X, Y, Z, cout)[:, :Xo, :Yo, :Zo, :]
            )
        if b is not None:
            out += b
        return out, col

    def backward_input(self, gout, w, in_shape):
        n, X, Y, Z, cin = in_shape
        k, _, _, _, cout = w.shape
        P, R, K = np.prod(gout.shape[:4]), n * X * Y * Z, k ** 3 * cin
        if k == 1:
            gx = gout.reshape(-1, cout) @ w[0, 0, 0].T
            return gx.reshape(tuple(in_shape))
        if _use_im2col(P, K, gout.itemsize):
            gcol = gout.reshape(-1, cout) @ w.reshape(K, cout).T
            return self._g.scatter_add(gcol, in_shape, k)
        gmat = _embed_gout(gout, in_shape)
        gx = np.empty((R, cin), dtype=gout.dtype)
        for q, off in _offsets(k, Y, Z):
            wq = w.reshape(-1, cin, cout)[q]
            if off == 0:
                np.matmul(gmat, wq.T, out=gx)
            else:
                gx[off:] += gmat[:R - off] @ wq.T
        return gx.reshape(tuple(in_shape))

    def backward_weight(self, gout, x, k, col=None):
        n, X, Y, Z, cin = x.shape
        cout = gout.shape[4]
        P, R, K = np.prod(gout.shape[:4]), n * X * Y * Z, k ** 3 * cin
        gb = gout.sum(axis=(0, 1, 2, 3))
        if k == 1:
            gw = x.reshape(-1, cin).T @ gout.reshape(-1, cout)
            return gw.reshape(1, 1, 1, cin, cout), gb
        if _use_im2col(P, K, x.itemsize):
            if col is None:
                col = self._g.gather(x, k)
            gw = col.T @ gout.reshape(-1, cout)
            return np.ascontiguousarray(gw.reshape(k, k, k, cin, cout)), gb
        xmat = x.reshape(R, cin)
        gmat = _embed_gout(gout, x.shape)
        gw = np.empty((k, k, k, cin, cout), dtype=x.dtype)
        gwf = gw.reshape(-1, cin, cout)
        for q, off in _offsets(k, Y, Z):
            np.matmul(xmat[off:].T, gmat[:R - off], out=gwf[q])
        return gw, gb


def conv3d_reference(x, w, b):
    """Direct sextuple-loop convolution. Slow; exists as the test oracle."""
    n, X, Y, Z, cin = x.shape
    k, _, _, _, cout = w.shape
    Xo, Yo, Zo = X - k + 1, Y - k + 1, Z - k + 1
    out = np.zeros((n, Xo, Yo, Zo, cout), dtype=np.result_type(x, w))
    for bi in range(n):
        for co in range(cout):
            for i in range(Xo):
                for j in range(Yo):
                    for l in range(Zo):
                        acc = 0.0
                        for ci in range(cin):
                            for di in range(k):
                                for dj in range(k):
                                    for dk in range(k):
                                        acc += (
                                            x[bi, i + di, j + dj, l + dk, ci]
                                            * w[di, dj, dk, ci, co]
                                        )
                        out[bi, i, j, l, co] = acc + (0.0 if b is None else b[co])
    return out
