"""Compiled index-routing loops for the convolution layers.

A 3x3 convolution is evaluated as one dense matmul producing (or consuming)
a per-pixel stack of nine tap responses, plus one of the routing loops here
to move tap responses between neighbouring pixels. All loops visit taps in a
fixed order, so results are bit-reproducible.
"""

from numba import njit


@njit(cache=True)
def scatter_taps(stack, out):
    """out[n, i, j] += sum_t stack[n, i + dy - 1, j + dx - 1, t] (zero padded)."""
    n_, h, w, _, o_ = stack.shape
    for n in range(n_):
        for i in range(h):
            for j in range(w):
                for dy in range(3):
                    a = i + dy - 1
                    if a < 0 or a >= h:
                        continue
                    for dx in range(3):
                        b = j + dx - 1
                        if b < 0 or b >= w:
                            continue
                        t = dy * 3 + dx
                        for o in range(o_):
                            out[n, i, j, o] += stack[n, a, b, t, o]


@njit(cache=True)
def gather_taps(src, stack):
    """stack[n, a, b, t] = src[n, a - dy + 1, b - dx + 1] (zero outside); adjoint of scatter_taps."""
    n_, h, w, _, o_ = stack.shape
    for n in range(n_):
        for a in range(h):
            for b in range(w):
                for dy in range(3):
                    i = a - dy + 1
                    for dx in range(3):
                        j = b - dx + 1
                        t = dy * 3 + dx
                        if i < 0 or i >= h or j < 0 or j >= w:
                            for o in range(o_):
                                stack[n, a, b, t, o] = 0.0
                        else:
                            for o in range(o_):
                                stack[n, a, b, t, o] = src[n, i, j, o]


@njit(cache=True)
def up_scatter_taps(stack, out):
    """Tap routing for nearest-2x-upsample + 3x3 conv.

    ``stack`` holds low-resolution tap responses (N, h, w, 9, O); ``out`` is
    (N, 2h, 2w, O). Upsampled pixel (r, c) comes from low-res (r // 2, c // 2).
    """
    n_, h, w, _, o_ = stack.shape
    hh, ww = 2 * h, 2 * w
    for n in range(n_):
        for u in range(hh):
            for v in range(ww):
                for dy in range(3):
                    r = u + dy - 1
                    if r < 0 or r >= hh:
                        continue
                    a = r // 2
                    for dx in range(3):
                        c = v + dx - 1
                        if c < 0 or c >= ww:
                            continue
                        b = c // 2
                        t = dy * 3 + dx
                        for o in range(o_):
                            out[n, u, v, o] += stack[n, a, b, t, o]


@njit(cache=True)
def up_gather_taps(g, stack):
    """Adjoint of up_scatter_taps; ``stack`` must be zeroed by the caller."""
    n_, h, w, _, o_ = stack.shape
    hh, ww = 2 * h, 2 * w
    for n in range(n_):
        for u in range(hh):
            for v in range(ww):
                for dy in range(3):
                    r = u + dy - 1
                    if r < 0 or r >= hh:
                        continue
                    a = r // 2
                    for dx in range(3):
                        c = v + dx - 1
                        if c < 0 or c >= ww:
                            continue
                        b = c // 2
                        t = dy * 3 + dx
                        for o in range(o_):
                            stack[n, a, b, t, o] += g[n, u, v, o]


@njit(cache=True)
def im2col(x, stride, col):
    """col[n, i, j, t] = x[n, stride*i + dy - 1, stride*j + dx - 1] (zero outside)."""
    n_, h, w, c_ = x.shape
    ho, wo = col.shape[1], col.shape[2]
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for dy in range(3):
                    r = stride * i + dy - 1
                    for dx in range(3):
                        q = stride * j + dx - 1
                        t = dy * 3 + dx
                        if r < 0 or r >= h or q < 0 or q >= w:
                            for c in range(c_):
                                col[n, i, j, t, c] = 0.0
                        else:
                            for c in range(c_):
                                col[n, i, j, t, c] = x[n, r, q, c]


@njit(cache=True)
def col2im(dcol, stride, dx_out):
    """Adjoint of im2col; ``dx_out`` must be zeroed by the caller."""
    n_, h, w, c_ = dx_out.shape
    ho, wo = dcol.shape[1], dcol.shape[2]
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for dy in range(3):
                    r = stride * i + dy - 1
                    if r < 0 or r >= h:
                        continue
                    for dx in range(3):
                        q = stride * j + dx - 1
                        if q < 0 or q >= w:
                            continue
                        t = dy * 3 + dx
                        for c in range(c_):
                            dx_out[n, r, q, c] += dcol[n, i, j, t, c]
