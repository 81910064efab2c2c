"""Independent brute-force oracles shared by the test suite.

Everything here is deliberately naive (python loops, math module scalars)
and must stay decoupled from the library's vectorized implementations.
"""

import math

import numpy as np


def conv3d_oracle(x, w, b, stride, padding):
    n, cin, t, h, wd = x.shape
    cout, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    xp = np.zeros((n, cin, t + 2 * pt, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x
    out = np.zeros((n, cout, ot, oh, ow))
    for ni in range(n):
        for oc in range(cout):
            for zt in range(ot):
                for zy in range(oh):
                    for zx in range(ow):
                        acc = 0.0
                        for ic in range(cin):
                            for dt in range(kt):
                                for dy in range(kh):
                                    for dx in range(kw):
                                        acc += (
                                            xp[ni, ic, zt * st + dt, zy * sh + dy, zx * sw + dx]
                                            * w[oc, ic, dt, dy, dx]
                                        )
                        out[ni, oc, zt, zy, zx] = acc + (0.0 if b is None else b[oc])
    return out


def matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def pool_oracle(x):
    n, c, t, h, w = x.shape
    out = np.zeros((n, t, c))
    for ni in range(n):
        for ti in range(t):
            for ci in range(c):
                acc = 0.0
                for y in range(h):
                    for z in range(w):
                        acc += x[ni, ci, ti, y, z]
                out[ni, ti, ci] = acc / (h * w)
    return out


def lstm_oracle(xs, weights, biases, c0=None, h0=None):
    """Scalar-loop single-layer recurrence over a list of input vectors."""
    wf, wi, wc, wa = weights["f"], weights["i"], weights["c"], weights["a"]
    bf, bi, bc, ba = biases["f"], biases["i"], biases["c"], biases["a"]
    n_out = len(wf)
    h = list(h0) if h0 is not None else [0.0] * n_out
    c = list(c0) if c0 is not None else [0.0] * n_out
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    outs = []
    for x in xs:
        z = list(h) + list(x)
        f, i, cand, o = [], [], [], []
        for row in range(n_out):
            af, ai, ac, ao = bf[row], bi[row], bc[row], ba[row]
            for col, zv in enumerate(z):
                af += wf[row][col] * zv
                ai += wi[row][col] * zv
                ac += wc[row][col] * zv
                ao += wa[row][col] * zv
            f.append(sig(af))
            i.append(sig(ai))
            cand.append(math.tanh(ac))
            o.append(sig(ao))
        c = [f[r] * c[r] + i[r] * cand[r] for r in range(n_out)]
        h = [o[r] * math.tanh(c[r]) for r in range(n_out)]
        outs.append(list(h))
    return outs


def cycle_oracle(a, b):
    """Double-loop soft-match + argmin consistency check on nested lists."""
    t_len, c_len = len(a), len(a[0])

    def match(q, ref):
        d2s = []
        for frame in ref:
            d2s.append(sum((q[k] - frame[k]) ** 2 for k in range(c_len)))
        m = max(-d for d in d2s)
        exps = [math.exp(-d - m) for d in d2s]
        tot = sum(exps)
        soft = [
            sum(exps[i] / tot * ref[i][k] for i in range(len(ref)))
            for k in range(c_len)
        ]
        best, best_d = 0, None
        for i, frame in enumerate(ref):
            d = sum((soft[k] - frame[k]) ** 2 for k in range(c_len))
            if best_d is None or d < best_d:
                best, best_d = i, d
        return best

    fwd = [match(a[t], b) for t in range(t_len)]
    bwd = [match(b[t], a) for t in range(t_len)]
    open_ = all(i == t for t, i in enumerate(fwd)) and all(i == t for t, i in enumerate(bwd))
    return open_, fwd, bwd


def separated_embedding(rng, t_len, c_len, min_dist=2.0, scale=4.0):
    """Random frames with pairwise L2 distance at least min_dist."""
    while True:
        e = rng.standard_normal((t_len, c_len)) * scale
        d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
        d[np.diag_indices(t_len)] = np.inf
        if d.min() > min_dist:
            return e
