"""Brute-force reference implementations, written with explicit Python loops.

None of these share code with the package; they exist to be obviously right.
"""

import math

import numpy as np


def matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d(x, w, b=None, stride=1, pad=0):
    cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            y = i * stride + u - pad
                            z = j * stride + v - pad
                            if 0 <= y < h and 0 <= z < wd:
                                s += x[c, y, z] * w[o, c, u, v]
                out[o, i, j] = s
    return out


def depthwise_conv2d(x, w, b=None, stride=1, pad=0):
    c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else b[ch]
                for u in range(kh):
                    for v in range(kw):
                        y = i * stride + u - pad
                        z = j * stride + v - pad
                        if 0 <= y < h and 0 <= z < wd:
                            s += x[ch, y, z] * w[ch, 0, u, v]
                out[ch, i, j] = s
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Full multi-head self-attention, one query at a time. Weights are [in, out]."""
    n, c = x.shape
    d = c // heads
    q = matmul(x, wq) + bq
    k = matmul(x, wk) + bk
    v = matmul(x, wv) + bv
    out = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(n):
            scores = [float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(d) for j in range(n)]
            p = softmax_row(scores)
            acc = np.zeros(d)
            for j in range(n):
                acc += p[j] * v[j, sl]
            out[i, sl] = acc
    return matmul(out, wo) + bo


def gelu_tanh(x):
    f = np.vectorize(lambda v: 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3))))
    return f(x)


def gelu_erf(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def layer_norm(x, gamma, beta, eps):
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for j, v in enumerate(row):
            out[i, j] = (v - mu) / math.sqrt(var + eps) * gamma[j] + beta[j]
    return out


def bilinear(x, h2, w2):
    """Half-pixel-centre bilinear resize, negative source coordinates clamped to 0."""
    c, h, w = x.shape
    out = np.zeros((c, h2, w2))
    for i in range(h2):
        sy = max((i + 0.5) * h / h2 - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(w2):
            sx = max((j + 0.5) * w / w2 - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            for ch in range(c):
                out[ch, i, j] = ((1 - ly) * (1 - lx) * x[ch, y0, x0] + (1 - ly) * lx * x[ch, y0, x1]
                                 + ly * (1 - lx) * x[ch, y1, x0] + ly * lx * x[ch, y1, x1])
    return out


def cross_entropy(logits, target, ignore_index=255):
    k, h, w = logits.shape
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            t = int(target[i, j])
            if t == ignore_index:
                continue
            col = [float(logits[c, i, j]) for c in range(k)]
            m = max(col)
            lse = m + math.log(sum(math.exp(v - m) for v in col))
            total += lse - col[t]
            count += 1
    return total / count if count else 0.0


def mean_depth(depth):
    total, n = 0, 0
    for v in np.asarray(depth).reshape(-1):
        if v > 0:
            total += int(v)
            n += 1
    size = np.asarray(depth).size
    return (total / n / 1000.0 if n else 0.0), (n / size if size else 0.0)


def walkable(mask):
    h, w = mask.shape
    base = w // 3
    widths = [base, w - 2 * base, base]
    starts = [0, base, w - base]
    ratios = []
    for s, bw in zip(starts, widths):
        cnt = 0
        for i in range(h):
            for j in range(s, s + bw):
                cnt += bool(mask[i, j])
        ratios.append(cnt / (h * bw) if bw else 0.0)
    return tuple(ratios)


def aggregate(frames):
    """Per-pixel histogram mode (lowest index on ties) and median of nonzero depths."""
    g0, _, _ = frames[0]
    h, w = g0.shape
    g = np.zeros((h, w), dtype=np.int64)
    t = np.zeros((h, w), dtype=np.int64)
    d = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for idx, out in ((0, g), (1, t)):
                hist = {}
                for f in frames:
                    k = int(f[idx][i, j])
                    hist[k] = hist.get(k, 0) + 1
                best = max(hist.values())
                out[i, j] = min(k for k, c in hist.items() if c == best)
            vals = sorted(float(f[2][i, j]) for f in frames if f[2][i, j] > 0)
            if vals:
                m = len(vals)
                d[i, j] = vals[m // 2] if m % 2 else 0.5 * (vals[m // 2 - 1] + vals[m // 2])
    return g, t, d
