"""Plain-loop reference implementations used as independent oracles."""

import math


def matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def softmax_row(row):
    top = max(row)
    e = [math.exp(v - top) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention(q, k, v, heads):
    t, d = len(q), len(q[0])
    dh = d // heads
    out = [[0.0] * d for _ in range(t)]
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(t):
            scores = []
            for j in range(t):
                scores.append(sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh))
            w = softmax_row(scores)
            for c in cols:
                out[i][c] = sum(w[j] * v[j][c] for j in range(t))
    return out


def mse(a, b):
    flat_a, flat_b = list(_flatten(a)), list(_flatten(b))
    return sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)


def psnr(a, b, max_value=1.0):
    e = mse(a, b)
    return math.inf if e == 0 else 10.0 * math.log10(max_value ** 2 / e)


def _flatten(x):
    if isinstance(x, (list, tuple)):
        for item in x:
            yield from _flatten(item)
    else:
        yield float(x)
