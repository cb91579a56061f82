"""Loop-level reference implementations used as oracles.

Deliberately naive: scalar loops, no vectorization, no shared code with the
package beyond nothing at all.
"""

import math

import numpy as np

FLOOR = 1e-7


def k_cos(a, b, floor=1e-8):
    na = max(math.sqrt(sum(v * v for v in a)), floor)
    nb = max(math.sqrt(sum(v * v for v in b)), floor)
    return 0.5 * (sum(x * y for x, y in zip(a, b)) / (na * nb) + 1.0)


def k_t(a, b, d=1):
    dist = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    return 1.0 / (1.0 + dist**d)


def cond_probs(y, kernel, floor=FLOOR):
    n = len(y)
    p = [[0.0] * n for _ in range(n)]
    for j in range(n):
        col = [kernel(y[i], y[j]) if i != j else 0.0 for i in range(n)]
        total = sum(col)
        col = [max(v / total, floor) if i != j else 0.0 for i, v in enumerate(col)]
        total = sum(col)
        for i in range(n):
            p[i][j] = col[i] / total
    return np.array(p)


def jeffreys(pt, ps):
    n = len(pt)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += (pt[i][j] - ps[i][j]) * (math.log(pt[i][j]) - math.log(ps[i][j]))
    return total


def qmi(y, labels, kernel):
    n = len(y)
    classes = sorted(set(int(v) for v in labels))
    v_in = v_all = v_btw = 0.0
    k_all = sum(kernel(y[i], y[j]) for i in range(n) for j in range(n))
    for c in classes:
        members = [i for i in range(n) if labels[i] == c]
        prior = len(members) / n
        for i in members:
            for j in members:
                v_in += kernel(y[i], y[j])
        v_all += prior * prior * k_all
        for i in members:
            for j in range(n):
                v_btw += prior * kernel(y[i], y[j])
    return (v_in + v_all - 2.0 * v_btw) / n**2


def match_layers(ws, wt):
    kappa = []
    for i, s in enumerate(ws):
        if i == len(ws) - 1:
            kappa.append(len(wt) - 1)
            continue
        best, best_j = None, None
        for j, t in enumerate(wt):
            d = (s - t) ** 2
            if best is None or d < best:
                best, best_j = d, j
        kappa.append(best_j)
    return kappa


def flow_divergence(ws, wt, kappa):
    return sum((ws[i] - wt[kappa[i]]) ** 2 for i in range(len(ws)))


def _similarity(q, x, metric):
    if metric == "cosine":
        return sum(a * b for a, b in zip(q, x)) / (max(math.sqrt(sum(a * a for a in q)), 1e-8)
                                                   * max(math.sqrt(sum(b * b for b in x)), 1e-8))
    return -sum((a - b) ** 2 for a, b in zip(q, x))


def ranking(q, db, metric):
    sims = [(-_similarity(q, x, metric), i) for i, x in enumerate(db)]
    return [i for _, i in sorted(sims)]


def average_precision(q, ql, db, dbl, metric):
    order = ranking(q, db, metric)
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if dbl[i] == ql:
            hits += 1
            total += hits / rank
    return total / hits


def mean_ap(queries, qlabels, db, dbl, metric):
    return sum(average_precision(q, l, db, dbl, metric) for q, l in zip(queries, qlabels)) / len(queries)


def topk(queries, qlabels, db, dbl, metric, k):
    vals = []
    for q, l in zip(queries, qlabels):
        order = ranking(q, db, metric)[:k]
        vals.append(sum(1 for i in order if dbl[i] == l) / k)
    return sum(vals) / len(vals)


def hog(gray, cells=(2, 2), bins=9):
    """Pixel-by-pixel HoG: centred differences, unsigned angle, hard bins, global L2."""
    h, w = len(gray), len(gray[0])
    cy, cx = cells
    ch, cw = h // cy, w // cx
    hist = [0.0] * (cy * cx * bins)
    for r in range(h):
        for c in range(w):
            gx = gray[r][c + 1] - gray[r][c - 1] if 0 < c < w - 1 else 0.0
            gy = gray[r + 1][c] - gray[r - 1][c] if 0 < r < h - 1 else 0.0
            mag = math.sqrt(gx * gx + gy * gy)
            if mag == 0.0:
                continue
            ang = math.atan2(gy, gx) % math.pi
            b = min(int(ang / math.pi * bins), bins - 1)
            cell = (r // ch) * cx + (c // cw)
            hist[cell * bins + b] += mag
    norm = math.sqrt(sum(v * v for v in hist))
    return [v / norm for v in hist] if norm > 0 else hist
