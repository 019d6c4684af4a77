"""Slow, loop-based reference implementations used to check the metrics."""

import itertools
import math


def nearest(value, centers):
    best, best_d = 0, math.inf
    for k, c in enumerate(centers):
        d = abs(value - c)
        if d < best_d:
            best, best_d = k, d
    return best


def codes(pop, spec):
    rows = []
    for r in pop.frame.itertuples(index=False):
        row = []
        for s, v in zip(pop.schema, r):
            if s.is_categorical:
                row.append(list(s.categories).index(v))
            else:
                row.append(nearest(float(v), list(spec[s.name].centers)))
        rows.append(tuple(row))
    return rows


def sizes(schema, spec):
    return [len(s.categories) if s.is_categorical else len(spec[s.name].centers) for s in schema]


def srmse(p_hat, p):
    m = len(p)
    sq = 0.0
    for a, b in zip(p_hat, p):
        sq += (a - b) ** 2
    return math.sqrt(sq / m) / (sum(p) / m)


def univariate(gen, ref, spec, weights=None):
    gc, rc = codes(gen, spec), codes(ref, spec)
    w = [1.0] * len(gc) if weights is None else list(weights)
    total = sum(w)
    out = []
    for j, size in enumerate(sizes(gen.schema, spec)):
        pg = [0.0] * size
        pr = [0.0] * size
        for row, wi in zip(gc, w):
            pg[row[j]] += wi / total
        for row in rc:
            pr[row[j]] += 1.0 / len(rc)
        out.append(srmse(pg, pr))
    return out


def bivariate(gen, ref, spec, weights=None):
    gc, rc = codes(gen, spec), codes(ref, spec)
    w = [1.0] * len(gc) if weights is None else list(weights)
    total = sum(w)
    sz = sizes(gen.schema, spec)
    out = []
    for a, b in itertools.combinations(range(len(sz)), 2):
        pg, pr = [], []
        for ka in range(sz[a]):
            for kb in range(sz[b]):
                pg.append(sum(wi for row, wi in zip(gc, w) if row[a] == ka and row[b] == kb) / total)
                pr.append(sum(1 for row in rc if row[a] == ka and row[b] == kb) / len(rc))
        out.append(srmse(pg, pr))
    return out


def precision_recall_f1(gen, ref, spec):
    gc, rc = codes(gen, spec), codes(ref, spec)
    ref_unique = list(dict.fromkeys(rc))
    gen_unique = list(dict.fromkeys(gc))
    hit_p = sum(1 for g in gc if any(g == r for r in ref_unique))
    hit_r = sum(1 for r in rc if any(r == g for g in gen_unique))
    p = 100.0 * hit_p / len(gc)
    r = 100.0 * hit_r / len(rc)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def ess(w):
    s = 0.0
    for x in w:
        s += x * x
    return 1.0 / s
