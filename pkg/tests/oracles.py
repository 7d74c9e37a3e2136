"""Direct, deliberately naive reference computations used by the tests."""

import itertools
import math

import numpy as np


def psnr_oracle(ref, test):
    total = 0.0
    count = 0
    for a, b in zip(np.ravel(ref).tolist(), np.ravel(test).tolist()):
        total += (a - b) ** 2
        count += 1
    mse = total / count
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def ssim_oracle(ref, test, size=11, sigma=1.5, k1=0.01, k2=0.03):
    ref = np.asarray(ref, float)
    test = np.asarray(test, float)
    c = (size - 1) / 2
    win = np.array([[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma ** 2)) for j in range(size)]
                    for i in range(size)])
    win /= win.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for y in range(ref.shape[0] - size + 1):
        for x in range(ref.shape[1] - size + 1):
            a = ref[y:y + size, x:x + size]
            b = test[y:y + size, x:x + size]
            ma, mb = (win * a).sum(), (win * b).sum()
            va = (win * (a - ma) ** 2).sum()
            vb = (win * (b - mb) ** 2).sum()
            cov = (win * (a - ma) * (b - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def midranks(values):
    values = list(values)
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_enumeration(diffs):
    """Two-sided p by listing all 2**n sign assignments of the observed ranks."""
    d = [x for x in diffs if x != 0]
    n = len(d)
    ranks = midranks([abs(x) for x in d])
    total = sum(ranks)
    w = min(sum(r for r, x in zip(ranks, d) if x > 0), sum(r for r, x in zip(ranks, d) if x < 0))
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        t = sum(r for r, s in zip(ranks, signs) if s)
        if min(t, total - t) <= w + 1e-9:
            hits += 1
    return w, hits / 2 ** n


def sample_parameters(model, n, seed):
    """``n`` distinct (parameter name, flat index) pairs drawn uniformly over all scalar parameters."""
    entries = [(name, i) for name, p in model.named_parameters() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    return [entries[k] for k in rng.choice(len(entries), n, replace=False)]


def central_differences(model, closure, picks, h=1e-4):
    """Central finite-difference derivative of ``closure()`` for each picked scalar parameter."""
    import torch

    params = dict(model.named_parameters())
    out = []
    for name, i in picks:
        flat = params[name].data.view(-1)
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = closure().item()
            flat[i] = old - h
            down = closure().item()
            flat[i] = old
        out.append((up - down) / (2 * h))
    return out


def worst_relative_error(analytic, numeric, floor=1e-6):
    return max(abs(a - f) / max(abs(a), abs(f), floor) for a, f in zip(analytic, numeric))
