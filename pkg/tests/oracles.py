"""Slow, from-definition reference implementations used only by tests."""

import itertools

import numpy as np


def eer_bruteforce(same, diff):
    same = [float(s) for s in same]
    diff = [float(s) for s in diff]
    cands = sorted(set(same) | set(diff))
    cands.append(cands[-1] + 1.0)
    far, frr = [], []
    for thr in cands:
        far.append(sum(1 for s in diff if s >= thr) / len(diff))
        frr.append(sum(1 for s in same if s < thr) / len(same))
    for i in range(len(cands)):
        if far[i] - frr[i] <= 0:
            break
    if i == 0 or far[i] == frr[i]:
        return (far[i] + frr[i]) / 2
    d0, d1 = far[i - 1] - frr[i - 1], far[i] - frr[i]
    w = d0 / (d0 - d1)
    return (1 - w) * (far[i - 1] + frr[i - 1]) / 2 + w * (far[i] + frr[i]) / 2


def c_index_bruteforce(values, grades):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(values)), 2):
        if grades[i] > grades[j]:
            den += 1
            if values[i] > values[j]:
                num += 1
            elif values[i] == values[j]:
                num += 0.5
    return num / den


def cka_gram(X, Y):
    n = X.shape[0]
    H = np.eye(n) - np.ones((n, n)) / n
    K, L = H @ X @ X.T @ H, H @ Y @ Y.T @ H
    return np.sum(K * L) / np.sqrt(np.sum(K * K) * np.sum(L * L))


def chi2_textbook(O):
    O = np.asarray(O, dtype=float)
    n = O.sum()
    chi2 = 0.0
    for i in range(O.shape[0]):
        for j in range(O.shape[1]):
            e = O[i].sum() * O[:, j].sum() / n
            chi2 += (O[i, j] - e) ** 2 / e
    return chi2


def macro_f1_counts(y_true, y_pred):
    f1s = []
    for c in (0, 1):
        tp = sum(1 for a, b in zip(y_true, y_pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(y_true, y_pred) if a != c and b == c)
        fn = sum(1 for a, b in zip(y_true, y_pred) if a == c and b != c)
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(f1s) / 2


def finite_diff_check(loss_fn, params, n_coords=10, eps=1e-6, seed=0):
    """Compare autograd gradients of loss_fn() against central differences.

    params: list of float64 tensors with .grad already populated.
    Returns a list of (analytic, numeric) pairs at random coordinates.
    """
    import torch

    rng = np.random.default_rng(seed)
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    pairs = []
    for k in picks:
        p, i = flat[k]
        analytic = p.grad.reshape(-1)[i].item()
        with torch.no_grad():
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = float(loss_fn())
            view[i] = orig - eps
            down = float(loss_fn())
            view[i] = orig
        pairs.append((analytic, (up - down) / (2 * eps)))
    return pairs


def rel_close(a, b, rtol=1e-4, atol=1e-8):
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol
