"""Brute-force reference implementations, written independently of the package code."""

import math

import numpy as np


def barlow_oracle(za, zb, lam):
    """Nested-loop cross-correlation of population-standardized columns."""
    b, d = za.shape

    def standardize(z):
        out = np.empty_like(z)
        for j in range(d):
            mu = sum(z[i, j] for i in range(b)) / b
            var = sum((z[i, j] - mu) ** 2 for i in range(b)) / b
            for i in range(b):
                out[i, j] = (z[i, j] - mu) / math.sqrt(var)
        return out

    a, c_ = standardize(za), standardize(zb)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            c = sum(a[n, i] * c_[n, j] for n in range(b)) / b
            loss += (1 - c) ** 2 if i == j else lam * c * c
    return loss


def cosine_softmax_oracle(img, cls, tau):
    """Row-by-row cosine similarity and max-shifted softmax with plain Python floats."""
    out = np.empty((img.shape[0], cls.shape[0]))
    for i, u in enumerate(img):
        nu = math.sqrt(sum(v * v for v in u))
        logits = []
        for w in cls:
            nw = math.sqrt(sum(v * v for v in w))
            logits.append(sum(a * b for a, b in zip(u, w)) / (nu * nw) / tau)
        top = max(logits)
        ex = [math.exp(l - top) for l in logits]
        s = sum(ex)
        out[i] = [e / s for e in ex]
    return out


def softmax_oracle(logits):
    top = max(logits)
    ex = [math.exp(l - top) for l in logits]
    s = sum(ex)
    return [e / s for e in ex]
