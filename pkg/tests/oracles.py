"""Independent reference computations used to check the library.

Nothing here imports from ``dpfb``; each oracle is a brute-force or
high-precision restatement of the quantity under test.
"""

import math
from fractions import Fraction

import mpmath
import numpy as np
from scipy import integrate


def renyi_gaussian_quad(sigma, alpha):
    """D_alpha(N(1, s^2) || N(0, s^2)) by numerical integration."""
    def integrand(x):
        log_p = -((x - 1.0) ** 2) / (2 * sigma ** 2)
        log_q = -(x ** 2) / (2 * sigma ** 2)
        return math.exp(alpha * log_p + (1 - alpha) * log_q) / (sigma * math.sqrt(2 * math.pi))
    val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    return math.log(val) / (alpha - 1)


def sampled_gaussian_rdp_mp(q, sigma, alpha, dps=40):
    """Binomial series summed directly at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        q = mpmath.mpf(q)
        s2 = mpmath.mpf(sigma) ** 2
        total = mpmath.mpf(0)
        for k in range(alpha + 1):
            total += (mpmath.binomial(alpha, k) * (1 - q) ** (alpha - k) * q ** k
                      * mpmath.exp(mpmath.mpf(k * (k - 1)) / (2 * s2)))
        return float(mpmath.log(total) / (alpha - 1))


def eps_bruteforce(q, sigma, steps, delta, orders=range(2, 257)):
    best = (math.inf, None)
    for a in orders:
        e = steps * sampled_gaussian_rdp_mp(q, sigma, a, dps=30) + math.log(1 / delta) / (a - 1)
        if e < best[0]:
            best = (e, a)
    return best


def auroc_pairs(scores, truths):
    """Mann-Whitney statistic by enumerating every positive/negative pair."""
    pos = [s for s, t in zip(scores, truths) if t == 1]
    neg = [s for s, t in zip(scores, truths) if t == 0]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                wins += Fraction(1, 2)
    return float(wins / (len(pos) * len(neg)))


def youden_exhaustive(scores, truths):
    """Scan every distinct score as a threshold with exact rational J."""
    P = sum(truths)
    N = len(truths) - P
    best_j, best_t = None, None
    for t in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, truths) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, truths) if s >= t and y == 0)
        j = Fraction(tp, P) - Fraction(fp, N)
        if best_j is None or j > best_j:  # ascending scan keeps the smallest on ties
            best_j, best_t = j, t
    return best_t


def confusion_counts(scores, truths, threshold):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, truths):
        pred = s >= threshold
        if pred and y:
            tp += 1
        elif pred:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def forward_loops(params, d, h, k, x):
    """Forward pass written with explicit loops and the documented layout."""
    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))
    if h == 0:
        W = [[params[i * k + j] for j in range(k)] for i in range(d)]
        b = params[d * k:d * k + k]
        return [sig(sum(x[i] * W[i][j] for i in range(d)) + b[j]) for j in range(k)]
    off = 0
    W1 = [[params[off + i * h + j] for j in range(h)] for i in range(d)]
    off += d * h
    b1 = params[off:off + h]
    off += h
    W2 = [[params[off + i * k + j] for j in range(k)] for i in range(h)]
    off += h * k
    b2 = params[off:off + k]
    hid = [math.tanh(sum(x[i] * W1[i][j] for i in range(d)) + b1[j]) for j in range(h)]
    return [sig(sum(hid[i] * W2[i][j] for i in range(h)) + b2[j]) for j in range(k)]


def weighted_bce_loops(params, d, h, k, x, y, w):
    p = forward_loops(params, d, h, k, x)
    return -sum(w[j] * (y[j] * math.log(p[j]) + (1 - y[j]) * math.log(1 - p[j])) for j in range(k))


class AdamRef:
    """Textbook Adam with decoupled weight decay, one scalar at a time."""

    def __init__(self, theta, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
        self.theta = list(theta)
        self.m = [0.0] * len(theta)
        self.v = [0.0] * len(theta)
        self.t = 0
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, wd, b1, b2, eps

    def step(self, grad):
        self.t += 1
        for i, g in enumerate(grad):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            self.theta[i] -= self.lr * (mhat / (math.sqrt(vhat) + self.eps) + self.wd * self.theta[i])
        return self.theta
