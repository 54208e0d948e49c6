"""Naive reference implementations used as oracles by the test suite.

Everything here is written with explicit Python loops and scalar math on
purpose: these functions share no code with the package, so agreement
between the two is evidence, not tautology. Accumulation happens in Python
floats (binary64) regardless of the input dtype.
"""

import math

import numpy as np


def conv1x1_loops(x, w, b=None):
    n, d_in, h, wd = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out, h, wd), dtype=np.float64)
    for i in range(n):
        for o in range(d_out):
            for y in range(h):
                for z in range(wd):
                    acc = 0.0
                    for d in range(d_in):
                        acc += float(w[o, d]) * float(x[i, d, y, z])
                    if b is not None:
                        acc += float(b[o])
                    out[i, o, y, z] = acc
    return out


def conv3x3_loops(x, w, b=None):
    n, d_in, h, wd = x.shape
    d_out = w.shape[0]
    out = np.zeros((n, d_out, h, wd), dtype=np.float64)
    for i in range(n):
        for o in range(d_out):
            for y in range(h):
                for z in range(wd):
                    acc = 0.0
                    for d in range(d_in):
                        for dy in range(3):
                            for dx in range(3):
                                yy = y + dy - 1
                                zz = z + dx - 1
                                if 0 <= yy < h and 0 <= zz < wd:
                                    acc += float(w[o, d, dy, dx]) * float(x[i, d, yy, zz])
                    if b is not None:
                        acc += float(b[o])
                    out[i, o, y, z] = acc
    return out


def matmul_loops(a, b):
    m, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((m, p), dtype=np.float64)
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_rows_math(s):
    n, m = s.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        top = max(float(v) for v in s[i])
        es = [math.exp(float(v) - top) for v in s[i]]
        total = sum(es)
        for j in range(m):
            out[i, j] = es[j] / total
    return out


def flatten_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c * h * w), dtype=np.float64)
    for i in range(n):
        for d in range(c):
            for y in range(h):
                for z in range(w):
                    out[i, d * h * w + y * w + z] = float(x[i, d, y, z])
    return out


def avg_pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c), dtype=np.float64)
    for i in range(n):
        for d in range(c):
            acc = 0.0
            for y in range(h):
                for z in range(w):
                    acc += float(x[i, d, y, z])
            out[i, d] = acc / (h * w)
    return out


def relu_loops(x):
    out = np.array(x, dtype=np.float64, copy=True)
    flat = out.reshape(-1)
    for i in range(flat.shape[0]):
        if flat[i] < 0.0:
            flat[i] = 0.0
    return out


def attention_loops(x, w_phi, w_psi):
    """Row-normalized pairwise similarity matrix, straight from the definitions."""
    phi = flatten_loops(conv1x1_loops(x, w_phi))
    psi = flatten_loops(conv1x1_loops(x, w_psi))
    logits = matmul_loops(phi, psi.T)
    return softmax_rows_math(logits)


def g_loops(x, g1_w, g1_b, g2_w, g2_b):
    """Per-RoI descriptor: 1x1 conv, relu, 3x3 conv, global average pool."""
    a = relu_loops(conv1x1_loops(x, g1_w, g1_b))
    c = conv3x3_loops(a, g2_w, g2_b)
    return avg_pool_loops(c)


def forward_loops(x, w_phi, w_psi, g1_w, g1_b, g2_w, g2_b):
    """Full block: returns (attention, g, pooled, augmented)."""
    att = attention_loops(x, w_phi, w_psi)
    g = g_loops(x, g1_w, g1_b, g2_w, g2_b)
    pooled = matmul_loops(att, g)
    n, d, h, w = x.shape
    d_g = g.shape[1]
    aug = np.zeros((n, d + d_g, h, w), dtype=np.float64)
    for i in range(n):
        for c in range(d):
            for y in range(h):
                for z in range(w):
                    aug[i, c, y, z] = float(x[i, c, y, z])
        for c in range(d_g):
            for y in range(h):
                for z in range(w):
                    aug[i, d + c, y, z] = pooled[i, c]
    return att, g, pooled, aug
