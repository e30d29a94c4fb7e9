"""Slow, literal reference implementations used only by the tests."""

import itertools

import mpmath
import numpy as np


def guided_loop(image, seg, pdf_f, pdf_m, offset=0.2):
    """Voxel-by-voxel guided input with plain Python arithmetic."""
    nx, ny, nz = image.shape
    voxels = list(itertools.product(range(nx), range(ny), range(nz)))
    p_f = sum(pdf_f[v] for v in voxels if seg[v])
    p_m = sum(pdf_m[v] for v in voxels if seg[v])
    if p_f + p_m == 0:
        wf = wm = 0.5
    else:
        wf, wm = p_f / (p_f + p_m), p_m / (p_f + p_m)
    w = {v: wf * pdf_f[v] + wm * pdf_m[v] for v in voxels}
    top = max(w.values())
    out = np.zeros(image.shape)
    for v in voxels:
        scaled = w[v] / top if top > 0 else 0.0
        out[v] = (offset + seg[v]) * image[v] * scaled
    return out


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def t_density(df):
    df = mpmath.mpf(df)
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    return lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_cdf_quad(t, df):
    """Student-t CDF by numerical integration of the density (40 digits)."""
    with mpmath.workdps(40):
        f = t_density(df)
        half = mpmath.quad(f, [0, abs(mpmath.mpf(t))])
        return float(mpmath.mpf("0.5") + half if t >= 0 else mpmath.mpf("0.5") - half)


def t_two_sided_quad(t, df):
    with mpmath.workdps(40):
        return float(2 * mpmath.quad(t_density(df), [abs(mpmath.mpf(t)), mpmath.inf]))


def conv3d_loop(x, kernel, bias):
    """Zero-padded 3x3x3 cross-correlation, x (Cin,D,H,W), seven nested loops."""
    cin, d, h, w = x.shape
    cout = kernel.shape[0]
    out = np.zeros((cout, d, h, w))
    for o in range(cout):
        for i in range(d):
            for j in range(h):
                for k in range(w):
                    acc = float(bias[o])
                    for c in range(cin):
                        for a in range(3):
                            for b in range(3):
                                for e in range(3):
                                    ii, jj, kk = i + a - 1, j + b - 1, k + e - 1
                                    if 0 <= ii < d and 0 <= jj < h and 0 <= kk < w:
                                        acc += kernel[o, c, a, b, e] * x[c, ii, jj, kk]
                    out[o, i, j, k] = acc
    return out


def maxpool_loop(x):
    """2x2x2 max pooling over the trailing three axes."""
    lead = x.shape[:-3]
    d, h, w = x.shape[-3:]
    out = np.zeros(lead + (d // 2, h // 2, w // 2))
    for idx in np.ndindex(*lead):
        for i in range(d // 2):
            for j in range(h // 2):
                for k in range(w // 2):
                    out[idx + (i, j, k)] = max(
                        x[idx + (2 * i + a, 2 * j + b, 2 * k + c)] for a in range(2) for b in range(2) for c in range(2)
                    )
    return out
