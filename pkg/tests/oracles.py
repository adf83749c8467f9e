"""Independent reference computations used by the tests. Nothing here imports library code paths
under test except plain config dataclasses."""

import cmath
import math

import numpy as np


# ---- spectra ---------------------------------------------------------------

def brute_dft2(f):
    """Direct double sum: F(u,v) = sum_x sum_y f(x,y) exp(-j 2 pi (ux/M + vy/N)), DC at (0,0)."""
    f = np.asarray(f, dtype=float)
    m, n = f.shape
    out = np.zeros((m, n), dtype=complex)
    for u in range(m):
        for v in range(n):
            acc = 0j
            for x in range(m):
                for y in range(n):
                    acc += f[x, y] * cmath.exp(-2j * math.pi * (u * x / m + v * y / n))
            out[u, v] = acc
    return out


def brute_idft2(F):
    F = np.asarray(F, dtype=complex)
    m, n = F.shape
    out = np.zeros((m, n), dtype=complex)
    for x in range(m):
        for y in range(n):
            acc = 0j
            for u in range(m):
                for v in range(n):
                    acc += F[u, v] * cmath.exp(2j * math.pi * (u * x / m + v * y / n))
            out[x, y] = acc / (m * n)
    return out


def center(F):
    """Move bin (u, v) to ((u + M//2) mod M, (v + N//2) mod N) so DC sits at (M//2, N//2)."""
    m, n = F.shape
    out = np.empty_like(F)
    for u in range(m):
        for v in range(n):
            out[(u + m // 2) % m, (v + n // 2) % n] = F[u, v]
    return out


def uncenter(C):
    m, n = C.shape
    out = np.empty_like(C)
    for u in range(m):
        for v in range(n):
            out[u, v] = C[(u + m // 2) % m, (v + n // 2) % n]
    return out


def rect_filter(m, n, w, h):
    """H(u,v) = 1 inside M/2 - W/2 <= u <= M/2 + W/2 (and likewise for v), centered indices,
    with the center taken at the DC position M//2."""
    H = np.zeros((m, n))
    for u in range(m):
        for v in range(n):
            if m // 2 - w / 2 <= u <= m // 2 + w / 2 and n // 2 - h / 2 <= v <= n // 2 + h / 2:
                H[u, v] = 1.0
    return H


def brute_low_frequency(f, w, h):
    m, n = np.shape(f)
    C = center(brute_dft2(f)) * rect_filter(m, n, w, h)
    return brute_idft2(uncenter(C))


# ---- loss / metrics --------------------------------------------------------

def log_sigmoid(z):
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


def termwise_loss(logits, labels, weights, ignore_index=255):
    """Pixel-by-pixel, class-by-class evaluation of the weighted binary log loss, mean over kept pixels."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    k, hh, ww = logits.shape
    total, count = 0.0, 0
    for r in range(hh):
        for c in range(ww):
            g = int(labels[r, c])
            if g == ignore_index:
                continue
            s = 0.0
            for i in range(k):
                y = 1.0 if i == g else 0.0
                z = float(logits[i, r, c])
                s += weights[i] * (y * log_sigmoid(z) + (1 - y) * log_sigmoid(-z))
            total += -s
            count += 1
    return total / count


def brute_confusion(pred, gt, k, ignore_index=255):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if int(g) == ignore_index:
            continue
        cm[int(g)][int(p)] += 1
    return np.array(cm, dtype=np.int64)


def brute_metrics(cm):
    k = len(cm)
    out = {"iou": [], "acc": [], "prec": [], "dice": []}
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[g][c] for g in range(k)) - tp
        fn = sum(cm[c][p] for p in range(k)) - tp
        out["iou"].append(tp / (tp + fp + fn) if tp + fp + fn else None)
        out["acc"].append(tp / (tp + fn) if tp + fn else None)
        out["prec"].append(tp / (tp + fp) if tp + fp else None)
        out["dice"].append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None)
    total = sum(sum(row) for row in cm)
    out["oa"] = sum(cm[c][c] for c in range(k)) / total
    for key in ("iou", "acc", "prec", "dice"):
        vals = [v for v in out[key] if v is not None]
        out["m" + key] = sum(vals) / len(vals)
    return out


# ---- parameter accounting --------------------------------------------------

def linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def conv(i, o, k, bias=True):
    return i * o * k * k + (o if bias else 0)


def closed_form_counts(cfg):
    """(total, trainable) summed layer by layer from the architecture's dimensions."""
    d, g, p = cfg.embed_dim, cfg.grid_size, cfg.patch_size
    hidden_mlp = int(d * cfg.mlp_ratio)
    frozen = 0
    frozen += conv(1, d, p)                       # patch projection
    frozen += g * g * d                           # positional grid
    per_block = 2 * (2 * d)                       # two layer norms
    per_block += linear(d, 3 * d) + linear(d, d)  # qkv + output projection
    per_block += linear(d, hidden_mlp) + linear(hidden_mlp, d)
    frozen += cfg.depth * per_block
    frozen += conv(d, cfg.neck_dim, 1, bias=False) + 2 * cfg.neck_dim
    frozen += conv(cfg.neck_dim, cfg.neck_dim, 3, bias=False) + 2 * cfg.neck_dim

    trainable = 0
    if cfg.adapters_enabled:
        a = cfg.adapter_hidden_dim
        trainable += cfg.depth * 2 * (linear(d, a) + linear(a, d))
    if cfg.tsi_enabled:
        t = cfg.tsi_dim
        trainable += linear(d, t) + linear(p * p, t) + cfg.depth * linear(t, t) + linear(t, d)

    e, s = cfg.decoder_dim, cfg.num_mask_slots
    _, u1, u2 = cfg.upscale_dims
    dec = s * e + g * g * e                       # mask tokens + image positional grid
    if cfg.neck_dim != e:
        dec += conv(cfg.neck_dim, e, 1)
    half = e // 2
    attn_full = 3 * linear(e, e) + linear(e, e)
    attn_half = 3 * linear(e, half) + linear(half, e)
    block = attn_full + 2 * attn_half + linear(e, cfg.decoder_mlp_dim) + linear(cfg.decoder_mlp_dim, e)
    block += 4 * 2 * e                            # four layer norms
    dec += 2 * block
    up = lambda i: conv(i, u1, 2) + 2 * u1 + conv(u1, u2, 2) + 2 * u2
    dec += up(e)
    if cfg.feature_enhance_enabled:
        dec += up(cfg.neck_dim)
    dec += conv(2 * u2, 2 * u2, 2) + 2 * (2 * u2) + conv(2 * u2, cfg.classwise_channels * cfg.num_classes, 3)
    dec += s * (linear(e, e) + linear(e, e) + linear(e, cfg.classwise_channels))
    trainable += dec
    return frozen + trainable, trainable


# ---- gradients -------------------------------------------------------------

def central_difference(fn, tensor, index, step=1e-5):
    """d fn / d tensor[index] by (f(x+h) - f(x-h)) / 2h, restoring the entry afterwards."""
    import torch

    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        plus = fn().item()
        tensor[index] = orig - step
        minus = fn().item()
        tensor[index] = orig
    return (plus - minus) / (2 * step)
