"""Independent reference implementations used as test oracles.

Everything here is deliberately dumb and slow: scalar loops, direct
summation, all-pairs scans. Nothing imports from the package's kernel or
autodiff machinery, so these stay independent of the paths they check.
"""

import math

import numpy as np


def naive_conv2d(xp, w, stride):
    """Scalar-loop valid cross-correlation; xp (N,Ci,Hp,Wp), w (Co,Ci,kh,kw)."""
    n, ci, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for oc in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ic in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[oc, ic, i, j] * xp[b, ic, oh * stride + i, ow * stride + j]
                    out[b, oc, oh, ow] = acc
    return out


def linear_interp_1d(values, spacing_in, coord_mm):
    """Closed-form 1D linear interpolation at a physical coordinate, clamped."""
    t = coord_mm / spacing_in
    n = len(values)
    if t <= 0:
        return float(values[0])
    if t >= n - 1:
        return float(values[n - 1])
    i = int(math.floor(t))
    f = t - i
    return float(values[i] * (1.0 - f) + values[i + 1] * f)


def two_pass_mean_std(values):
    """Direct-summation population mean/std (two explicit passes)."""
    vals = [float(v) for v in np.asarray(values).ravel()]
    n = len(vals)
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / n
    return mean, math.sqrt(var)


def brute_surface(mask):
    """6-neighbor surface scan: foreground with any background/outside neighbor."""
    mask = np.asarray(mask).astype(bool)
    out = []
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                on_surface = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    xx, yy, zz = x + dx, y + dy, z + dz
                    if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz) or not mask[xx, yy, zz]:
                        on_surface = True
                        break
                if on_surface:
                    out.append((x, y, z))
    return out


def brute_assd(pred, gt, spacing):
    """All-pairs average symmetric surface distance in mm."""
    sp = brute_surface(pred)
    sg = brute_surface(gt)
    assert sp and sg
    pa = [(x * spacing[0], y * spacing[1], z * spacing[2]) for x, y, z in sp]
    ga = [(x * spacing[0], y * spacing[1], z * spacing[2]) for x, y, z in sg]

    def min_d(p, pts):
        best = math.inf
        for q in pts:
            dx = p[0] - q[0]
            dy = p[1] - q[1]
            dz = p[2] - q[2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        return math.sqrt(best)

    dists = [min_d(p, ga) for p in pa] + [min_d(g, pa) for g in ga]
    # exactly rounded sum: comparable bit-for-bit with any other exact summation
    return math.fsum(dists) / (len(pa) + len(ga))


def scalar_disc_loss(d_real, d_fake, eps):
    """-mean(log d_real) - mean(log(1 - d_fake)) with [eps, 1-eps] clamping."""
    r = [min(max(float(v), eps), 1.0 - eps) for v in np.asarray(d_real).ravel()]
    f = [min(max(float(v), eps), 1.0 - eps) for v in np.asarray(d_fake).ravel()]
    return -math.fsum(math.log(v) for v in r) / len(r) \
           - math.fsum(math.log(1.0 - v) for v in f) / len(f)


def scalar_gen_loss(d_fake, mode, eps):
    f = [min(max(float(v), eps), 1.0 - eps) for v in np.asarray(d_fake).ravel()]
    if mode == "non_saturating":
        return -math.fsum(math.log(v) for v in f) / len(f)
    return math.fsum(math.log(1.0 - v) for v in f) / len(f)


def scalar_dice_term(pred, onehot, eps):
    p = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(onehot, dtype=float).ravel()
    inter = math.fsum(float(a * b) for a, b in zip(p, y))
    return 1.0 - (2.0 * inter + eps) / (math.fsum(p) + math.fsum(y) + eps)


def scalar_seg_loss(pred, target, alpha, beta, eps_smooth, eps_log):
    """Direct evaluation of the weighted dice + (corrected-sign) BCE mix.

    pred: (C,H,W) probabilities, target: (H,W) int labels.
    BCE is the per-pixel mean, summed over classes.
    """
    c, h, w = pred.shape
    loss = 0.0
    for cls in range(c):
        onehot = (np.asarray(target) == cls).astype(float)
        loss += beta * alpha[cls] * scalar_dice_term(pred[cls], onehot, eps_smooth)
    bce_terms = []
    for cls in range(c):
        for i in range(h):
            for j in range(w):
                y = 1.0 if target[i, j] == cls else 0.0
                p = min(max(float(pred[cls, i, j]), eps_log), 1.0 - eps_log)
                bce_terms.append(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    loss += (1.0 - beta) * (-math.fsum(bce_terms) / (h * w))
    return loss


def sobel_magnitude_ref(img):
    """Hand convolution of the 3x3 gradient pair with replicate borders."""
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    ky = kx.T
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    pad = np.pad(img, 1, mode="edge")
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    gx += kx[a, b] * pad[i + a, j + b]
                    gy += ky[a, b] * pad[i + a, j + b]
            out[i, j] = math.sqrt(gx * gx + gy * gy)
    return out


def fd_gradient(f, x, flat_idx, h):
    """Central finite difference of scalar f at one coordinate of x."""
    xp = x.copy()
    xp.flat[flat_idx] += h
    xm = x.copy()
    xm.flat[flat_idx] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)
