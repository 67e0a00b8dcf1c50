"""Scalar reference implementations used as test oracles.

Plain Python loops over floats, written straight from the formulas and
sharing no code with the package.
"""

import math


def flat(a):
    return [float(v) for v in a.reshape(-1)]


def mse(pred, target):
    p, t = flat(pred), flat(target)
    return math.fsum((a - b) ** 2 for a, b in zip(p, t)) / len(p)


def psnr(pred, target, max_value):
    return 10.0 * math.log10(max_value**2 / mse(pred, target))


def ssim_global(x, y, data_range=1.0):
    xs, ys = flat(x), flat(y)
    n = len(xs)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    vx = math.fsum((a - mx) ** 2 for a in xs) / n
    vy = math.fsum((b - my) ** 2 for b in ys) / n
    cxy = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def cosine(u, v):
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return dot / (nu * nv)


def pair_term(i, j, views, tau=1.0):
    """-log(exp(sim(i,j)) / sum_{k != i} exp(sim(i,k))), zero-based indices."""
    num = math.exp(cosine(views[i], views[j]) / tau)
    den = math.fsum(math.exp(cosine(views[i], views[k]) / tau) for k in range(len(views)) if k != i)
    return -math.log(num / den)


def contrastive(z_rgb, z_thermal, tau=1.0):
    views = []
    for a, b in zip(z_rgb, z_thermal):
        views.append(list(map(float, a)))
        views.append(list(map(float, b)))
    n = len(z_rgb)
    # one-based (2k-1, 2k) are zero-based (2k-2, 2k-1)
    return math.fsum(pair_term(2 * k, 2 * k + 1, views, tau) + pair_term(2 * k + 1, 2 * k, views, tau) for k in range(n)) / n


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at numpy array x by central differences."""
    g = x.copy()
    flat_x = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat_x.size):
        old = flat_x[i]
        flat_x[i] = old + h
        fp = f(x)
        flat_x[i] = old - h
        fm = f(x)
        flat_x[i] = old
        out[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    # gradients below the floor are compared absolutely: central differences
    # at h=1e-5 carry ~1e-11 of rounding noise
    return abs(a - b) / max(abs(a), abs(b), floor)
