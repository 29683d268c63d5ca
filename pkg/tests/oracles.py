"""Independent reference implementations used only by the tests.

Each oracle recomputes its target quantity by a deliberately different route
(dense convolution, exhaustive search, quadrature, direct formulas) and
shares no numerical code with the package paths it checks.
"""

import math

import numpy as np
from scipy.ndimage import label

from vamae.autodiff import no_grad


def _sampled_gaussian_kernels(sigma):
    """Own construction of the truncated, moment-corrected derivative taps."""
    radius = max(1, math.ceil(4.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    base = np.exp(-(taps**2) / (2.0 * sigma**2)) / (math.sqrt(2.0 * math.pi) * sigma)
    g0 = base / base.sum()
    g1 = -taps / sigma**2 * base
    g1 = g1 - g1.mean()
    g2 = (taps**2 - sigma**2) / sigma**4 * base
    g2 = g2 - g2.mean()
    return g0, g1, g2, radius


def dense_hessian_at_scale(img, sigma):
    """Brute-force full-2D-convolution Hessian (mirror boundaries)."""
    arr = np.asarray(img, dtype=np.float64)
    g0, g1, g2, radius = _sampled_gaussian_kernels(sigma)

    def conv2(image, kern_x, kern_y):
        kernel = np.outer(kern_y, kern_x)
        flipped = kernel[::-1, ::-1]
        padded = np.pad(image, radius, mode="reflect")
        h, w = image.shape
        out = np.empty_like(image)
        for i in range(h):
            for j in range(w):
                window = padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1]
                out[i, j] = np.sum(window * flipped)
        return out

    s2 = sigma**2
    return (
        s2 * conv2(arr, g2, g0),
        s2 * conv2(arr, g1, g1),
        s2 * conv2(arr, g0, g2),
    )


def dense_frangi_single_scale(img, sigma, beta=0.5, c=None, bright=True):
    """Per-pixel eigvalsh + direct ridge formula oracle."""
    h_xx, h_xy, h_yy = dense_hessian_at_scale(img, sigma)
    h, w = h_xx.shape
    l1 = np.empty((h, w))
    l2 = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            evals = np.linalg.eigvalsh(
                np.array([[h_xx[i, j], h_xy[i, j]], [h_xy[i, j], h_yy[i, j]]])
            )
            a, b = sorted(evals, key=abs)
            l1[i, j], l2[i, j] = a, b
    s_field = np.sqrt(l1**2 + l2**2)
    if c is None:
        s_max = s_field.max()
        if s_max == 0.0:
            return np.zeros((h, w))
        c = 0.5 * s_max
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            lam2 = l2[i, j]
            if (bright and lam2 >= 0.0) or (not bright and lam2 <= 0.0):
                continue
            rb = abs(l1[i, j]) / abs(lam2)
            s = s_field[i, j]
            out[i, j] = math.exp(-(rb**2) / (2.0 * beta**2)) * (
                1.0 - math.exp(-(s**2) / (2.0 * c**2))
            )
    return out


def exhaustive_otsu_threshold(img, n_bins=256):
    """Try all split points; lowest index wins ties; threshold = (t+1)/bins."""
    values = np.asarray(img, dtype=np.float64).ravel()
    bins = np.clip(np.floor(values * n_bins).astype(int), 0, n_bins - 1)
    counts = [0] * n_bins
    for b in bins:
        counts[b] += 1
    total = float(len(bins))
    best_t, best_var = 0, -1.0
    for t in range(n_bins - 1):
        n0 = sum(counts[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            var = 0.0
        else:
            mu0 = sum(k * counts[k] for k in range(t + 1)) / n0
            mu1 = sum(k * counts[k] for k in range(t + 1, n_bins)) / n1
            var = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    return (best_t + 1) / n_bins


def count_components_8(mask):
    """8-connected foreground component count (scipy labelling)."""
    structure = np.ones((3, 3), dtype=int)
    return label(np.asarray(mask) > 0, structure=structure)[1]


def has_2x2_block(mask):
    m = np.asarray(mask) > 0
    return bool((m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1] & m[1:, 1:]).any())


def finite_difference_gradients(params, loss_fn, step=1e-5):
    """Central finite differences of loss_fn() w.r.t. every parameter entry."""
    grads = {}
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            g = np.zeros(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn()
                flat[i] = orig - step
                down = loss_fn()
                flat[i] = orig
                g[i] = (up - down) / (2.0 * step)
            grads[p.name] = g.reshape(p.data.shape)
    return grads


def gradient_relative_error(analytic, numeric, floor=1e-6):
    """Max elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def direct_bce_from_logits(logits, targets):
    """-[t ln s(z) + (1-t) ln(1-s(z))], meaned; plain formula in float64."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean(-(t * np.log(s) + (1.0 - t) * np.log(1.0 - s))))


def t_two_sided_p_quadrature(t, df, n_nodes=4000):
    """2 * P(T >= |t|) via Gauss-Legendre integration of the t density."""
    t = abs(float(t))
    if t == 0.0:
        return 1.0
    log_norm = (
        math.lgamma((df + 1) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
    )

    def density(x):
        return np.exp(log_norm - ((df + 1) / 2.0) * np.log1p(x * x / df))

    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    x = 0.5 * t * (nodes + 1.0)
    inner = 0.5 * t * np.sum(weights * density(x))
    return 1.0 - 2.0 * inner


def direct_cohens_d(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    va = sum((x - a.mean()) ** 2 for x in a) / (na - 1)
    vb = sum((x - b.mean()) ** 2 for x in b) / (nb - 1)
    pooled = math.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    return (a.mean() - b.mean()) / pooled
