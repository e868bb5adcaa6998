"""Independent reference implementations used by the tests.

Each oracle is written the slow, obvious way (explicit loops, no shared
helpers from the package) so that agreement is meaningful.
"""
import itertools
import math

import numpy as np


def conv2d_naive(x, w, b, stride, padding):
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0.0 if b is None else b[o])
    return out


def _lanczos(x, a=3):
    if x == 0:
        return 1.0
    if abs(x) >= a:
        return 0.0
    px = math.pi * x
    return a * math.sin(px) * math.sin(px / a) / (px * px)


def _axis_weights(n_in, n_out, a=3):
    """Dense (n_out, n_in) matrix, one normalised filter row per output sample."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        centre = (o + 0.5) * scale - 0.5
        row = {}
        lo = math.ceil(centre - a * support)
        hi = math.floor(centre + a * support)
        for s in range(lo, hi + 1):
            wt = _lanczos((s - centre) / support, a)
            src = min(max(s, 0), n_in - 1)
            row[src] = row.get(src, 0.0) + wt
        total = sum(row.values())
        for src, wt in row.items():
            m[o, src] = wt / total
    return m


def lanczos_direct(img, out_h, out_w):
    """Direct 2-D evaluation: every output pixel is a weighted sum over the source grid."""
    img = np.asarray(img, dtype=np.float64)
    wy = _axis_weights(img.shape[-2], out_h)
    wx = _axis_weights(img.shape[-1], out_w)
    out = np.zeros(img.shape[:-2] + (out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            kernel = np.outer(wy[i], wx[j])
            out[..., i, j] = (img * kernel).sum(axis=(-2, -1))
    return np.clip(out, 0.0, 1.0)


def metrics_bruteforce(pred, labels, k):
    """Accuracy and macro one-vs-rest precision/recall/F1 in percent; 0 for 0/0."""
    n = len(labels)
    correct = sum(1 for p, y in zip(pred, labels) if p == y)
    precs, recs, f1s = [], [], []
    for c in range(k):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(pred, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(pred, labels) if p != c and y == c)
        prec = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        precs.append(prec)
        recs.append(rec)
        f1s.append(f1)
    return {"accuracy": 100.0 * correct / n, "precision": sum(precs) / k, "recall": sum(recs) / k,
            "f1": sum(f1s) / k}


def exhaustive_bootstrap_endpoints(pred, labels, metric, k, alpha=0.05):
    """Exact percentile endpoints from all n**n equally likely resamples."""
    n = len(labels)
    values = []
    for idx in itertools.product(range(n), repeat=n):
        p = [pred[i] for i in idx]
        y = [labels[i] for i in idx]
        values.append(metrics_bruteforce(p, y, k)[metric])
    values = np.sort(np.array(values))
    cdf = np.arange(1, len(values) + 1) / len(values)

    def quantile(q):
        # smallest value whose empirical CDF reaches q
        return float(values[np.searchsorted(cdf, q - 1e-12)])

    return quantile(alpha / 2), quantile(1 - alpha / 2)


def exact_resample_support(pred, labels, metric, k):
    n = len(labels)
    vals = set()
    for idx in itertools.product(range(n), repeat=n):
        vals.add(round(metrics_bruteforce([pred[i] for i in idx], [labels[i] for i in idx], k)[metric], 9))
    return vals


def band_energies(img, mag=1.0, fine_period=3.0):
    """(coarse, fine) mean-square energy of the grey image in two radial bands.

    Frequencies are measured in cycles per full-resolution pixel, so the
    bands refer to the same physical scales at every magnification.
    """
    g = np.asarray(img, dtype=np.float64).mean(axis=0)
    g = g - g.mean()
    power = np.abs(np.fft.fft2(g)) ** 2 / g.size
    fy = np.fft.fftfreq(g.shape[0])[:, None]
    fx = np.fft.fftfreq(g.shape[1])[None, :]
    r = np.sqrt(fx ** 2 + fy ** 2) * mag
    f0 = 1.0 / fine_period
    fine = power[(r > 0.8 * f0) & (r < 1.25 * f0 * math.sqrt(2))].sum() / g.size
    coarse = power[(r > 0) & (r < 0.08)].sum() / g.size
    return coarse, fine


def band_energy_classify(img, mag, coarse_thr, fine_thr):
    """Fixed rule: blobs show as coarse energy, stripes as fine energy."""
    coarse, fine = band_energies(img, mag)
    blobs = coarse > coarse_thr
    stripes = fine > fine_thr
    if blobs and stripes:
        return 1
    if blobs:
        return 0
    return 2
