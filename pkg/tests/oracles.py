"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def naive_counts(pred, ref, label):
    tp = fp = fn = 0
    nx, ny, nz = pred.shape
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        p = pred[x, y, z] == label
        r = ref[x, y, z] == label
        tp += p and r
        fp += p and not r
        fn += r and not p
    return tp, fp, fn


def naive_surface(mask, spacing=(1.0, 1.0, 1.0)):
    pts = []
    nx, ny, nz = mask.shape
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        if not mask[x, y, z]:
            continue
        on_surface = False
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = x + d[0], y + d[1], z + d[2]
            if not (0 <= a < nx and 0 <= b < ny and 0 <= c < nz) or not mask[a, b, c]:
                on_surface = True
                break
        if on_surface:
            pts.append((x * spacing[0], y * spacing[1], z * spacing[2]))
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _all_pairs(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def naive_hd(a, b, clip=150.0):
    if len(a) == 0 or len(b) == 0:
        return clip
    d = _all_pairs(a, b)
    return min(max(d.min(1).max(), d.min(0).max()), clip)


def naive_asd(a, b, clip=10.0):
    if len(a) == 0 or len(b) == 0:
        return clip
    d = _all_pairs(a, b)
    return min((d.min(1).sum() + d.min(0).sum()) / (len(a) + len(b)), clip)


def naive_metrics(pred, ref, label, spacing=(1.0, 1.0, 1.0)):
    """All seven metrics with the empty-set conventions, from loops and all-pairs distances."""
    tp, fp, fn = naive_counts(pred, ref, label)
    npred, nref = tp + fp, tp + fn
    if npred == 0 and nref == 0:
        return dict(dsc=1.0, ji=1.0, pr=1.0, re=1.0, hd=0.0, asd=0.0, rvd=0.0)
    if npred == 0 or nref == 0:
        return dict(dsc=0.0, ji=0.0, pr=0.0, re=0.0, hd=150.0, asd=10.0, rvd=1.0)
    sa = naive_surface(pred == label, spacing)
    sb = naive_surface(ref == label, spacing)
    return dict(
        dsc=2 * tp / (2 * tp + fp + fn),
        ji=tp / (tp + fp + fn),
        pr=tp / (tp + fp),
        re=tp / (tp + fn),
        hd=naive_hd(sa, sb),
        asd=naive_asd(sa, sb),
        rvd=min(abs(npred - nref) / nref, 1.0),
    )


def naive_box_sum(data, lo, hi):
    total = 0.0
    for x in range(lo[0], hi[0]):
        for y in range(lo[1], hi[1]):
            for z in range(lo[2], hi[2]):
                total += float(data[x, y, z])
    return total


def hand_pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def random_label_pair(rng, shape=(12, 12, 12), num_classes=3):
    """Blobby random label maps so that surfaces are non-trivial."""
    from scipy import ndimage

    def one():
        noise = ndimage.gaussian_filter(rng.random(shape), 1.5)
        q = np.quantile(noise, np.linspace(0, 1, num_classes + 1)[1:-1])
        return np.digitize(noise, q).astype(np.uint8)

    a, b = one(), one()
    # sometimes force an empty label on one side to exercise the clip conventions
    if rng.random() < 0.1:
        a[a == 1] = 0
    return a, b
