"""Brute-force reference implementations shared by unit and acceptance tests."""
import numpy as np


def voxel_count_iou(a, b):
    """IoU of two integer boxes by counting unit cells."""
    lo = np.minimum(a[:3], b[:3]).astype(int)
    hi = np.maximum(a[3:], b[3:]).astype(int)
    axes = [np.arange(l, h) + 0.5 for l, h in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    ina = np.all((pts >= a[:3]) & (pts < a[3:]), axis=1)
    inb = np.all((pts >= b[:3]) & (pts < b[3:]), axis=1)
    return (ina & inb).sum() / (ina | inb).sum()


def plain_iou(a, b):
    """Scalar IoU of two corner 6-tuples in plain Python."""
    inter = 1.0
    for k in range(3):
        inter *= max(0.0, min(a[k + 3], b[k + 3]) - max(a[k], b[k]))
    va = (a[3] - a[0]) * (a[4] - a[1]) * (a[5] - a[2])
    vb = (b[3] - b[0]) * (b[4] - b[1]) * (b[5] - b[2])
    return inter / (va + vb - inter)


def greedy_nms_oracle(boxes, scores, thr):
    boxes = [tuple(map(float, b)) for b in boxes]
    remaining = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [j for j in remaining if plain_iou(boxes[best], boxes[j]) <= thr]
    return keep


def brute_roi(x, lo, hi, bins=4):
    """Max over each of ``bins**3`` integer sub-ranges of the region ``[lo, hi)``."""
    c = x.shape[0]
    out = np.zeros((c, bins, bins, bins))
    n = np.asarray(hi) - np.asarray(lo)
    for i in range(bins):
        for j in range(bins):
            for k in range(bins):
                sl = []
                for ax, b in enumerate((i, j, k)):
                    a0 = (b * n[ax]) // bins
                    a1 = ((b + 1) * n[ax]) // bins
                    if a1 <= a0:  # fewer cells than bins: replicate
                        a0 = min(a0, n[ax] - 1)
                        a1 = a0 + 1
                    sl.append(slice(lo[ax] + a0, lo[ax] + a1))
                out[:, i, j, k] = x[(slice(None),) + tuple(sl)].reshape(c, -1).max(axis=1)
    return out


def random_boxes(rng, n, span=20, max_size=8):
    lo = rng.uniform(0, span, (n, 3))
    return np.concatenate([lo, lo + rng.uniform(1, max_size, (n, 3))], axis=1)


# (tp/fp sequence in descending score order, ground-truth count, AP worked out by hand)
PR_CASES = [
    ([1], 1, 1.0),
    ([0, 1], 1, 0.5),
    ([1, 0], 1, 1.0),
    ([1, 1], 2, 1.0),
    ([1, 0, 1], 2, 0.5 + 0.5 * 2 / 3),
    ([0, 0, 1], 1, 1 / 3),
    ([1], 2, 0.5),
    ([0], 1, 0.0),
    ([], 3, 0.0),
    ([1, 0, 0, 1], 2, 0.75),
    ([0, 1, 0, 1], 2, 0.5),
    ([0, 1, 1], 2, 2 / 3),
    ([1, 1, 0, 1], 4, 0.25 + 0.25 + 0.25 * 0.75),
    ([1, 0, 1, 0, 1], 3, 1 / 3 + 2 / 9 + 1 / 5),
    ([0, 0, 0, 1, 1], 2, 0.4),
    ([1, 1, 1], 3, 1.0),
    ([1, 0, 0, 0], 1, 1.0),
    ([0, 1], 3, 1 / 6),
    ([1, 0, 1, 1], 5, 0.2 + 0.15 + 0.15),
    ([0, 0], 0, 0.0),
]


def detections_for_sequence(seq, n_gt):
    """Ground-truth cubes plus detections whose greedy matching reproduces ``seq``."""
    from sis3d.evalkit import Detection
    from sis3d.grid import Box3, InstanceAnnotation

    gts = []
    for g in range(n_gt):
        pts = np.argwhere(np.ones((2, 2, 2))) + [10 * g, 0, 0]
        gts.append(InstanceAnnotation.from_mask(pts, 0))
    dets, nxt = [], 0
    for rank, hit in enumerate(seq):
        score = 1.0 - rank / (len(seq) + 1)
        if hit:
            dets.append(Detection(gts[nxt].box, 0, score, gts[nxt].mask))
            nxt += 1
        else:
            far = Box3.from_corners((0, 50, 50), (2, 52, 52))
            dets.append(Detection(far, 0, score, np.array([[0, 50, 50]])))
    return dets, gts
