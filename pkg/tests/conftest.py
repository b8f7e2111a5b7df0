"""Shared numeric oracles, deliberately independent of the library code.

Gradients are checked against central finite differences, rotated box
overlap against Monte-Carlo area sampling, and ranking metrics against
an exhaustive per-threshold sweep. Tests freeze these oracle values or
call the helpers directly.
"""

import numpy as np


def finite_difference(f, x, index, step=1e-6):
    """Central-difference derivative of scalar ``f`` at one array slot."""
    bumped = np.array(x, dtype=np.float64)
    bumped[index] += step
    up = f(bumped)
    bumped[index] -= 2.0 * step
    down = f(bumped)
    return (up - down) / (2.0 * step)


def numeric_gradient(f, x, step=1e-6):
    """Dense finite-difference gradient; only for small arrays."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        grad[it.multi_index] = finite_difference(f, x, it.multi_index, step)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rel=1e-6, absolute=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(numeric), 1.0)
    err = np.abs(analytic - numeric)
    worst = float((err / scale).max()) if err.size else 0.0
    assert err.size == 0 or (err <= absolute + rel * scale).all(), (
        f"gradient mismatch: worst relative error {worst:.3e}")


def rect_corners(cx, cy, length, width, yaw):
    """BEV corner ring of an oriented rectangle, computed from scratch."""
    c, s = np.cos(yaw), np.sin(yaw)
    half = np.array([[+length, +width], [-length, +width],
                     [-length, -width], [+length, -width]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + np.array([cx, cy])


def points_in_rect(pts, cx, cy, length, width, yaw):
    """Membership test done in the rectangle's own frame."""
    c, s = np.cos(yaw), np.sin(yaw)
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * length) & (np.abs(v) <= 0.5 * width)


def mc_rect_iou(box_a, box_b, rng, samples=10 ** 6):
    """Monte-Carlo BEV IoU of two oriented rectangles.

    Samples uniformly over the union's axis-aligned bounding rectangle
    and reuses the same points for intersection and union, so the ratio
    is far tighter than either area estimate alone.
    """
    ca = rect_corners(box_a.cx, box_a.cy, box_a.l, box_a.w, box_a.yaw)
    cb = rect_corners(box_b.cx, box_b.cy, box_b.l, box_b.w, box_b.yaw)
    allc = np.vstack([ca, cb])
    lo = allc.min(axis=0)
    hi = allc.max(axis=0)
    pts = rng.uniform(lo, hi, size=(samples, 2))
    in_a = points_in_rect(pts, box_a.cx, box_a.cy, box_a.l, box_a.w,
                          box_a.yaw)
    in_b = points_in_rect(pts, box_b.cx, box_b.cy, box_b.l, box_b.w,
                          box_b.yaw)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def freeze_batchnorm(module):
    """Stop running-stat updates so repeated forwards are identical,
    which finite differencing requires."""
    from pillarfuse.layers import BatchNorm1d
    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, BatchNorm1d):
            m.update_running = False
        stack.extend(child for _, child in m._children())


def sweep_ap40(scores, is_tp, num_gt):
    """AP40 by brute force: re-derive the PR point at every distinct
    score threshold, then average the interpolated precision at the 40
    reference recall positions."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    scores = np.asarray(scores, dtype=np.float64)[order]
    is_tp = np.asarray(is_tp, dtype=bool)[order]
    recalls, precisions = [], []
    for threshold in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= threshold
        tp = int(np.count_nonzero(is_tp & keep))
        fp = int(np.count_nonzero(~is_tp & keep))
        if tp + fp == 0:
            continue
        recalls.append(tp / num_gt)
        precisions.append(tp / (tp + fp))
    recalls = np.asarray(recalls)
    precisions = np.asarray(precisions)
    total = 0.0
    for i in range(1, 41):
        reachable = recalls >= i / 40.0
        if reachable.any():
            total += float(precisions[reachable].max())
    return total / 40.0
