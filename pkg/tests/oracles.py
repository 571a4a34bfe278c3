"""Independent reference computations used as test oracles."""
import numpy as np


def brute_force_metrics(pred, truth, mode="two"):
    """Per-pixel double loop, then the four scores straight from their definitions."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    n = [[0, 0], [0, 0]]
    for r in range(truth.shape[0]):
        for c in range(truth.shape[1]):
            n[int(truth[r, c])][int(pred[r, c])] += 1
    t = [n[0][0] + n[0][1], n[1][0] + n[1][1]]
    total = t[0] + t[1]

    def iou(i):
        union = t[i] + n[0][i] + n[1][i] - n[i][i]
        return n[i][i] / union if union else 1.0

    def acc(i):
        return n[i][i] / t[i] if t[i] else 1.0

    classes = [0, 1] if mode == "two" else [1]
    present = [i for i in classes if t[i] > 0]
    if present:
        mean_acc = sum(acc(i) for i in present) / len(present)
        mean_iou = sum(iou(i) for i in present) / len(present)
    else:
        mean_acc = mean_iou = 1.0 if n[0][1] == 0 else 0.0
    fwiou = sum(t[i] * iou(i) for i in (0, 1)) / total
    tp, fp, fn = n[1][1], n[0][1], n[1][0]
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
    return {
        "pixel_acc": (n[0][0] + n[1][1]) / total,
        "mean_acc": mean_acc,
        "mean_iou": mean_iou,
        "fwiou": fwiou,
        "precision": precision,
        "recall": recall,
    }


def otsu_exhaustive(hist):
    """Try every threshold t in 0..255 (class 0 = levels <= t); first maximum wins."""
    hist = np.asarray(hist, dtype=np.int64)
    levels = np.arange(hist.size, dtype=np.int64)
    total = int(hist.sum())
    best_t, best = 0, -1.0
    for t in range(hist.size):
        c0 = int(hist[: t + 1].sum())
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            score = 0.0
        else:
            s0 = int((hist[: t + 1] * levels[: t + 1]).sum())
            s1 = int((hist * levels).sum()) - s0
            w0, w1 = c0 / total, c1 / total
            d = s0 / c0 - s1 / c1
            score = w0 * w1 * d * d
        if score > best:
            best_t, best = t, score
    return best_t, best


def fcm_loop(values, centers, m=2.0, iters=500):
    """Plain-loop fuzzy c-means from given centres; returns (centers, hard labels)."""
    centers = [float(c) for c in centers]
    for _ in range(iters):
        u = []
        for x in values:
            d = [abs(x - c) for c in centers]
            if 0.0 in d:
                u.append([1.0 if di == 0.0 else 0.0 for di in d])
                continue
            row = [1.0 / sum((di / dj) ** (2.0 / (m - 1.0)) for dj in d) for di in d]
            u.append(row)
        new = []
        for c in range(len(centers)):
            num = sum(u[i][c] ** m * values[i] for i in range(len(values)))
            den = sum(u[i][c] ** m for i in range(len(values)))
            new.append(num / den)
        done = max(abs(a - b) for a, b in zip(new, centers)) < 1e-14
        centers = new
        if done:
            break
    labels = [max(range(len(centers)), key=lambda c: (u[i][c], -c)) for i in range(len(values))]
    return centers, labels
