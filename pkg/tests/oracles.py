"""Deliberately naive reference implementations used as test oracles."""

import math


def pearson_bruteforce(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    if vx == 0 or vy == 0:
        return 0.0
    return cov / (math.sqrt(vx) * math.sqrt(vy))


def emi_bruteforce(preds, labels):
    rhos = [pearson_bruteforce([r[k] for r in preds], [r[k] for r in labels]) for k in range(6)]
    return rhos, sum(rhos) / 6


def weighted_f1_bruteforce(preds, labels):
    f1s, supports = [], []
    for cls in (0, 1):
        tp = fp = fn = 0
        for p, y in zip(preds, labels):
            if p == cls and y == cls:
                tp += 1
            elif p == cls and y != cls:
                fp += 1
            elif p != cls and y == cls:
                fn += 1
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
        supports.append(sum(1 for y in labels if y == cls))
    return f1s, sum(n * f for n, f in zip(supports, f1s)) / sum(supports)


def median_root_bruteforce(track, width):
    """Window majority with symmetric shrinking at the ends, iterated to a fixed point."""
    half = width // 2
    cur = list(track)
    while True:
        n = len(cur)
        nxt = []
        for i in range(n):
            r = min(half, i, n - 1 - i)
            window = cur[i - r : i + r + 1]
            nxt.append(1 if sum(window) * 2 > len(window) else 0)
        if nxt == cur:
            return cur
        cur = nxt


def run_length_encode(track):
    runs = []
    for v in track:
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def min_duration_bruteforce(track, min_len):
    runs = run_length_encode(track)
    runs = [[0 if (v == 1 and n < min_len) else v, n] for v, n in runs]
    flat = [v for v, n in runs for _ in range(n)]
    runs = run_length_encode(flat)
    out = []
    for k, (v, n) in enumerate(runs):
        interior = 0 < k < len(runs) - 1
        fill = v == 0 and interior and n < min_len
        out.extend([1 if fill else v] * n)
    return out


def centered_window_bruteforce(features, rate, center_time, window_s):
    """Row-by-row slicer: row j holds the frame K//2 - j steps before the center frame."""
    k = max(1, int(round(window_s * rate)))
    n = len(features)
    center_frame = min(int(math.floor(center_time * rate + 1e-9)), n - 1)
    rows, mask = [], []
    for j in range(k):
        f = center_frame - k // 2 + j
        if 0 <= f < n:
            rows.append(list(features[f]))
            mask.append(1)
        else:
            rows.append([0.0] * len(features[0]))
            mask.append(0)
    return rows, mask, k // 2


def rounded_spacing(n_available, n_target):
    if n_target == 1:
        return [(n_available - 1) // 2]
    out = []
    for i in range(n_target):
        x = i * (n_available - 1) / (n_target - 1)
        out.append(int(math.floor(x + 0.5 + 1e-12)))
    return out


def text_window_bruteforce(words, center, window_s, marker="[NOW]"):
    lo, hi = center - window_s / 2, center + window_s / 2
    inside = [w for w in words if lo <= (w.start_s + w.end_s) / 2 < hi]
    before = [w.word for w in inside if w.start_s <= center]
    after = [w.word for w in inside if w.start_s > center]
    return before + [marker] + after
