"""Scalar-loop reference implementations used as independent oracles.

Written directly from the formulas with explicit loops and plain floats; they
share no code with the vectorized implementations under test.
"""
import math


def joint_loss_loop(e_text, e_other, valid_len):
    """Sum over tokens of the channel-mean |E_T[n] - mean(E_other[window(n)])|."""
    n_frames = len(e_other)
    d = len(e_text[0])
    total = 0.0
    for n in range(valid_len):
        lo = (n * n_frames) // valid_len
        hi = ((n + 1) * n_frames) // valid_len
        acc = 0.0
        for c in range(d):
            s = 0.0
            for f in range(lo, hi):
                s += float(e_other[f][c])
            acc += abs(float(e_text[n][c]) - s / (hi - lo))
        total += acc / d
    return total


def cross_entropy_loop(logits, targets, pad_id=0):
    total, count = 0.0, 0
    for row, t in zip(logits, targets):
        if int(t) == pad_id:
            continue
        mx = max(float(v) for v in row)
        lse = mx + math.log(sum(math.exp(float(v) - mx) for v in row))
        total += lse - float(row[int(t)])
        count += 1
    return total / count if count else 0.0


def mean_abs_loop(a, b):
    total, n = 0.0, 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            total += abs(float(x) - float(y))
            n += 1
    return total / n


def recon_loop(logits, speech_hat, pose_hat, ids, speech, pose):
    return (cross_entropy_loop(logits, ids) + mean_abs_loop(speech_hat, speech)
            + mean_abs_loop(pose_hat, pose))


def pose_loss_loop(pred, gt, alpha, beta, gamma, cap):
    n, d = len(pred), len(pred[0])
    l1 = mean_abs_loop(pred, gt)
    vel = 0.0
    for t in range(1, n):
        for j in range(d):
            vel += abs(float(pred[t][j]) - float(pred[t - 1][j]))
    vel /= (n - 1) * d

    def var_avg(x):
        acc = 0.0
        for j in range(d):
            m = sum(float(x[t][j]) for t in range(n)) / n
            acc += sum((float(x[t][j]) - m) ** 2 for t in range(n)) / n
        return acc / d

    return alpha * l1 - beta * min(vel, cap) + gamma * abs(var_avg(pred) - var_avg(gt))


def mpjae_loop(pred, gt):
    total, count = 0.0, 0
    for a, b in zip(pred, gt):
        for ra, rb in zip(a, b):
            for x, y in zip(ra, rb):
                total += abs(float(x) - float(y)) * math.pi
                count += 1
    return total / count


def _sqdist(x, y):
    return sum((float(p) - float(q)) ** 2 for p, q in zip(x, y))


def mmd_loop(a, b, bandwidth):
    """Biased (V-statistic) squared MMD with exp(-|x-y|^2 / (2 bw^2))."""
    m, n = len(a), len(b)

    def k(x, y):
        return math.exp(-_sqdist(x, y) / (2 * bandwidth**2))

    s_aa = sum(k(a[i], a[j]) for i in range(m) for j in range(m)) / (m * m)
    s_bb = sum(k(b[i], b[j]) for i in range(n) for j in range(n)) / (n * n)
    s_ab = sum(k(a[i], b[j]) for i in range(m) for j in range(n)) / (m * n)
    return s_aa + s_bb - 2 * s_ab


def median_pairwise_loop(points):
    d = []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d.append(math.sqrt(_sqdist(points[i], points[j])))
    d.sort()
    mid = len(d) // 2
    return d[mid] if len(d) % 2 else 0.5 * (d[mid - 1] + d[mid])


def all_pairs_mean_distance(latents):
    total, count = 0.0, 0
    for i in range(len(latents)):
        for j in range(len(latents)):
            if i != j:
                total += math.sqrt(_sqdist(latents[i], latents[j]))
                count += 1
    return total / count
