"""Independent reference computations used to check the library.

Nothing here imports from ``ccsq``.
"""
import math

import mpmath


def brute_moments(xs, ys):
    """Population means, variances and covariance with plain Python loops (math.fsum)."""
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    vx = math.fsum((x - mx) ** 2 for x in xs) / n
    vy = math.fsum((y - my) ** 2 for y in ys) / n
    cov = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    return mx, my, vx, vy, cov


def brute_cc(xs, ys):
    _, _, vx, vy, cov = brute_moments(xs, ys)
    return cov / math.sqrt(vx * vy)


def brute_ccc(xs, ys):
    mx, my, vx, vy, cov = brute_moments(xs, ys)
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def central_difference(f, x, i, h=1e-6):
    xp = list(x)
    xm = list(x)
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


def probit_oracle(p, dps=50):
    """Inverse normal CDF by root-finding on mpmath's ncdf at high precision."""
    with mpmath.workdps(dps):
        p = mpmath.mpf(p)
        if p < 0.5:
            x0 = -mpmath.sqrt(-2 * mpmath.log(p))
            return float(mpmath.findroot(lambda x: mpmath.log(mpmath.ncdf(x)) - mpmath.log(p), x0))
        q = 1 - p
        x0 = mpmath.sqrt(-2 * mpmath.log(q))
        return float(mpmath.findroot(lambda x: mpmath.log(mpmath.ncdf(-x)) - mpmath.log(q), x0))


def solve_normal_equations(rows, ys):
    """Least squares through the normal equations, Gauss-Jordan in mpmath."""
    with mpmath.workdps(40):
        A = mpmath.matrix([[mpmath.mpf(v) for v in r] for r in rows])
        y = mpmath.matrix([mpmath.mpf(v) for v in ys])
        AtA = A.T * A
        Aty = A.T * y
        coef = mpmath.lu_solve(AtA, Aty)
        resid = y - A * coef
        mse = sum(r**2 for r in resid) / len(ys)
        return [float(c) for c in coef], float(mse)


def percentile_oracle(values, p):
    s = sorted(values)
    pos = p * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def average_ranks(col):
    """1-based ranks with ties sharing the mean of their positions, O(n^2)."""
    out = []
    for v in col:
        below = sum(1 for w in col if w < v)
        equal = sum(1 for w in col if w == v)
        out.append(below + (equal + 1) / 2.0)
    return out


def greedy_speaker_folds(counts, k):
    """Hand simulation of the balancing rule: biggest speaker first into the lightest fold."""
    load = [0] * k
    members = [[] for _ in range(k)]
    for spk in sorted(counts, key=lambda s: (-counts[s], s)):
        f = load.index(min(load))
        members[f].append(spk)
        load[f] += counts[spk]
    return members, load
