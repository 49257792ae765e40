"""Smoke test for the compiled extension: python python/smoke_test.py"""
import json
import math
import os
import random
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import kronfit

THETA0 = [0.5493061443340548, 0.0, -0.190996375961511, -0.3095196042031117, -0.19099637596151095]


def cholesky(a):
    n = len(a)
    l = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = a[i][j] - sum(l[i][k] * l[j][k] for k in range(j))
            l[i][j] = math.sqrt(s) if i == j else s / l[j][j]
    return l


def main():
    design = kronfit.Design([2, 2])
    assert design.num_params == 5 and design.overid_df == 5
    assert design.labels[0] == "f1[2,1]"

    f1 = [[1.0, 0.5], [0.5, 1.0]]
    f2 = [[1.0, -0.3], [-0.3, 1.0]]
    theta = design.theta_from_factors([f1, f2])
    assert max(abs(a - b) for a, b in zip(theta, THETA0)) < 1e-12

    corr = design.correlation(THETA0)
    root = cholesky(corr)
    rng = random.Random(1)
    data = []
    for _ in range(5000):
        z = [rng.gauss(0.0, 1.0) for _ in range(4)]
        data.append([sum(root[i][k] * z[k] for k in range(4)) for i in range(4)])

    md, os_ = kronfit.estimate(data, [2, 2])
    assert md.method == "md-identity" and os_.method == "one-step"
    for est in (md, os_):
        err = max(abs(a - b) for a, b in zip(est.theta, THETA0))
        assert err < 0.05, (est, err)
        assert all(se > 0 for se in est.std_errors)

    stat, df, p_chi2, _ = kronfit.overid(data, [2, 2])
    assert df == 1 and stat >= 0 and 0 <= p_chi2 <= 1

    m = [[2.0, 0.3], [0.3, 1.0]]
    back = kronfit.matrix_exp(kronfit.matrix_log(m))
    assert max(abs(back[i][j] - m[i][j]) for i in range(2) for j in range(2)) < 1e-12

    shrunk = kronfit.shrink_2x2((-0.2, 0.4, -0.1))
    assert shrunk[0][0] == 1.0 and shrunk[1][1] == 1.0

    summary = json.loads(kronfit.simulate([2, 2], THETA0, t=500, reps=200, seed=3))
    assert summary["successes"] == 200

    try:
        kronfit.Design([1])
    except kronfit.KronfitError as e:
        assert "InvalidDims" in str(e)
    else:
        raise AssertionError("expected KronfitError")

    print("kronfit", kronfit.__version__, "smoke test ok")


if __name__ == "__main__":
    main()
