"""Reference solver for moment problems written by `to_sparse_text`.

Usage: python3 tools/moment_oracle.py problem.txt [scale]
Prints the optimum of scale * objective using cvxpy with Clarabel.
"""
import sys

import cvxpy as cp
import numpy as np


def parse(path):
    lines = [l.split() for l in open(path) if l.strip()]
    assert lines[0] == ["rdiqkd-moment-problem", "1"]
    n = int(lines[1][1])
    s = int(lines[2][1])
    i = 3
    count = int(lines[i][1]); i += 1
    classes = []
    for _ in range(count):
        t = lines[i]; i += 1
        entries = []
        for e in t[6:]:
            conj = e.endswith("*")
            p, q = e.rstrip("*").split(":")
            entries.append((int(p), int(q), conj))
        classes.append((t[5] == "real", entries))
    count = int(lines[i][1]); i += 1
    cons = []
    for _ in range(count):
        cons.append(lines[i]); i += 1
    count = int(lines[i][1]); i += 1
    obj = []
    for _ in range(count):
        t = lines[i]; i += 1
        obj.append((int(t[1]), float(t[2])))
    return n * s, classes, cons, obj


def main():
    dim, classes, cons, obj = parse(sys.argv[1])
    scale = float(sys.argv[2]) if len(sys.argv) > 2 else 1.0
    g = cp.Variable((dim, dim), hermitian=True)
    re = cp.Variable(len(classes))
    im = cp.Variable(len(classes))
    c = [g >> 0]
    for k, (real, entries) in enumerate(classes):
        if real:
            c.append(im[k] == 0)
        for p, q, conj in entries:
            c.append(cp.real(g[p, q]) == re[k])
            c.append(cp.imag(g[p, q]) == (-im[k] if conj else im[k]))
    for t in cons:
        var = re if t[2] == "re" else im
        k = int(t[1])
        if t[0] == "fix":
            c.append(var[k] == float(t[3]))
        else:
            c += [var[k] >= float(t[3]), var[k] <= float(t[4])]
    objective = sum(w * re[k] for k, w in obj) * scale
    prob = cp.Problem(cp.Maximize(objective), c)
    prob.solve(solver=cp.CLARABEL)
    print(f"{prob.status} {prob.value:.10f}")


if __name__ == "__main__":
    main()
