"""Blend scores for the hand-built matrices in tests/test_ensemble.cpp, in 50-digit arithmetic."""
from decimal import Decimal, getcontext

getcontext().prec = 50

P = [
    [[0.6, 0.1, 0.1, 0.1, 0.1], [0.05, 0.05, 0.1, 0.2, 0.6]],
    [[0.2, 0.5, 0.1, 0.1, 0.1], [0.3, 0.3, 0.2, 0.1, 0.1]],
    [[0.25, 0.25, 0.25, 0.125, 0.125], [0.0, 0.0, 0.0, 1.0, 0.0]],
]
W = [Decimal("0.2"), Decimal("0.7"), Decimal("0.6")]
N = [Decimal("0.125"), Decimal("0.125"), Decimal("0.25")]

for i in range(2):
    row = []
    for c in range(5):
        s = Decimal(0)
        for m in range(3):
            p = max(Decimal(repr(P[m][i][c])), Decimal("1e-12"))
            s += W[m] * (p.ln() * N[m]).exp()
        row.append(s)
    print(", ".join(f"{float(x)!r}" for x in row))
