"""Exact linear programming over the rationals.

A dense two-phase primal simplex with Bland's rule on ``Fraction``
arithmetic.  It exists to finish the continuous part of a mixed-integer
solve exactly once the integer variables are fixed; those residual
systems are tiny, so exactness matters far more than speed here.
"""

from __future__ import annotations

from fractions import Fraction

LE = "<="
EQ = "="
GE = ">="


def solve_lp_exact(objective, constraints, bounds):
    """Minimize ``objective . x`` over linear constraints and box bounds.

    Parameters
    ----------
    objective : sequence of numbers
        Cost per variable, minimized.
    constraints : sequence of (coeffs, sense, rhs)
        ``coeffs`` aligned with the variable vector; ``sense`` is one of
        '<=', '=', '>='.
    bounds : sequence of (lower, upper)
        Per-variable box; ``None`` means unbounded on that side.

    Returns
    -------
    (status, values)
        ``status`` is 'optimal', 'infeasible' or 'unbounded'; ``values``
        is a list of Fraction when optimal, else None.
    """
    n = len(objective)
    if len(bounds) != n:
        raise ValueError("bounds length does not match objective length")

    # substitute every variable by nonnegative columns:
    #   finite lower:  x = lo + u        (plus a row u <= up - lo if bounded)
    #   upper only:    x = up - u
    #   free:          x = u_plus - u_minus
    trans = []
    ncols = 0
    ub_rows = []
    for lo, up in bounds:
        if lo is not None:
            lo = Fraction(lo)
            if up is not None and Fraction(up) < lo:
                return "infeasible", None
            trans.append(("shift", lo, ncols))
            if up is not None:
                ub_rows.append((ncols, Fraction(up) - lo))
            ncols += 1
        elif up is not None:
            trans.append(("neg", Fraction(up), ncols))
            ncols += 1
        else:
            trans.append(("split", ncols, ncols + 1))
            ncols += 2

    rows = []
    for coeffs, sense, rhs in constraints:
        a = [Fraction(0)] * ncols
        b = Fraction(rhs)
        for j, cj in enumerate(coeffs):
            cj = Fraction(cj)
            if cj == 0:
                continue
            t = trans[j]
            if t[0] == "shift":
                a[t[2]] += cj
                b -= cj * t[1]
            elif t[0] == "neg":
                a[t[2]] -= cj
                b -= cj * t[1]
            else:
                a[t[1]] += cj
                a[t[2]] -= cj
        if sense == GE:
            a = [-v for v in a]
            b = -b
            sense = LE
        rows.append((a, sense, b))
    for col, ub in ub_rows:
        a = [Fraction(0)] * ncols
        a[col] = Fraction(1)
        rows.append((a, LE, ub))

    cost = [Fraction(0)] * ncols
    for j, cj in enumerate(objective):
        cj = Fraction(cj)
        if cj == 0:
            continue
        t = trans[j]
        if t[0] == "shift":
            cost[t[2]] += cj
        elif t[0] == "neg":
            cost[t[2]] -= cj
        else:
            cost[t[1]] += cj
            cost[t[2]] -= cj

    # slacks for inequalities, then one artificial per row for phase 1
    m = len(rows)
    nslack = sum(1 for _, s, _ in rows if s == LE)
    width = ncols + nslack
    A, bvec = [], []
    si = 0
    for a, sense, b in rows:
        row = a + [Fraction(0)] * nslack
        if sense == LE:
            row[ncols + si] = Fraction(1)
            si += 1
        A.append(row)
        bvec.append(b)
    for i in range(m):
        if bvec[i] < 0:
            A[i] = [-v for v in A[i]]
            bvec[i] = -bvec[i]
    for i in range(m):
        A[i] = A[i] + [Fraction(1) if k == i else Fraction(0) for k in range(m)]
    basis = [width + i for i in range(m)]

    status, obj1 = _simplex(A, bvec, [Fraction(0)] * width + [Fraction(1)] * m, basis)
    if status != "optimal" or obj1 != 0:
        return "infeasible", None

    # drive leftover artificials out of the basis; all-zero rows are redundant
    drop = []
    for i in range(len(basis)):
        if basis[i] >= width:
            piv = next((j for j in range(width) if A[i][j] != 0), None)
            if piv is None:
                drop.append(i)
            else:
                _pivot(A, bvec, basis, i, piv)
    for i in reversed(drop):
        del A[i]
        del bvec[i]
        del basis[i]
    A = [row[:width] for row in A]

    status, _ = _simplex(A, bvec, cost + [Fraction(0)] * nslack, basis)
    if status != "optimal":
        return "unbounded", None

    u = [Fraction(0)] * width
    for i, bi in enumerate(basis):
        u[bi] = bvec[i]
    x = []
    for t in trans:
        if t[0] == "shift":
            x.append(t[1] + u[t[2]])
        elif t[0] == "neg":
            x.append(t[1] - u[t[2]])
        else:
            x.append(u[t[1]] - u[t[2]])
    return "optimal", x


def _pivot(A, b, basis, r, c):
    piv = A[r][c]
    A[r] = [v / piv for v in A[r]]
    b[r] /= piv
    for i in range(len(A)):
        if i != r and A[i][c] != 0:
            f = A[i][c]
            A[i] = [x - f * y for x, y in zip(A[i], A[r])]
            b[i] -= f * b[r]
    basis[r] = c


def _simplex(A, b, cost, basis):
    """Primal simplex on an explicit basis, Bland's rule; mutates A, b, basis."""
    m = len(A)
    width = len(cost)
    z = list(cost) + [Fraction(0)]
    for i, bi in enumerate(basis):
        if z[bi] != 0:
            f = z[bi]
            for j in range(width):
                z[j] -= f * A[i][j]
            z[width] -= f * b[i]
    while True:
        e = next((j for j in range(width) if z[j] < 0), None)
        if e is None:
            vals = -z[width]
            return "optimal", vals
        r = None
        best = None
        for i in range(m):
            if A[i][e] > 0:
                ratio = b[i] / A[i][e]
                if best is None or ratio < best or (ratio == best and basis[i] < basis[r]):
                    best = ratio
                    r = i
        if r is None:
            return "unbounded", None
        _pivot(A, b, basis, r, e)
        if z[e] != 0:
            f = z[e]
            for j in range(width):
                z[j] -= f * A[r][j]
            z[width] -= f * b[r]
