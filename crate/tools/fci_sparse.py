#!/usr/bin/env python3
"""Sparse determinant FCI for validating fixture energies.

Builds the Hamiltonian in the full determinant basis using Slater-Condon
rules over interleaved spin orbitals (even bits alpha, odd bits beta) and
diagonalizes with scipy's Lanczos. Practical up to a few times 10^4
determinants, which covers every fixture in this repository.
"""

import itertools

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import eigsh


def popcount_between(bits, p, q):
    lo, hi = (p, q) if p < q else (q, p)
    if hi <= lo + 1:
        return 0
    mask = ((1 << (hi - lo - 1)) - 1) << (lo + 1)
    return bin(bits & mask).count("1")


def parity_sign(bits, p, q):
    return -1.0 if popcount_between(bits, p, q) % 2 else 1.0


def fci_lowest(h_mo, eri_mo, e_core, n_alpha, n_beta, n_roots=1):
    """Lowest eigenvalue(s) of the second-quantized Hamiltonian."""
    k = h_mo.shape[0]

    dets = []
    for occ_a in itertools.combinations(range(k), n_alpha):
        for occ_b in itertools.combinations(range(k), n_beta):
            bits = 0
            for o in occ_a:
                bits |= 1 << (2 * o)
            for o in occ_b:
                bits |= 1 << (2 * o + 1)
            dets.append(bits)
    dets.sort()
    index = {d: i for i, d in enumerate(dets)}
    dim = len(dets)

    rows, cols, vals = [], [], []

    def emit(a, b, v):
        rows.append(a)
        cols.append(b)
        vals.append(v)

    for a, da in enumerate(dets):
        occ = [i for i in range(2 * k) if da >> i & 1]
        occ_sp = [(i >> 1, i & 1) for i in occ]

        diag = e_core
        for p, _ in occ_sp:
            diag += h_mo[p, p]
        for p, sp in occ_sp:
            for q, sq in occ_sp:
                diag += 0.5 * eri_mo[p, p, q, q]
                if sp == sq:
                    diag -= 0.5 * eri_mo[p, q, p, q]
        emit(a, a, diag)

        # singles within each spin channel
        for i in occ:
            p, sp = i >> 1, i & 1
            for q in range(k):
                j = 2 * q + sp
                if da >> j & 1:
                    continue
                db = da ^ (1 << i) ^ (1 << j)
                b = index[db]
                if b <= a:
                    continue
                val = h_mo[p, q]
                for r, sr in occ_sp:
                    if 2 * r + sr == i:
                        continue
                    val += eri_mo[p, q, r, r]
                    if sr == sp:
                        val -= eri_mo[p, r, q, r]
                val *= parity_sign(da, i, j)
                emit(a, b, val)
                emit(b, a, val)

        # doubles: same spin and opposite spin
        for (i1, i2) in itertools.combinations(occ, 2):
            p1, s1 = i1 >> 1, i1 & 1
            p2, s2 = i2 >> 1, i2 & 1
            for q1 in range(k):
                j1 = 2 * q1 + s1
                if da >> j1 & 1:
                    continue
                for q2 in range(k):
                    j2 = 2 * q2 + s2
                    if j2 == j1 or da >> j2 & 1:
                        continue
                    if s1 == s2 and j2 < j1:
                        continue
                    db = da ^ (1 << i1) ^ (1 << i2) ^ (1 << j1) ^ (1 << j2)
                    b = index[db]
                    if b <= a:
                        continue
                    val = 0.0
                    if s1 == s2:
                        val = eri_mo[p1, q1, p2, q2] - eri_mo[p1, q2, p2, q1]
                    else:
                        val = eri_mo[p1, q1, p2, q2]
                    sign = parity_sign(da, i1, j1)
                    mid = da ^ (1 << i1) ^ (1 << j1)
                    sign *= parity_sign(mid, i2, j2)
                    val *= sign
                    if val != 0.0:
                        emit(a, b, val)
                        emit(b, a, val)

    h = coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
    if dim <= 400:
        w = np.linalg.eigvalsh(h.toarray())
        return w[:n_roots], dim
    w = eigsh(h, k=n_roots, which="SA", tol=1e-11)[0]
    return np.sort(w), dim
