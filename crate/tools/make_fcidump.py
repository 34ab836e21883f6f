#!/usr/bin/env python3
"""Generate the repository's FCIDUMP fixtures from scratch.

Computes STO-3G integrals (McMurchie-Davidson scheme, s and p shells),
runs a restricted Hartree-Fock SCF, transforms the integrals to the
canonical molecular-orbital basis, and writes FCIDUMP files with
8-fold permutational symmetry.

Usage:
    python3 tools/make_fcidump.py [outdir]

Only numpy and scipy are required. The script prints the SCF energy for
each system so the fixtures can be checked against published values, and
runs a small in-process FCI on the tiny systems as a sanity check.
"""

import itertools
import math
import sys

import numpy as np
from scipy.special import hyp1f1

# ---------------------------------------------------------------------------
# STO-3G basis data (Basis Set Exchange, standard contractions)
# ---------------------------------------------------------------------------

STO3G = {
    "H": [
        ("S", [3.42525091, 0.62391373, 0.16885540],
              [0.15432897, 0.53532814, 0.44463454]),
    ],
    "N": [
        ("S", [99.1061690, 18.0523120, 4.8856602],
              [0.15432897, 0.53532814, 0.44463454]),
        ("SP", [3.7804559, 0.8784966, 0.2857144],
               [-0.09996723, 0.39951283, 0.70011547],
               [0.15591627, 0.60768372, 0.39195739]),
    ],
}

CHARGE = {"H": 1, "N": 7}

ANGSTROM_TO_BOHR = 1.8897259886


class Cgto:
    """Contracted Cartesian Gaussian: center, angular powers, primitives."""

    def __init__(self, center, lmn, exps, coefs):
        self.center = np.asarray(center, dtype=float)
        self.lmn = lmn
        self.exps = np.asarray(exps, dtype=float)
        self.coefs = np.asarray(coefs, dtype=float) * self._prim_norms()
        self._normalize_contraction()

    def _prim_norms(self):
        l, m, n = self.lmn
        tot = l + m + n
        facts = dfact(2 * l - 1) * dfact(2 * m - 1) * dfact(2 * n - 1)
        return np.array(
            [
                (2 * a / math.pi) ** 0.75 * (4 * a) ** (tot / 2.0) / math.sqrt(facts)
                for a in self.exps
            ]
        )

    def _normalize_contraction(self):
        s = 0.0
        for ca, a in zip(self.coefs, self.exps):
            for cb, b in zip(self.coefs, self.exps):
                s += ca * cb * prim_overlap(a, self.center, self.lmn, b, self.center, self.lmn)
        self.coefs /= math.sqrt(s)


def dfact(n):
    if n <= 0:
        return 1.0
    r = 1.0
    while n > 1:
        r *= n
        n -= 2
    return r


def boys(n, x):
    return hyp1f1(n + 0.5, n + 1.5, -x) / (2.0 * n + 1.0)


def hermite_e(i, j, t, qx, a, b):
    """Hermite expansion coefficient E_t^{ij} for a Gaussian product."""
    p = a + b
    q = a * b / p
    if t < 0 or t > i + j:
        return 0.0
    if i == j == t == 0:
        return math.exp(-q * qx * qx)
    if j == 0:
        return (
            hermite_e(i - 1, j, t - 1, qx, a, b) / (2 * p)
            - q * qx / a * hermite_e(i - 1, j, t, qx, a, b)
            + (t + 1) * hermite_e(i - 1, j, t + 1, qx, a, b)
        )
    return (
        hermite_e(i, j - 1, t - 1, qx, a, b) / (2 * p)
        + q * qx / b * hermite_e(i, j - 1, t, qx, a, b)
        + (t + 1) * hermite_e(i, j - 1, t + 1, qx, a, b)
    )


def prim_overlap(a, ca, la, b, cb, lb):
    p = a + b
    s = (math.pi / p) ** 1.5
    for d in range(3):
        s *= hermite_e(la[d], lb[d], 0, ca[d] - cb[d], a, b)
    return s


def prim_kinetic(a, ca, la, b, cb, lb):
    l2, m2, n2 = lb

    def ov(dl, dm, dn):
        lmn = (l2 + dl, m2 + dm, n2 + dn)
        if min(lmn) < 0:
            return 0.0
        return prim_overlap(a, ca, la, b, cb, lmn)

    term0 = b * (2 * (l2 + m2 + n2) + 3) * ov(0, 0, 0)
    term1 = -2 * b * b * (ov(2, 0, 0) + ov(0, 2, 0) + ov(0, 0, 2))
    term2 = -0.5 * (
        l2 * (l2 - 1) * ov(-2, 0, 0)
        + m2 * (m2 - 1) * ov(0, -2, 0)
        + n2 * (n2 - 1) * ov(0, 0, -2)
    )
    return term0 + term1 + term2


def hermite_r(t, u, v, n, p, pc, rpc2, cache):
    key = (t, u, v, n)
    if key in cache:
        return cache[key]
    if t == u == v == 0:
        val = (-2.0 * p) ** n * boys(n, p * rpc2)
    elif t > 0:
        val = pc[0] * hermite_r(t - 1, u, v, n + 1, p, pc, rpc2, cache)
        if t > 1:
            val += (t - 1) * hermite_r(t - 2, u, v, n + 1, p, pc, rpc2, cache)
    elif u > 0:
        val = pc[1] * hermite_r(t, u - 1, v, n + 1, p, pc, rpc2, cache)
        if u > 1:
            val += (u - 1) * hermite_r(t, u - 2, v, n + 1, p, pc, rpc2, cache)
    else:
        val = pc[2] * hermite_r(t, u, v - 1, n + 1, p, pc, rpc2, cache)
        if v > 1:
            val += (v - 1) * hermite_r(t, u, v - 2, n + 1, p, pc, rpc2, cache)
    cache[key] = val
    return val


def prim_nuclear(a, ca, la, b, cb, lb, cn):
    p = a + b
    pp = (a * ca + b * cb) / p
    pc = pp - cn
    rpc2 = float(np.dot(pc, pc))
    cache = {}
    val = 0.0
    for t in range(la[0] + lb[0] + 1):
        et = hermite_e(la[0], lb[0], t, ca[0] - cb[0], a, b)
        for u in range(la[1] + lb[1] + 1):
            eu = hermite_e(la[1], lb[1], u, ca[1] - cb[1], a, b)
            for v in range(la[2] + lb[2] + 1):
                ev = hermite_e(la[2], lb[2], v, ca[2] - cb[2], a, b)
                val += et * eu * ev * hermite_r(t, u, v, 0, p, pc, rpc2, cache)
    return 2.0 * math.pi / p * val


def prim_eri(a, ca, la, b, cb, lb, c, cc, lc, d, cd, ld):
    p = a + b
    q = c + d
    alpha = p * q / (p + q)
    pp = (a * ca + b * cb) / p
    qq = (c * cc + d * cd) / q
    pq = pp - qq
    rpq2 = float(np.dot(pq, pq))
    cache = {}

    e1 = {}
    for t in range(la[0] + lb[0] + 1):
        for u in range(la[1] + lb[1] + 1):
            for v in range(la[2] + lb[2] + 1):
                e1[(t, u, v)] = (
                    hermite_e(la[0], lb[0], t, ca[0] - cb[0], a, b)
                    * hermite_e(la[1], lb[1], u, ca[1] - cb[1], a, b)
                    * hermite_e(la[2], lb[2], v, ca[2] - cb[2], a, b)
                )
    e2 = {}
    for t in range(lc[0] + ld[0] + 1):
        for u in range(lc[1] + ld[1] + 1):
            for v in range(lc[2] + ld[2] + 1):
                e2[(t, u, v)] = (
                    hermite_e(lc[0], ld[0], t, cc[0] - cd[0], c, d)
                    * hermite_e(lc[1], ld[1], u, cc[1] - cd[1], c, d)
                    * hermite_e(lc[2], ld[2], v, cc[2] - cd[2], c, d)
                )

    val = 0.0
    for (t, u, v), c1 in e1.items():
        if c1 == 0.0:
            continue
        for (tt, uu, vv), c2 in e2.items():
            if c2 == 0.0:
                continue
            sign = -1.0 if (tt + uu + vv) % 2 else 1.0
            val += c1 * c2 * sign * hermite_r(
                t + tt, u + uu, v + vv, 0, alpha, pq, rpq2, cache
            )
    return val * 2.0 * math.pi ** 2.5 / (p * q * math.sqrt(p + q))


def contracted(f, ga, gb, *rest):
    val = 0.0
    for ca, a in zip(ga.coefs, ga.exps):
        for cb, b in zip(gb.coefs, gb.exps):
            val += ca * cb * f(a, ga.center, ga.lmn, b, gb.center, gb.lmn, *rest)
    return val


def build_basis(atoms):
    basis = []
    for sym, xyz in atoms:
        for shell in STO3G[sym]:
            if shell[0] == "S":
                _, exps, coefs = shell
                basis.append(Cgto(xyz, (0, 0, 0), exps, coefs))
            elif shell[0] == "SP":
                _, exps, cs, cp = shell
                basis.append(Cgto(xyz, (0, 0, 0), exps, cs))
                for lmn in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
                    basis.append(Cgto(xyz, lmn, exps, cp))
    return basis


def integrals(atoms):
    basis = build_basis(atoms)
    n = len(basis)
    s = np.zeros((n, n))
    t = np.zeros((n, n))
    v = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s[i, j] = s[j, i] = contracted(
                lambda a, ca, la, b, cb, lb: prim_overlap(a, ca, la, b, cb, lb),
                basis[i], basis[j],
            )
            t[i, j] = t[j, i] = contracted(
                lambda a, ca, la, b, cb, lb: prim_kinetic(a, ca, la, b, cb, lb),
                basis[i], basis[j],
            )
            vij = 0.0
            for sym, xyz in atoms:
                vij -= CHARGE[sym] * contracted(
                    prim_nuclear, basis[i], basis[j], np.asarray(xyz, dtype=float)
                )
            v[i, j] = v[j, i] = vij

    eri = np.zeros((n, n, n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1)]
    for ij, (i, j) in enumerate(pairs):
        for kl in range(ij + 1):
            k, l = pairs[kl]
            val = 0.0
            for ca, a in zip(basis[i].coefs, basis[i].exps):
                for cb, b in zip(basis[j].coefs, basis[j].exps):
                    for cc, c in zip(basis[k].coefs, basis[k].exps):
                        for cd, d in zip(basis[l].coefs, basis[l].exps):
                            val += ca * cb * cc * cd * prim_eri(
                                a, basis[i].center, basis[i].lmn,
                                b, basis[j].center, basis[j].lmn,
                                c, basis[k].center, basis[k].lmn,
                                d, basis[l].center, basis[l].lmn,
                            )
            for (x, y), (z, w) in itertools.product([(i, j), (j, i)], [(k, l), (l, k)]):
                eri[x, y, z, w] = eri[z, w, x, y] = val

    e_nuc = 0.0
    for (s1, x1), (s2, x2) in itertools.combinations(atoms, 2):
        r = np.linalg.norm(np.asarray(x1) - np.asarray(x2))
        e_nuc += CHARGE[s1] * CHARGE[s2] / r
    return s, t + v, eri, e_nuc


def rhf(s, hcore, eri, e_nuc, n_elec, max_iter=200, tol=1e-11):
    n = s.shape[0]
    nocc = n_elec // 2
    sval, svec = np.linalg.eigh(s)
    x = svec @ np.diag(sval ** -0.5) @ svec.T

    # generalized Wolfsberg-Helmholz guess; a bare-hcore guess drops N2
    # into a symmetry-broken saddle point about 0.7 Ha above the ground state
    dm = np.zeros((n, n))
    fock = 0.875 * s * (np.diag(hcore)[:, None] + np.diag(hcore)[None, :])
    np.fill_diagonal(fock, np.diag(hcore))
    energy = 0.0
    diis_f, diis_e = [], []
    for _ in range(max_iter):
        fp = x.T @ fock @ x
        _, cp = np.linalg.eigh(fp)
        c = x @ cp
        cocc = c[:, :nocc]
        dm_new = 2.0 * cocc @ cocc.T

        j = np.einsum("pqrs,rs->pq", eri, dm_new)
        k = np.einsum("prqs,rs->pq", eri, dm_new)
        fock_new = hcore + j - 0.5 * k
        e_new = 0.5 * np.sum(dm_new * (hcore + fock_new)) + e_nuc

        err = fock_new @ dm_new @ s - s @ dm_new @ fock_new
        diis_f.append(fock_new)
        diis_e.append(err)
        if len(diis_f) > 8:
            diis_f.pop(0)
            diis_e.pop(0)
        if len(diis_f) > 1:
            m = len(diis_f)
            bmat = -np.ones((m + 1, m + 1))
            bmat[m, m] = 0.0
            for a in range(m):
                for b in range(m):
                    bmat[a, b] = np.sum(diis_e[a] * diis_e[b])
            rhs = np.zeros(m + 1)
            rhs[m] = -1.0
            try:
                w = np.linalg.solve(bmat, rhs)[:m]
                fock = sum(wi * fi for wi, fi in zip(w, diis_f))
            except np.linalg.LinAlgError:
                fock = fock_new
        else:
            fock = fock_new

        if abs(e_new - energy) < tol and np.max(np.abs(dm_new - dm)) < 1e-9:
            energy = e_new
            dm = dm_new
            break
        energy = e_new
        dm = dm_new

    fp = x.T @ fock @ x
    eps, cp = np.linalg.eigh(fp)
    c = x @ cp
    return energy, c, eps


def mo_integrals(hcore, eri, c):
    h_mo = c.T @ hcore @ c
    eri_mo = np.einsum("pqrs,pi,qj,rk,sl->ijkl", eri, c, c, c, c, optimize=True)
    return h_mo, eri_mo


def write_fcidump(path, h_mo, eri_mo, e_nuc, n_elec, ms2=0, thresh=1e-12):
    n = h_mo.shape[0]
    with open(path, "w") as f:
        f.write(f"&FCI NORB={n:3d},NELEC={n_elec:3d},MS2={ms2:2d},\n")
        f.write("  ORBSYM=" + "1," * n + "\n")
        f.write("  ISYM=1,\n")
        f.write(" &END\n")
        pairs = [(i, j) for i in range(n) for j in range(i + 1)]
        for ij, (i, j) in enumerate(pairs):
            for kl in range(ij + 1):
                k, l = pairs[kl]
                val = eri_mo[i, j, k, l]
                if abs(val) > thresh:
                    f.write(f" {val: .16E} {i+1:3d} {j+1:3d} {k+1:3d} {l+1:3d}\n")
        for i in range(n):
            for j in range(i + 1):
                if abs(h_mo[i, j]) > thresh:
                    f.write(f" {h_mo[i, j]: .16E} {i+1:3d} {j+1:3d}   0   0\n")
        f.write(f" {e_nuc: .16E}   0   0   0   0\n")


# ---------------------------------------------------------------------------
# Small determinant FCI (independent sanity check for tiny systems)
# ---------------------------------------------------------------------------

def spin_orbital_h(h_mo, eri_mo, k):
    """Interleaved spin orbitals: 2i = (i, alpha), 2i+1 = (i, beta)."""
    n = 2 * k
    h1 = np.zeros((n, n))
    for p in range(n):
        for q in range(n):
            if p % 2 == q % 2:
                h1[p, q] = h_mo[p // 2, q // 2]
    return h1


def chem_eri_so(eri_mo, p, q, r, s):
    if p % 2 != q % 2 or r % 2 != s % 2:
        return 0.0
    return eri_mo[p // 2, q // 2, r // 2, s // 2]


def fci_tiny(h_mo, eri_mo, e_nuc, n_alpha, n_beta):
    k = h_mo.shape[0]
    nso = 2 * k
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
    h1 = spin_orbital_h(h_mo, eri_mo, k)

    def occ_list(d):
        return [i for i in range(nso) if d >> i & 1]

    def parity_between(d, p, q):
        lo, hi = min(p, q), max(p, q)
        cnt = bin(d >> (lo + 1) & ((1 << (hi - lo - 1)) - 1)).count("1") if hi > lo + 1 else 0
        return -1.0 if cnt % 2 else 1.0

    def anti(p, q, r, s):
        return chem_eri_so(eri_mo, p, r, q, s) - chem_eri_so(eri_mo, p, s, q, r)

    hmat = np.zeros((dim, dim))
    for a, da in enumerate(dets):
        occ_a_ = occ_list(da)
        for b in range(a, dim):
            db = dets[b]
            diff = da ^ db
            nd = bin(diff).count("1")
            if nd == 0:
                val = e_nuc
                for p in occ_a_:
                    val += h1[p, p]
                for p in occ_a_:
                    for q in occ_a_:
                        val += 0.5 * anti(p, q, p, q)
            elif nd == 2:
                p = (diff & da).bit_length() - 1
                q = (diff & db).bit_length() - 1
                sign = parity_between(da, p, q)
                val = h1[p, q]
                for r in occ_a_:
                    if r != p:
                        val += anti(p, r, q, r)
                val *= sign
            elif nd == 4:
                ann = [i for i in range(nso) if (diff & da) >> i & 1]
                cre = [i for i in range(nso) if (diff & db) >> i & 1]
                p, q = ann
                r, s = cre
                sign = parity_between(da, p, r)
                d1 = da ^ (1 << p) ^ (1 << r)
                sign *= parity_between(d1, q, s)
                val = sign * anti(p, q, r, s)
            else:
                val = 0.0
            hmat[a, b] = hmat[b, a] = val
    w = np.linalg.eigvalsh(hmat)
    return w[0], dim


def run(atoms, n_elec, name, outpath, do_fci):
    s, hcore, eri, e_nuc = integrals(atoms)
    e_scf, c, _ = rhf(s, hcore, eri, e_nuc, n_elec)
    h_mo, eri_mo = mo_integrals(hcore, eri, c)
    print(f"{name}: E(RHF) = {e_scf:.7f} Ha  (nuclear repulsion {e_nuc:.7f})")
    if do_fci:
        from fci_sparse import fci_lowest

        w, dim = fci_lowest(h_mo, eri_mo, e_nuc, n_elec // 2, n_elec // 2)
        print(f"{name}: E(FCI) = {w[0]:.7f} Ha  (determinant space {dim})")
    write_fcidump(outpath, h_mo, eri_mo, e_nuc, n_elec)
    print(f"{name}: wrote {outpath}")
    return e_scf


def main():
    outdir = sys.argv[1] if len(sys.argv) > 1 else "fixtures"
    do_fci = "--fci" in sys.argv

    r_h2 = 0.7414 * ANGSTROM_TO_BOHR
    run([("H", (0.0, 0.0, 0.0)), ("H", (0.0, 0.0, r_h2))], 2, "H2", f"{outdir}/h2_sto3g.fcidump", do_fci)

    r_h4 = 2.0
    atoms_h4 = [("H", (0.0, 0.0, i * r_h4)) for i in range(4)]
    run(atoms_h4, 4, "H4", f"{outdir}/h4_sto3g.fcidump", do_fci)

    r_n2 = 1.112 * ANGSTROM_TO_BOHR
    run([("N", (0.0, 0.0, 0.0)), ("N", (0.0, 0.0, r_n2))], 14, "N2", f"{outdir}/n2_sto3g.fcidump", do_fci)


if __name__ == "__main__":
    main()
