//! Ground-truth engines: literal second-quantized operator application,
//! full configuration interaction over an explicit determinant basis,
//! and the Hartree-Fock determinant energy.
//!
//! [`apply_second_quantized`] walks every one- and two-body operator
//! string with explicit anticommutation bookkeeping and no shortcuts,
//! so it serves as the independent reference for the optimized
//! Slater-Condon path in `eloc`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::ansatz::WavefunctionValue;
use crate::eloc::{antisymmetrized, batched_kernel, diagonal_energy, KernelStats, KetBlock};
use crate::integrals::IntegralTable;
use crate::onv::{connected, Onv};
use crate::{NqsError, Result};

/// All configurations with exactly (n_alpha, n_beta) electrons over k
/// spatial orbitals, in ascending packed-integer order, plus the
/// inverse index map.
pub struct FciBasis {
    onvs: Vec<Onv>,
    index: HashMap<Onv, usize>,
    n_alpha: usize,
    n_beta: usize,
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

fn combinations(k: usize, choose: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..=(k - left) {
            cur.push(i);
            rec(i + 1, k, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, choose, &mut Vec::with_capacity(choose), &mut out);
    out
}

impl FciBasis {
    pub fn build(k_spatial: usize, n_alpha: usize, n_beta: usize) -> Result<Self> {
        if n_alpha > k_spatial || n_beta > k_spatial {
            return Err(NqsError::Range(format!(
                "({n_alpha}, {n_beta}) electrons do not fit {k_spatial} orbitals"
            )));
        }
        let size = binomial(k_spatial as u64, n_alpha as u64)
            * binomial(k_spatial as u64, n_beta as u64);
        if size > 2_000_000 {
            return Err(NqsError::Range(format!(
                "determinant basis of size {size} exceeds the enumeration cap"
            )));
        }
        let alpha_sets = combinations(k_spatial, n_alpha);
        let beta_sets = combinations(k_spatial, n_beta);
        let mut onvs = Vec::with_capacity(size as usize);
        for a in &alpha_sets {
            for b in &beta_sets {
                let occupied: Vec<usize> = a
                    .iter()
                    .map(|&i| 2 * i)
                    .chain(b.iter().map(|&i| 2 * i + 1))
                    .collect();
                onvs.push(Onv::from_occupied(2 * k_spatial, &occupied));
            }
        }
        onvs.sort();
        debug_assert_eq!(onvs.len() as u128, size);
        let index = onvs.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        Ok(FciBasis { onvs, index, n_alpha, n_beta })
    }

    pub fn len(&self) -> usize {
        self.onvs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onvs.is_empty()
    }

    pub fn onv(&self, i: usize) -> &Onv {
        &self.onvs[i]
    }

    pub fn onvs(&self) -> &[Onv] {
        &self.onvs
    }

    pub fn index_of(&self, n: &Onv) -> Option<usize> {
        self.index.get(n).copied()
    }

    pub fn electron_counts(&self) -> (usize, usize) {
        (self.n_alpha, self.n_beta)
    }
}

/// Sign picked up by an operator acting at `idx`: parity of the
/// occupied orbitals strictly below it.
fn below_sign(n: &Onv, idx: usize) -> f64 {
    let crossings = n.occupied().take_while(|&i| i < idx).count();
    if crossings % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Apply an annihilate-then-create operator string, tracking the
/// fermionic sign at each elementary step. Returns None when the
/// string destroys the state.
fn hop(n: &Onv, annihilate: &[usize], create: &[usize]) -> Option<(Onv, f64)> {
    let mut m = *n;
    let mut sign = 1.0;
    for &q in annihilate {
        if !m.get(q) {
            return None;
        }
        sign *= below_sign(&m, q);
        m.set(q, false);
    }
    for &p in create {
        if m.get(p) {
            return None;
        }
        sign *= below_sign(&m, p);
        m.set(p, true);
    }
    Some((m, sign))
}

/// H|n> by literal application of every operator string: the one-body
/// sum over h_pq a+_p a_q, a quarter of the antisymmetrized two-body
/// sum over a+_p a+_q a_s a_r, and the scalar core energy on the
/// diagonal. Returns the map m -> <m|H|n>.
pub fn apply_second_quantized(table: &IntegralTable, n: &Onv) -> HashMap<Onv, f64> {
    let m2k = table.n_spin_orbitals();
    let mut out: HashMap<Onv, f64> = HashMap::new();
    if table.e_core() != 0.0 {
        out.insert(*n, table.e_core());
    }
    for p in 0..m2k {
        for q in 0..m2k {
            let h = table.spin_orbital_h1(p, q);
            if h == 0.0 {
                continue;
            }
            if let Some((m, sign)) = hop(n, &[q], &[p]) {
                *out.entry(m).or_insert(0.0) += sign * h;
            }
        }
    }
    for p in 0..m2k {
        for q in 0..m2k {
            for r in 0..m2k {
                for s in 0..m2k {
                    let v = antisymmetrized(table, p, q, r, s);
                    if v == 0.0 {
                        continue;
                    }
                    if let Some((m, sign)) = hop(n, &[r, s], &[q, p]) {
                        *out.entry(m).or_insert(0.0) += 0.25 * sign * v;
                    }
                }
            }
        }
    }
    out
}

/// Diagonal Slater-Condon energy of the aufbau determinant.
pub fn hf_energy(table: &IntegralTable, n_alpha: usize, n_beta: usize) -> f64 {
    diagonal_energy(&Onv::aufbau(table.n_spin_orbitals(), n_alpha, n_beta), table)
}

/// Compressed sparse rows of the Hamiltonian over an [`FciBasis`].
struct SparseHamiltonian {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<f64>,
}

impl SparseHamiltonian {
    fn assemble(table: &IntegralTable, basis: &FciBasis) -> Self {
        let rows: Vec<(Vec<u32>, Vec<f64>)> = basis
            .onvs
            .par_iter()
            .map(|n| {
                let conn = connected(n);
                let block = KetBlock::from_onvs(&conn);
                let mut stats = KernelStats::default();
                let values = batched_kernel(n, &block, table, &mut stats);
                let mut indices = Vec::new();
                let mut data = Vec::new();
                for (m, h) in conn.iter().zip(values) {
                    if h != 0.0 {
                        if let Some(j) = basis.index_of(m) {
                            indices.push(j as u32);
                            data.push(h);
                        }
                    }
                }
                (indices, data)
            })
            .collect();
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for (i, d) in rows {
            indices.extend(i);
            data.extend(d);
            indptr.push(indices.len());
        }
        SparseHamiltonian { indptr, indices, data }
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let row = self.indptr[i]..self.indptr[i + 1];
            let mut acc = 0.0;
            for (offset, &col) in self.indices[row.clone()].iter().enumerate() {
                acc += self.data[row.start + offset] * x[col as usize];
            }
            *yi = acc;
        });
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FciOptions {
    /// Largest dimension solved by dense diagonalization.
    pub dense_cap: usize,
    pub max_iterations: usize,
    /// Residual norm target for the iterative path.
    pub tolerance: f64,
}

impl Default for FciOptions {
    fn default() -> Self {
        FciOptions { dense_cap: 2048, max_iterations: 800, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct FciResult {
    pub e0: f64,
    /// Ground-state coefficients over the basis, normalized, largest
    /// magnitude component positive.
    pub vector: Vec<f64>,
    pub dim: usize,
    /// Iterative-solver steps; zero on the dense path.
    pub iterations: usize,
}

/// Lowest eigenpair of the Hamiltonian over the (n_alpha, n_beta)
/// sector with default solver settings.
pub fn fci_ground_state(
    table: &IntegralTable,
    n_alpha: usize,
    n_beta: usize,
) -> Result<(FciResult, FciBasis)> {
    fci_ground_state_with(table, n_alpha, n_beta, &FciOptions::default())
}

pub fn fci_ground_state_with(
    table: &IntegralTable,
    n_alpha: usize,
    n_beta: usize,
    options: &FciOptions,
) -> Result<(FciResult, FciBasis)> {
    let basis = FciBasis::build(table.n_spatial(), n_alpha, n_beta)?;
    let dim = basis.len();
    if dim == 0 {
        return Err(NqsError::Range("empty determinant basis".into()));
    }
    let hamiltonian = SparseHamiltonian::assemble(table, &basis);

    let mut result = if dim <= options.dense_cap {
        dense_lowest(&hamiltonian, dim)
    } else {
        let hf = Onv::aufbau(table.n_spin_orbitals(), n_alpha, n_beta);
        let start = basis.index_of(&hf).unwrap_or(0);
        lanczos_lowest(&hamiltonian, dim, start, options)?
    };

    let norm: f64 = result.vector.iter().map(|c| c * c).sum::<f64>().sqrt();
    let mut pivot = 0;
    for (i, c) in result.vector.iter().enumerate() {
        if c.abs() > result.vector[pivot].abs() {
            pivot = i;
        }
    }
    let flip = if result.vector[pivot] < 0.0 { -1.0 } else { 1.0 };
    for c in result.vector.iter_mut() {
        *c *= flip / norm;
    }
    Ok((result, basis))
}

fn dense_lowest(h: &SparseHamiltonian, dim: usize) -> FciResult {
    let mut dense = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for offset in h.indptr[i]..h.indptr[i + 1] {
            dense[(i, h.indices[offset] as usize)] = h.data[offset];
        }
    }
    let eigen = dense.symmetric_eigen();
    let mut lowest = 0;
    for i in 1..dim {
        if eigen.eigenvalues[i] < eigen.eigenvalues[lowest] {
            lowest = i;
        }
    }
    FciResult {
        e0: eigen.eigenvalues[lowest],
        vector: eigen.eigenvectors.column(lowest).iter().copied().collect(),
        dim,
        iterations: 0,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lanczos with full reorthogonalization, started from the basis
/// vector of the aufbau determinant.
fn lanczos_lowest(
    h: &SparseHamiltonian,
    dim: usize,
    start: usize,
    options: &FciOptions,
) -> Result<FciResult> {
    let max_iter = options.max_iterations.min(dim);
    let mut v = vec![0.0; dim];
    v[start] = 1.0;
    let mut vectors: Vec<Vec<f64>> = vec![v];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];

    for j in 0..max_iter {
        h.matvec(&vectors[j], &mut w);
        let alpha = dot(&w, &vectors[j]);
        alphas.push(alpha);
        for (wi, vi) in w.iter_mut().zip(&vectors[j]) {
            *wi -= alpha * vi;
        }
        if j > 0 {
            let beta_prev = betas[j - 1];
            for (wi, vi) in w.iter_mut().zip(&vectors[j - 1]) {
                *wi -= beta_prev * vi;
            }
        }
        // full reorthogonalization, two passes
        for _ in 0..2 {
            for basis_vec in &vectors {
                let overlap = dot(&w, basis_vec);
                for (wi, vi) in w.iter_mut().zip(basis_vec) {
                    *wi -= overlap * vi;
                }
            }
        }
        let beta = dot(&w, &w).sqrt();

        let steps = j + 1;
        let check = steps == max_iter || beta < 1e-13 || steps % 4 == 0;
        if check && steps > 0 {
            let (theta, s) = tridiagonal_lowest(&alphas, &betas);
            let estimate = beta * s[steps - 1].abs();
            if estimate <= options.tolerance * theta.abs().max(1.0) || beta < 1e-13 {
                let mut y = vec![0.0; dim];
                for (coeff, basis_vec) in s.iter().zip(&vectors) {
                    for (yi, vi) in y.iter_mut().zip(basis_vec) {
                        *yi += coeff * vi;
                    }
                }
                let mut hy = vec![0.0; dim];
                h.matvec(&y, &mut hy);
                let mut residual = 0.0;
                for (hyi, yi) in hy.iter().zip(&y) {
                    residual += (hyi - theta * yi).powi(2);
                }
                if residual.sqrt() <= options.tolerance * theta.abs().max(1.0) * 10.0 {
                    return Ok(FciResult { e0: theta, vector: y, dim, iterations: steps });
                }
                if beta < 1e-13 {
                    return Err(NqsError::Numeric(
                        "eigensolver stalled on an invariant subspace short of tolerance"
                            .into(),
                    ));
                }
            }
        }

        if steps < max_iter {
            betas.push(beta);
            let next: Vec<f64> = w.iter().map(|wi| wi / beta).collect();
            vectors.push(next);
        }
    }
    Err(NqsError::Numeric(format!(
        "eigensolver did not reach tolerance {} in {max_iter} iterations",
        options.tolerance
    )))
}

/// Lowest eigenpair of the symmetric tridiagonal matrix with diagonal
/// `alphas` and off-diagonal `betas`.
fn tridiagonal_lowest(alphas: &[f64], betas: &[f64]) -> (f64, Vec<f64>) {
    let m = alphas.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eigen = t.symmetric_eigen();
    let mut lowest = 0;
    for i in 1..m {
        if eigen.eigenvalues[i] < eigen.eigenvalues[lowest] {
            lowest = i;
        }
    }
    (eigen.eigenvalues[lowest], eigen.eigenvectors.column(lowest).iter().copied().collect())
}

/// The FCI ground state as a wavefunction: exact amplitudes over the
/// basis, zero outside it. Negative coefficients carry phase pi.
pub struct FciWavefunction {
    basis: FciBasis,
    vector: Vec<f64>,
}

impl FciWavefunction {
    pub fn new(basis: FciBasis, vector: Vec<f64>) -> Result<Self> {
        if basis.len() != vector.len() {
            return Err(NqsError::Dimension(format!(
                "{} coefficients over a basis of {}",
                vector.len(),
                basis.len()
            )));
        }
        Ok(FciWavefunction { basis, vector })
    }

    pub fn basis(&self) -> &FciBasis {
        &self.basis
    }

    pub fn coefficient(&self, n: &Onv) -> f64 {
        self.basis.index_of(n).map_or(0.0, |i| self.vector[i])
    }

    /// (token string, |coefficient|^2) for every basis configuration;
    /// sums to 1 for a normalized vector. Feeds the exact sampling
    /// reference model.
    pub fn leaf_distribution(&self) -> Vec<(Vec<u8>, f64)> {
        self.basis
            .onvs
            .iter()
            .zip(&self.vector)
            .map(|(n, c)| (n.to_tokens(), c * c))
            .collect()
    }
}

impl crate::eloc::Wavefunction for FciWavefunction {
    fn evaluate(&self, n: &Onv) -> WavefunctionValue {
        let c = self.coefficient(n);
        if c == 0.0 {
            WavefunctionValue::ZERO_AMPLITUDE
        } else {
            WavefunctionValue {
                log_amplitude: c.abs().ln(),
                phase: if c < 0.0 { std::f64::consts::PI } else { 0.0 },
            }
        }
    }
}
