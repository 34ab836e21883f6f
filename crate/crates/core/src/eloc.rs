//! Hamiltonian matrix elements via Slater-Condon rules and the batched,
//! branch-minimized local-energy kernel.
//!
//! Parallelism levels: samples are split across virtual ranks by the
//! cluster module, unique samples within a rank across threads here,
//! and connected kets within a sample across the lanes of
//! [`batched_kernel`]. Summation order is fixed by the enumeration
//! order of `connected`, so energies are bitwise reproducible for any
//! thread count.

use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;
use std::time::Instant;

use crate::ansatz::WavefunctionValue;
use crate::integrals::IntegralTable;
use crate::onv::{classify_unchecked, connected, ExcitationClass, Onv};
use crate::sampler::SampleBatch;
use crate::{NqsError, Result};

/// Local-energy evaluation mode.
///
/// `SampleSpace` restricts the sum over connected configurations to a
/// lookup table built from the sampled set itself; `Accurate` evaluates
/// the wavefunction on every connected configuration, each exactly once
/// per call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElocMode {
    SampleSpace,
    Accurate,
}

/// Per-sample local energies plus instrumentation.
#[derive(Debug, Clone)]
pub struct LocalEnergyReport {
    pub e_loc: Vec<Complex64>,
    pub mode: ElocMode,
    /// Distinct wavefunction evaluations performed (Accurate) or LUT
    /// entries built (SampleSpace).
    pub psi_evaluations: usize,
    /// Hamiltonian matrix elements computed.
    pub matrix_elements: usize,
    /// Wall time spent building the lookup table; zero in Accurate mode.
    pub lut_build_seconds: f64,
}

/// Anything that can map configurations to wavefunction values.
pub trait Wavefunction: Sync {
    fn evaluate(&self, n: &Onv) -> WavefunctionValue;

    fn evaluate_batch(&self, ns: &[Onv]) -> Vec<WavefunctionValue> {
        ns.iter().map(|n| self.evaluate(n)).collect()
    }
}

/// Antisymmetrized two-electron integral <pq||rs> over spin orbitals:
/// (pr|qs) - (ps|qr), each chemists' term nonzero only when its two
/// same-electron spins match.
#[inline]
pub fn antisymmetrized(table: &IntegralTable, p: usize, q: usize, r: usize, s: usize) -> f64 {
    let mut value = 0.0;
    if p % 2 == r % 2 && q % 2 == s % 2 {
        value += table.h2(p / 2, r / 2, q / 2, s / 2);
    }
    if p % 2 == s % 2 && q % 2 == r % 2 {
        value -= table.h2(p / 2, s / 2, q / 2, r / 2);
    }
    value
}

fn diagonal_element(n: &Onv, table: &IntegralTable) -> f64 {
    let occ: Vec<usize> = n.occupied().collect();
    let mut e = table.e_core();
    for &p in &occ {
        e += table.spin_orbital_h1(p, p);
    }
    for &p in &occ {
        for &q in &occ {
            e += 0.5 * antisymmetrized(table, p, q, p, q);
        }
    }
    e
}

fn single_element(n: &Onv, p: usize, q: usize, table: &IntegralTable) -> f64 {
    let mut e = table.spin_orbital_h1(p, q);
    for r in n.occupied() {
        if r != p {
            e += antisymmetrized(table, p, r, q, r);
        }
    }
    e
}

/// Hamiltonian matrix element <n|H|m> by excitation class.
pub fn matrix_element(n: &Onv, m: &Onv, table: &IntegralTable) -> f64 {
    assert_eq!(
        n.n_spin_orbitals(),
        table.n_spin_orbitals(),
        "configuration does not match integral table"
    );
    assert_eq!(n.n_spin_orbitals(), m.n_spin_orbitals(), "bra/ket dimension mismatch");
    match classify_unchecked(n, m) {
        ExcitationClass::Diagonal => diagonal_element(n, table),
        ExcitationClass::Single { p, q, sign } => sign as f64 * single_element(n, p, q, table),
        ExcitationClass::Double { p, q, r, s, sign } => {
            sign as f64 * antisymmetrized(table, p, q, r, s)
        }
        ExcitationClass::Disconnected => 0.0,
    }
}

/// Diagonal energy of a configuration; the Hartree-Fock energy when
/// applied to the aufbau determinant.
pub fn diagonal_energy(n: &Onv, table: &IntegralTable) -> f64 {
    assert_eq!(n.n_spin_orbitals(), table.n_spin_orbitals());
    diagonal_element(n, table)
}

/// Contiguous ket storage, chunk-major, for the batched kernel.
pub struct KetBlock {
    onvs: Vec<Onv>,
    /// chunks[c * n_kets + i] = chunk c of ket i
    chunks: Vec<u64>,
    n_chunks: usize,
}

impl KetBlock {
    pub fn from_onvs(kets: &[Onv]) -> Self {
        let n_chunks = kets.first().map_or(1, |k| k.chunks().len());
        let mut chunks = vec![0u64; n_chunks * kets.len()];
        for (i, ket) in kets.iter().enumerate() {
            for (c, &chunk) in ket.chunks().iter().enumerate() {
                chunks[c * kets.len() + i] = chunk;
            }
        }
        KetBlock { onvs: kets.to_vec(), chunks, n_chunks }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.onvs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.onvs.is_empty()
    }
}

/// Kernel instrumentation: lanes processed and lanes routed to the
/// scalar fallback (everything that is not a double excitation).
#[derive(Debug, Default, Clone, Copy)]
pub struct KernelStats {
    pub lanes: usize,
    pub fallback_lanes: usize,
}

/// <bra|H|ket_i> for every ket in the block.
///
/// The hot path evaluates the double-excitation formula unconditionally
/// for every lane from fused bit operations; a predicate then routes
/// the lanes whose XOR popcount is not 4 to the scalar Slater-Condon
/// fallback. Single-chunk systems (up to 64 spin orbitals) take a
/// specialized branch-free lane loop.
pub fn batched_kernel(
    bra: &Onv,
    kets: &KetBlock,
    table: &IntegralTable,
    stats: &mut KernelStats,
) -> Vec<f64> {
    stats.lanes += kets.len();
    if kets.n_chunks == 1 {
        batched_kernel_1chunk(bra, kets, table, stats)
    } else {
        batched_kernel_generic(bra, kets, table, stats)
    }
}

fn batched_kernel_1chunk(
    bra: &Onv,
    kets: &KetBlock,
    table: &IntegralTable,
    stats: &mut KernelStats,
) -> Vec<f64> {
    let n = kets.len();
    let b0 = bra.chunks()[0];

    // parity of the bra population below each bit position; lane signs
    // then come from four table loads instead of masked popcounts
    let mut below = [0u8; 65];
    for i in 0..64 {
        below[i + 1] = below[i] ^ ((b0 >> i) & 1) as u8;
    }

    let pair_slots = table.spin_pair_slots();
    let lanes = &kets.chunks[..n];
    let mut out = vec![0.0; n];
    let mut fallback: Vec<usize> = Vec::new();

    for i in 0..n {
        let k0 = lanes[i];
        let d = b0 ^ k0;
        let ann = d & b0;
        let cre = d & k0;
        let ann2 = ann & ann.wrapping_sub(1);
        let cre2 = cre & cre.wrapping_sub(1);

        // unconditional double-excitation lane: extract p<q, r<s and
        // clamp so lookups stay in range on non-double lanes
        let p = ann.trailing_zeros().min(63);
        let q = ann2.trailing_zeros().min(63);
        let r = cre.trailing_zeros().min(63);
        let s = cre2.trailing_zeros().min(63);

        let (lo1, hi1) = (p.min(r), p.max(r));
        let (lo2, hi2) = (q.min(s), q.max(s));
        let mut swaps = below[hi1 as usize]
            ^ below[lo1 as usize + 1]
            ^ below[hi2 as usize]
            ^ below[lo2 as usize + 1];
        swaps ^= ((lo2 < p) & (p < hi2)) as u8;
        swaps ^= ((lo2 < r) & (r < hi2)) as u8;
        let sign = 1.0 - 2.0 * f64::from(swaps);

        let pr = pair_slots[((p << 6) | r) as usize];
        let qs = pair_slots[((q << 6) | s) as usize];
        let ps = pair_slots[((p << 6) | s) as usize];
        let qr = pair_slots[((q << 6) | r) as usize];
        let dir_on = (((p ^ r) & 1) == 0) & (((q ^ s) & 1) == 0);
        let exc_on = (((p ^ s) & 1) == 0) & (((q ^ r) & 1) == 0);
        let direct = table.h2_from_pairs(dir_on, pr, qs);
        let exchange = table.h2_from_pairs(exc_on, ps, qr);
        out[i] = sign * (direct - exchange);

        let two_ann = (ann2 != 0) & (ann2 & ann2.wrapping_sub(1) == 0);
        let two_cre = (cre2 != 0) & (cre2 & cre2.wrapping_sub(1) == 0);
        if !(two_ann & two_cre) {
            fallback.push(i);
        }
    }

    stats.fallback_lanes += fallback.len();
    for i in fallback {
        out[i] = matrix_element(bra, &kets.onvs[i], table);
    }
    out
}

fn batched_kernel_generic(
    bra: &Onv,
    kets: &KetBlock,
    table: &IntegralTable,
    stats: &mut KernelStats,
) -> Vec<f64> {
    let n = kets.len();
    let mut out = vec![0.0; n];
    let mut fallback: Vec<usize> = Vec::new();
    for (i, ket) in kets.onvs.iter().enumerate() {
        let mut xor_pop = 0;
        for (bc, kc) in bra.chunks().iter().zip(ket.chunks()) {
            xor_pop += (bc ^ kc).count_ones();
        }
        if xor_pop != 4 {
            fallback.push(i);
            continue;
        }
        match classify_unchecked(bra, ket) {
            ExcitationClass::Double { p, q, r, s, sign } => {
                out[i] = sign as f64 * antisymmetrized(table, p, q, r, s);
            }
            _ => fallback.push(i),
        }
    }
    stats.fallback_lanes += fallback.len();
    for i in fallback {
        out[i] = matrix_element(bra, &kets.onvs[i], table);
    }
    out
}

fn sum_local_energy(
    row_values: &[f64],
    conn: &[Onv],
    psi_n: &WavefunctionValue,
    lookup: impl Fn(&Onv) -> Option<WavefunctionValue>,
) -> Complex64 {
    let mut e = Complex64::new(0.0, 0.0);
    for (h_nm, m) in row_values.iter().zip(conn) {
        if *h_nm == 0.0 {
            continue;
        }
        if let Some(psi_m) = lookup(m) {
            e += *h_nm * psi_m.ratio_over(psi_n);
        }
    }
    e
}

/// Local energies E_loc(n) = sum_m <n|H|m> Psi(m)/Psi(n) for the unique
/// samples of a leaf batch.
pub fn local_energy_batch(
    samples: &SampleBatch,
    psi: &dyn Wavefunction,
    table: &IntegralTable,
    mode: ElocMode,
) -> Result<LocalEnergyReport> {
    let onvs = samples.to_onvs()?;
    local_energy_onvs(&onvs, psi, table, mode)
}

/// As [`local_energy_batch`] but over explicit configurations.
pub fn local_energy_onvs(
    onvs: &[Onv],
    psi: &dyn Wavefunction,
    table: &IntegralTable,
    mode: ElocMode,
) -> Result<LocalEnergyReport> {
    for n in onvs {
        if n.n_spin_orbitals() != table.n_spin_orbitals() {
            return Err(NqsError::Dimension(
                "sample does not match integral table orbital count".into(),
            ));
        }
    }
    match mode {
        ElocMode::Accurate => accurate_mode(onvs, psi, table),
        ElocMode::SampleSpace => sample_space_mode(onvs, psi, table),
    }
}

fn check_denominators(onvs: &[Onv], values: &[WavefunctionValue]) -> Result<()> {
    for (n, v) in onvs.iter().zip(values) {
        if v.log_amplitude == f64::NEG_INFINITY {
            return Err(NqsError::DegenerateAmplitude(n.to_string()));
        }
    }
    Ok(())
}

fn accurate_mode(
    onvs: &[Onv],
    psi: &dyn Wavefunction,
    table: &IntegralTable,
) -> Result<LocalEnergyReport> {
    // first pass: the distinct set of connected configurations, in
    // first-appearance order so indices are deterministic
    let mut index: HashMap<Onv, usize> = HashMap::new();
    let mut distinct: Vec<Onv> = Vec::new();
    let mut matrix_elements = 0;
    for n in onvs {
        for m in connected(n) {
            matrix_elements += 1;
            index.entry(m).or_insert_with(|| {
                distinct.push(m);
                distinct.len() - 1
            });
        }
    }

    let values = psi.evaluate_batch(&distinct);
    let psi_evaluations = distinct.len();
    let sample_values: Vec<WavefunctionValue> =
        onvs.iter().map(|n| values[index[n]]).collect();
    check_denominators(onvs, &sample_values)?;

    let e_loc: Vec<Complex64> = onvs
        .par_iter()
        .zip(sample_values.par_iter())
        .map(|(n, psi_n)| {
            let conn = connected(n);
            let block = KetBlock::from_onvs(&conn);
            let mut stats = KernelStats::default();
            let row = batched_kernel(n, &block, table, &mut stats);
            sum_local_energy(&row, &conn, psi_n, |m| Some(values[index[m]]))
        })
        .collect();

    Ok(LocalEnergyReport {
        e_loc,
        mode: ElocMode::Accurate,
        psi_evaluations,
        matrix_elements,
        lut_build_seconds: 0.0,
    })
}

fn sample_space_mode(
    onvs: &[Onv],
    psi: &dyn Wavefunction,
    table: &IntegralTable,
) -> Result<LocalEnergyReport> {
    let build_start = Instant::now();
    let values = psi.evaluate_batch(onvs);
    let lut: HashMap<Onv, WavefunctionValue> =
        onvs.iter().copied().zip(values.iter().copied()).collect();
    let lut_build_seconds = build_start.elapsed().as_secs_f64();
    check_denominators(onvs, &values)?;

    let per_sample: Vec<(Complex64, usize)> = onvs
        .par_iter()
        .zip(values.par_iter())
        .map(|(n, psi_n)| {
            // lookup-first: matrix elements are only computed for
            // configurations inside the sampled space
            let conn: Vec<Onv> =
                connected(n).into_iter().filter(|m| lut.contains_key(m)).collect();
            let block = KetBlock::from_onvs(&conn);
            let mut stats = KernelStats::default();
            let row = batched_kernel(n, &block, table, &mut stats);
            let e = sum_local_energy(&row, &conn, psi_n, |m| lut.get(m).copied());
            (e, conn.len())
        })
        .collect();

    let matrix_elements = per_sample.iter().map(|(_, c)| c).sum();
    Ok(LocalEnergyReport {
        e_loc: per_sample.into_iter().map(|(e, _)| e).collect(),
        mode: ElocMode::SampleSpace,
        psi_evaluations: lut.len(),
        matrix_elements,
        lut_build_seconds,
    })
}
