//! Bit-packed occupation number vectors and determinant algebra:
//! excitation classification, fermionic parity signs, and enumeration
//! of Hamiltonian-connected configurations.
//!
//! Spin orbitals are interleaved: index 2k is spatial orbital k with
//! spin alpha, index 2k+1 the same orbital with spin beta. Bit i of the
//! chunk array is the occupation of spin orbital i, with bit 0 in the
//! least significant position of chunk 0.

use crate::{NqsError, Result};

/// Hard cap on system size; 4 chunks cover 128 spatial orbitals, far
/// beyond anything the desk-scale solvers accept.
pub const MAX_SPIN_ORBITALS: usize = 256;
const CHUNKS: usize = MAX_SPIN_ORBITALS / 64;

const ALPHA_MASK: u64 = 0x5555_5555_5555_5555;

/// Occupation number vector over `n_spin_orbitals` spin orbitals.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Onv {
    bits: [u64; CHUNKS],
    n_spin_orbitals: u16,
}

impl std::fmt::Debug for Onv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Onv({self})")
    }
}

impl std::fmt::Display for Onv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.n_spin_orbitals as usize {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl PartialOrd for Onv {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Onv {
    /// Orders by the packed integer value (chunk 0 least significant).
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        for c in (0..CHUNKS).rev() {
            match self.bits[c].cmp(&other.bits[c]) {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        std::cmp::Ordering::Equal
    }
}

impl Onv {
    /// Empty configuration over `n_spin_orbitals` orbitals.
    pub fn empty(n_spin_orbitals: usize) -> Self {
        assert!(
            n_spin_orbitals <= MAX_SPIN_ORBITALS,
            "system exceeds {MAX_SPIN_ORBITALS} spin orbitals"
        );
        Onv { bits: [0; CHUNKS], n_spin_orbitals: n_spin_orbitals as u16 }
    }

    /// Configuration with the listed spin orbitals occupied.
    pub fn from_occupied(n_spin_orbitals: usize, occupied: &[usize]) -> Self {
        let mut onv = Self::empty(n_spin_orbitals);
        for &i in occupied {
            onv.set(i, true);
        }
        onv
    }

    /// The aufbau determinant: the lowest `n_alpha` alpha and `n_beta`
    /// beta spin orbitals occupied.
    pub fn aufbau(n_spin_orbitals: usize, n_alpha: usize, n_beta: usize) -> Self {
        let mut onv = Self::empty(n_spin_orbitals);
        for k in 0..n_alpha {
            onv.set(2 * k, true);
        }
        for k in 0..n_beta {
            onv.set(2 * k + 1, true);
        }
        onv
    }

    /// Parse a textual rendering like "1100" (orbital 0 first).
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut onv = Self::empty(s.len());
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '0' => {}
                '1' => onv.set(i, true),
                _ => {
                    return Err(NqsError::Parse {
                        line: 1,
                        msg: format!("invalid occupation character {ch:?}"),
                    })
                }
            }
        }
        Ok(onv)
    }

    /// Decode a length-K token sequence over {0,1,2,3} where token k is
    /// `n_alpha(k) + 2 * n_beta(k)`.
    pub fn from_tokens(tokens: &[u8]) -> Result<Self> {
        let mut onv = Self::empty(2 * tokens.len());
        for (k, &t) in tokens.iter().enumerate() {
            if t > 3 {
                return Err(NqsError::Range(format!("occupation token {t} outside 0..=3")));
            }
            onv.set(2 * k, t & 1 != 0);
            onv.set(2 * k + 1, t & 2 != 0);
        }
        Ok(onv)
    }

    /// Encode as the length-K token sequence over {0,1,2,3}.
    pub fn to_tokens(&self) -> Vec<u8> {
        let k_orbitals = self.n_spin_orbitals as usize / 2;
        (0..k_orbitals)
            .map(|k| self.get(2 * k) as u8 + 2 * (self.get(2 * k + 1) as u8))
            .collect()
    }

    #[inline]
    pub fn n_spin_orbitals(&self) -> usize {
        self.n_spin_orbitals as usize
    }

    #[inline]
    pub fn n_spatial(&self) -> usize {
        self.n_spin_orbitals as usize / 2
    }

    /// Backing chunks; `ceil(n_spin_orbitals / 64)` entries are in use.
    #[inline]
    pub fn chunks(&self) -> &[u64] {
        let used = (self.n_spin_orbitals as usize).div_ceil(64).max(1);
        &self.bits[..used]
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.n_spin_orbitals as usize);
        self.bits[i / 64] >> (i % 64) & 1 != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, occupied: bool) {
        assert!(i < self.n_spin_orbitals as usize, "spin orbital {i} out of range");
        if occupied {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn count_ones(&self) -> u32 {
        self.bits.iter().map(|c| c.count_ones()).sum()
    }

    #[inline]
    pub fn n_alpha(&self) -> u32 {
        self.bits.iter().map(|c| (c & ALPHA_MASK).count_ones()).sum()
    }

    #[inline]
    pub fn n_beta(&self) -> u32 {
        self.bits.iter().map(|c| (c & !ALPHA_MASK).count_ones()).sum()
    }

    /// True when the configuration carries exactly the requested
    /// electron counts per spin channel.
    pub fn is_physical(&self, n_alpha: usize, n_beta: usize) -> bool {
        self.n_alpha() as usize == n_alpha && self.n_beta() as usize == n_beta
    }

    /// Iterate over occupied spin-orbital indices, ascending.
    pub fn occupied(&self) -> OccupiedIter<'_> {
        OccupiedIter { bits: &self.bits, chunk: 0, current: self.bits[0] }
    }

    /// The configuration with the electron at `p` moved to `q`.
    #[inline]
    pub fn excite(&self, p: usize, q: usize) -> Self {
        debug_assert!(self.get(p) && !self.get(q));
        let mut out = *self;
        out.bits[p / 64] ^= 1 << (p % 64);
        out.bits[q / 64] ^= 1 << (q % 64);
        out
    }

    /// Number of occupied orbitals strictly between positions p and q.
    #[inline]
    pub fn count_between(&self, p: usize, q: usize) -> u32 {
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        if hi <= lo + 1 {
            return 0;
        }
        let mut count = 0;
        let (start, end) = (lo + 1, hi);
        let (c0, c1) = (start / 64, (end - 1) / 64);
        for c in c0..=c1 {
            let mut mask = u64::MAX;
            if c == c0 {
                mask &= u64::MAX << (start % 64);
            }
            if c == c1 {
                let top = end % 64;
                if top != 0 {
                    mask &= u64::MAX >> (64 - top);
                }
            }
            count += (self.bits[c] & mask).count_ones();
        }
        count
    }
}

/// Iterator over set bit positions, lowest first.
pub struct OccupiedIter<'a> {
    bits: &'a [u64; CHUNKS],
    chunk: usize,
    current: u64,
}

impl Iterator for OccupiedIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        while self.current == 0 {
            self.chunk += 1;
            if self.chunk >= CHUNKS {
                return None;
            }
            self.current = self.bits[self.chunk];
        }
        let tz = self.current.trailing_zeros() as usize;
        self.current &= self.current - 1;
        Some(self.chunk * 64 + tz)
    }
}

/// Excitation relation between a bra and a ket configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExcitationClass {
    Diagonal,
    /// One electron moved from `p` (occupied in the bra) to `q`.
    Single { p: usize, q: usize, sign: i32 },
    /// Two electrons moved from `p < q` to `r < s`; the sign folds in
    /// the canonical ordering so `sign * <pq||rs>` is the matrix
    /// element without further bookkeeping.
    Double { p: usize, q: usize, r: usize, s: usize, sign: i32 },
    Disconnected,
}

/// Fermionic sign (-1)^c of moving one electron from `p` to `q`, where
/// `c` counts the occupied orbitals strictly between the two positions.
#[inline]
pub fn parity_sign(n: &Onv, p: usize, q: usize) -> i32 {
    if n.count_between(p, q).is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Classify the excitation taking `n` to `m`.
pub fn classify(n: &Onv, m: &Onv) -> Result<ExcitationClass> {
    if n.n_spin_orbitals != m.n_spin_orbitals {
        return Err(NqsError::Dimension(format!(
            "classify over {} vs {} spin orbitals",
            n.n_spin_orbitals, m.n_spin_orbitals
        )));
    }
    Ok(classify_unchecked(n, m))
}

pub(crate) fn classify_unchecked(n: &Onv, m: &Onv) -> ExcitationClass {
    let mut ann = [0usize; 2];
    let mut cre = [0usize; 2];
    let mut n_ann = 0;
    let mut n_cre = 0;
    for c in 0..CHUNKS {
        let diff = n.bits[c] ^ m.bits[c];
        if diff == 0 {
            continue;
        }
        let mut only_n = diff & n.bits[c];
        while only_n != 0 {
            if n_ann == 2 {
                return ExcitationClass::Disconnected;
            }
            ann[n_ann] = c * 64 + only_n.trailing_zeros() as usize;
            n_ann += 1;
            only_n &= only_n - 1;
        }
        let mut only_m = diff & m.bits[c];
        while only_m != 0 {
            if n_cre == 2 {
                return ExcitationClass::Disconnected;
            }
            cre[n_cre] = c * 64 + only_m.trailing_zeros() as usize;
            n_cre += 1;
            only_m &= only_m - 1;
        }
    }
    match (n_ann, n_cre) {
        (0, 0) => ExcitationClass::Diagonal,
        (1, 1) => ExcitationClass::Single {
            p: ann[0],
            q: cre[0],
            sign: parity_sign(n, ann[0], cre[0]),
        },
        (2, 2) => {
            let (p, q) = (ann[0], ann[1]);
            let (r, s) = (cre[0], cre[1]);
            let sign = parity_sign(n, p, r) * parity_sign(&n.excite(p, r), q, s);
            ExcitationClass::Double { p, q, r, s, sign }
        }
        _ => ExcitationClass::Disconnected,
    }
}

/// Enumerate every configuration with a potentially nonzero Hamiltonian
/// matrix element against `n`: the configuration itself, spin-conserving
/// singles, and spin-conserving doubles. Deterministic order: identity,
/// then singles by (p, q), then same-spin alpha doubles, same-spin beta
/// doubles, and opposite-spin doubles, each lexicographic by index.
pub fn connected(n: &Onv) -> Vec<Onv> {
    let nso = n.n_spin_orbitals();
    let mut occ_a = Vec::new();
    let mut occ_b = Vec::new();
    let mut virt_a = Vec::new();
    let mut virt_b = Vec::new();
    for i in 0..nso {
        let list = match (n.get(i), i % 2 == 0) {
            (true, true) => &mut occ_a,
            (true, false) => &mut occ_b,
            (false, true) => &mut virt_a,
            (false, false) => &mut virt_b,
        };
        list.push(i);
    }

    let singles = occ_a.len() * virt_a.len() + occ_b.len() * virt_b.len();
    let pairs = |o: usize, v: usize| o * o.saturating_sub(1) / 2 * (v * v.saturating_sub(1) / 2);
    let doubles = pairs(occ_a.len(), virt_a.len())
        + pairs(occ_b.len(), virt_b.len())
        + occ_a.len() * virt_a.len() * occ_b.len() * virt_b.len();
    let mut out = Vec::with_capacity(1 + singles + doubles);

    out.push(*n);

    let mut occ_all: Vec<usize> = Vec::with_capacity(occ_a.len() + occ_b.len());
    occ_all.extend_from_slice(&occ_a);
    occ_all.extend_from_slice(&occ_b);
    occ_all.sort_unstable();
    for &p in &occ_all {
        let virt = if p % 2 == 0 { &virt_a } else { &virt_b };
        for &q in virt {
            out.push(n.excite(p, q));
        }
    }

    let same_spin = |occ: &[usize], virt: &[usize], out: &mut Vec<Onv>| {
        for i in 0..occ.len() {
            for j in i + 1..occ.len() {
                for a in 0..virt.len() {
                    for b in a + 1..virt.len() {
                        out.push(n.excite(occ[i], virt[a]).excite(occ[j], virt[b]));
                    }
                }
            }
        }
    };
    same_spin(&occ_a, &virt_a, &mut out);
    same_spin(&occ_b, &virt_b, &mut out);

    for &p in &occ_a {
        for &q in &occ_b {
            for &r in &virt_a {
                for &s in &virt_b {
                    out.push(n.excite(p, r).excite(q, s));
                }
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onv(s: &str) -> Onv {
        Onv::from_bit_string(s).unwrap()
    }

    #[test]
    fn renders_orbital_zero_first() {
        let n = Onv::from_occupied(4, &[0, 1]);
        assert_eq!(n.to_string(), "1100");
        assert_eq!(onv("1100"), n);
    }

    #[test]
    fn aufbau_interleaves_spins() {
        let hf = Onv::aufbau(8, 2, 1);
        assert_eq!(hf.to_string(), "11100000");
        assert_eq!(hf.n_alpha(), 2);
        assert_eq!(hf.n_beta(), 1);
    }

    #[test]
    fn classify_identity_is_diagonal() {
        let n = onv("1100");
        assert_eq!(classify(&n, &n).unwrap(), ExcitationClass::Diagonal);
    }

    #[test]
    fn classify_single_finds_moved_electron() {
        let n = onv("1100");
        let m = onv("1010");
        assert_eq!(
            classify(&n, &m).unwrap(),
            ExcitationClass::Single { p: 1, q: 2, sign: 1 }
        );
    }

    #[test]
    fn classify_double_canonicalizes() {
        let n = onv("1100");
        let m = onv("0011");
        assert_eq!(
            classify(&n, &m).unwrap(),
            ExcitationClass::Double { p: 0, q: 1, r: 2, s: 3, sign: 1 }
        );
    }

    #[test]
    fn classify_rejects_length_mismatch() {
        let n = onv("1100");
        let m = onv("110000");
        assert!(classify(&n, &m).is_err());
    }

    #[test]
    fn classify_particle_nonconserving_is_disconnected() {
        // two extra electrons in the bra: not a single excitation
        let n = onv("1100");
        let m = onv("0000");
        assert_eq!(classify(&n, &m).unwrap(), ExcitationClass::Disconnected);
    }

    #[test]
    fn parity_examples() {
        assert_eq!(parity_sign(&onv("0110"), 1, 2), 1);
        assert_eq!(parity_sign(&onv("1110"), 0, 3), 1);
        assert_eq!(parity_sign(&onv("1010"), 0, 3), -1);
    }

    #[test]
    fn parity_spans_chunk_boundaries() {
        let mut n = Onv::empty(130);
        for i in [0, 63, 64, 65, 128] {
            n.set(i, true);
        }
        // between 0 and 128: occupied at 63, 64, 65
        assert_eq!(n.count_between(0, 128), 3);
        assert_eq!(parity_sign(&n, 0, 128), -1);
    }

    #[test]
    fn connected_respects_spin_conservation() {
        // one alpha electron in K=1: nowhere to go
        let n = onv("10");
        assert_eq!(connected(&n), vec![n]);
    }

    #[test]
    fn connected_h2_minimal_basis() {
        let n = onv("1100");
        let got = connected(&n);
        let expect: Vec<Onv> = ["1100", "0110", "1001", "0011"].iter().map(|s| onv(s)).collect();
        assert_eq!(got.len(), 4);
        for m in &expect {
            assert!(got.contains(m), "missing {m}");
        }
    }

    #[test]
    fn connected_matches_exhaustive_scan() {
        // every physical m over 2K = 8 with classify != Disconnected
        let n = onv("11010010");
        let (na, nb) = (n.n_alpha() as usize, n.n_beta() as usize);
        let got = connected(&n);
        let mut expect = Vec::new();
        for bits in 0u32..256 {
            let mut m = Onv::empty(8);
            for i in 0..8 {
                m.set(i, bits >> i & 1 != 0);
            }
            if m.is_physical(na, nb)
                && classify(&n, &m).unwrap() != ExcitationClass::Disconnected
            {
                expect.push(m);
            }
        }
        let mut got_sorted = got.clone();
        got_sorted.sort();
        got_sorted.dedup();
        assert_eq!(got_sorted.len(), got.len(), "duplicates in connected()");
        expect.sort();
        assert_eq!(got_sorted, expect);
    }

    #[test]
    fn tokens_round_trip() {
        assert_eq!(Onv::from_tokens(&[3, 0]).unwrap(), onv("1100"));
        assert_eq!(Onv::from_tokens(&[1, 2]).unwrap(), onv("1001"));
        assert_eq!(onv("1100").to_tokens(), vec![3, 0]);
        assert_eq!(onv("1001").to_tokens(), vec![1, 2]);
        assert!(Onv::from_tokens(&[4]).is_err());
    }

    #[test]
    fn ordering_is_numeric() {
        // |1000> packs to 1, |0100> packs to 2
        assert!(onv("1000") < onv("0100"));
        assert!(onv("0011") > onv("1100"));
    }
}
