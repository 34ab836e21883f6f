//! FCIDUMP parsing and the in-memory integral table.
//!
//! One-electron integrals are stored as a dense symmetric K x K matrix,
//! two-electron integrals in chemists' notation (pq|rs) under the
//! canonical triangular index, so each of the 8 permutational images is
//! stored once and completed at lookup.

use std::io::{BufRead, BufReader, Read};

use crate::{NqsError, Result};

/// Spatial-orbital integrals plus system metadata from an FCIDUMP file.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralTable {
    n_spatial: usize,
    n_elec: usize,
    ms2: i32,
    e_core: f64,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Composite triangular index over an (unordered) pair a >= b.
#[inline]
fn tri(a: usize, b: usize) -> usize {
    debug_assert!(a >= b);
    a * (a + 1) / 2 + b
}

/// Canonical storage slot for (pq|rs) under 8-fold symmetry.
#[inline]
fn canonical(p: usize, q: usize, r: usize, s: usize) -> usize {
    let pq = tri(p.max(q), p.min(q));
    let rs = tri(r.max(s), r.min(s));
    tri(pq.max(rs), pq.min(rs))
}

impl IntegralTable {
    /// Number of spatial orbitals K.
    #[inline]
    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    /// Number of spin orbitals 2K.
    #[inline]
    pub fn n_spin_orbitals(&self) -> usize {
        2 * self.n_spatial
    }

    #[inline]
    pub fn n_elec(&self) -> usize {
        self.n_elec
    }

    #[inline]
    pub fn ms2(&self) -> i32 {
        self.ms2
    }

    /// Electron counts per spin channel implied by NELEC and MS2.
    pub fn spin_counts(&self) -> (usize, usize) {
        let n_alpha = (self.n_elec as i32 + self.ms2) / 2;
        (n_alpha as usize, self.n_elec - n_alpha as usize)
    }

    #[inline]
    pub fn e_core(&self) -> f64 {
        self.e_core
    }

    /// One-electron spatial integral h_pq.
    #[inline]
    pub fn h1(&self, p: usize, q: usize) -> f64 {
        assert!(p < self.n_spatial && q < self.n_spatial, "h1 index out of range");
        self.h1[p * self.n_spatial + q]
    }

    /// Two-electron spatial integral (pq|rs), chemists' notation.
    #[inline]
    pub fn h2(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let k = self.n_spatial;
        assert!(p < k && q < k && r < k && s < k, "h2 index out of range");
        self.h2[canonical(p, q, r, s)]
    }

    /// Pair-slot table over interleaved spin orbitals for systems of at
    /// most 64 spin orbitals: entry `(a << 6) | b` holds the triangular
    /// slot of the spatial pair underlying spin orbitals a and b, or
    /// zero when either index falls outside the table. Feeds
    /// [`IntegralTable::h2_from_pairs`], which replaces per-lookup index
    /// arithmetic with two loads from this table.
    pub fn spin_pair_slots(&self) -> Vec<u16> {
        let k = self.n_spatial;
        let mut slots = vec![0u16; 64 * 64];
        for a in 0..64usize {
            for b in 0..64usize {
                let (oa, ob) = (a / 2, b / 2);
                if oa < k && ob < k {
                    slots[(a << 6) | b] = tri(oa.max(ob), oa.min(ob)) as u16;
                }
            }
        }
        slots
    }

    /// Gated (pq|rs) lookup from two pair slots produced by
    /// [`IntegralTable::spin_pair_slots`]: zero when `on` is false,
    /// without branching on `on`. Disabled lookups read storage slot
    /// zero so the access pattern stays data independent.
    #[inline]
    pub fn h2_from_pairs(&self, on: bool, ab: u16, cd: u16) -> f64 {
        let (hi, lo) = (ab.max(cd) as usize, ab.min(cd) as usize);
        let idx = if on { hi * (hi + 1) / 2 + lo } else { 0 };
        f64::from(u8::from(on)) * self.h2[idx]
    }

    /// One-electron integral lifted to interleaved spin orbitals: zero
    /// across spin channels, h1 on the spatial indices otherwise.
    #[inline]
    pub fn spin_orbital_h1(&self, p: usize, q: usize) -> f64 {
        assert!(
            p < 2 * self.n_spatial && q < 2 * self.n_spatial,
            "spin orbital index out of range"
        );
        if p % 2 == q % 2 {
            self.h1[(p / 2) * self.n_spatial + q / 2]
        } else {
            0.0
        }
    }

    /// Build a table directly from dense arrays (test and benchmark
    /// systems); h1 is symmetrized, h2 entries are read in chemists'
    /// notation from a K^4 array that must already respect the 8-fold
    /// symmetry.
    pub fn from_dense(
        n_elec: usize,
        ms2: i32,
        e_core: f64,
        h1: &[f64],
        h2_full: &[f64],
        n_spatial: usize,
    ) -> Result<Self> {
        if h1.len() != n_spatial * n_spatial || h2_full.len() != n_spatial.pow(4) {
            return Err(NqsError::Dimension("dense integral array size".into()));
        }
        let mut table = IntegralTable {
            n_spatial,
            n_elec,
            ms2,
            e_core,
            h1: vec![0.0; n_spatial * n_spatial],
            h2: vec![0.0; canonical(n_spatial - 1, n_spatial - 1, n_spatial - 1, n_spatial - 1) + 1],
        };
        for p in 0..n_spatial {
            for q in 0..=p {
                let v = 0.5 * (h1[p * n_spatial + q] + h1[q * n_spatial + p]);
                table.h1[p * n_spatial + q] = v;
                table.h1[q * n_spatial + p] = v;
            }
        }
        let k = n_spatial;
        for p in 0..k {
            for q in 0..k {
                for r in 0..k {
                    for s in 0..k {
                        table.h2[canonical(p, q, r, s)] = h2_full[((p * k + q) * k + r) * k + s];
                    }
                }
            }
        }
        Ok(table)
    }

    /// Deterministic random symmetric integrals, used by benchmarks and
    /// property tests that need a table of arbitrary size without a
    /// molecule behind it.
    pub fn synthetic(n_spatial: usize, n_elec: usize, seed: u64) -> Self {
        let k = n_spatial;
        let mut rng = crate::rng::KeyedStream::from_parts(&[seed, k as u64, 0x5e1f]);
        let mut table = IntegralTable {
            n_spatial: k,
            n_elec,
            ms2: 0,
            e_core: rng.next_f64(),
            h1: vec![0.0; k * k],
            h2: vec![0.0; canonical(k - 1, k - 1, k - 1, k - 1) + 1],
        };
        for p in 0..k {
            for q in 0..=p {
                let v = rng.next_f64() * 2.0 - 1.0;
                table.h1[p * k + q] = v;
                table.h1[q * k + p] = v;
            }
        }
        for slot in table.h2.iter_mut() {
            *slot = rng.next_f64() * 2.0 - 1.0;
        }
        table
    }

    /// Serialize back to canonical FCIDUMP records; parsing the output
    /// reproduces the table exactly.
    pub fn to_canonical_records(&self) -> String {
        let k = self.n_spatial;
        let mut out = String::new();
        out.push_str(&format!(
            "&FCI NORB={},NELEC={},MS2={},\n ISYM=1,\n&END\n",
            k, self.n_elec, self.ms2
        ));
        for p in 0..k {
            for q in 0..=p {
                for r in 0..=p {
                    for s in 0..=r {
                        if tri(r, s) > tri(p, q) {
                            continue;
                        }
                        let v = self.h2[canonical(p, q, r, s)];
                        if v != 0.0 {
                            out.push_str(&format!(
                                " {:.16E} {} {} {} {}\n",
                                v,
                                p + 1,
                                q + 1,
                                r + 1,
                                s + 1
                            ));
                        }
                    }
                }
            }
        }
        for p in 0..k {
            for q in 0..=p {
                let v = self.h1[p * k + q];
                if v != 0.0 {
                    out.push_str(&format!(" {:.16E} {} {} 0 0\n", v, p + 1, q + 1));
                }
            }
        }
        out.push_str(&format!(" {:.16E} 0 0 0 0\n", self.e_core));
        out
    }
}

/// Parse an FCIDUMP byte stream.
pub fn parse_fcidump<R: Read>(reader: R) -> Result<IntegralTable> {
    let mut lines = BufReader::new(reader).lines();
    let mut line_no = 0;

    let mut norb = None;
    let mut nelec = None;
    let mut ms2 = None;
    let mut header_done = false;
    let mut in_orbsym = false;
    let mut pending_key: Option<String> = None;
    for line in lines.by_ref() {
        line_no += 1;
        let line = line?;
        let body = match line.find(['/', '&']) {
            Some(pos) if line[pos..].starts_with("&END") || line[pos..].starts_with('/') => {
                header_done = true;
                &line[..pos]
            }
            _ => &line[..],
        };
        for token in body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let (key, value) = match pending_key.take() {
                Some(key) => (key, token.to_owned()),
                None => match token.split_once('=') {
                    Some((key, value)) => {
                        let key = key.to_ascii_uppercase();
                        if value.is_empty() {
                            // "NORB=" with the value in the next token
                            pending_key = Some(key);
                            continue;
                        }
                        (key, value.to_owned())
                    }
                    None if token == "&FCI" => continue,
                    None if in_orbsym && token.parse::<i64>().is_ok() => continue,
                    None => {
                        log::warn!("ignoring unrecognized FCIDUMP header token {token:?}");
                        continue;
                    }
                },
            };
            in_orbsym = false;
            match key.as_str() {
                "NORB" => norb = Some(parse_header_int(&value, line_no, "NORB")?),
                "NELEC" => nelec = Some(parse_header_int(&value, line_no, "NELEC")?),
                "MS2" => ms2 = Some(parse_header_int(&value, line_no, "MS2")?),
                "ORBSYM" => in_orbsym = true,
                "ISYM" => {}
                other => log::warn!("ignoring unrecognized FCIDUMP header key {other}"),
            }
        }
        if header_done {
            break;
        }
    }
    if !header_done {
        return Err(NqsError::Parse { line: line_no, msg: "header never terminated by &END".into() });
    }
    let norb = norb.ok_or(NqsError::Parse { line: line_no, msg: "header missing NORB".into() })?;
    let nelec =
        nelec.ok_or(NqsError::Parse { line: line_no, msg: "header missing NELEC".into() })?;
    let ms2 = ms2.ok_or(NqsError::Parse { line: line_no, msg: "header missing MS2".into() })?;
    if norb == 0 {
        return Err(NqsError::Parse { line: line_no, msg: "NORB must be positive".into() });
    }

    let k = norb as usize;
    let mut table = IntegralTable {
        n_spatial: k,
        n_elec: nelec as usize,
        ms2: ms2 as i32,
        e_core: 0.0,
        h1: vec![0.0; k * k],
        h2: vec![0.0; canonical(k - 1, k - 1, k - 1, k - 1) + 1],
    };
    let mut seen_core = false;
    let mut seen_h1 = vec![false; k * (k + 1) / 2];
    let mut seen_h2 = vec![false; table.h2.len()];

    for line in lines {
        line_no += 1;
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(value_text) = fields.next() else { continue };
        let value: f64 = value_text.replace(['D', 'd'], "E").parse().map_err(|_| {
            NqsError::Parse { line: line_no, msg: format!("bad value field {value_text:?}") }
        })?;
        let mut idx = [0usize; 4];
        for slot in &mut idx {
            let text = fields.next().ok_or(NqsError::Parse {
                line: line_no,
                msg: "record has fewer than 4 index fields".into(),
            })?;
            *slot = text.parse().map_err(|_| NqsError::Parse {
                line: line_no,
                msg: format!("bad index field {text:?}"),
            })?;
        }
        if fields.next().is_some() {
            return Err(NqsError::Parse {
                line: line_no,
                msg: "trailing fields after record".into(),
            });
        }
        let [i, j, kk, l] = idx;
        let check = |v: usize, allow_zero: bool| -> Result<()> {
            if v > k || (v == 0 && !allow_zero) {
                Err(NqsError::Range(format!(
                    "line {line_no}: orbital index {v} outside [1, {k}]"
                )))
            } else {
                Ok(())
            }
        };
        if i == 0 && j == 0 && kk == 0 && l == 0 {
            if seen_core && (table.e_core - value).abs() > 1e-12 {
                return Err(NqsError::Consistency(format!(
                    "line {line_no}: core energy re-specified as {value} (was {})",
                    table.e_core
                )));
            }
            seen_core = true;
            table.e_core = value;
        } else if kk == 0 && l == 0 {
            check(i, false)?;
            check(j, false)?;
            let (p, q) = (i - 1, j - 1);
            let slot = tri(p.max(q), p.min(q));
            if seen_h1[slot] && (table.h1[p * k + q] - value).abs() > 1e-12 {
                return Err(NqsError::Consistency(format!(
                    "line {line_no}: conflicting h1[{p}][{q}] = {value} (was {})",
                    table.h1[p * k + q]
                )));
            }
            seen_h1[slot] = true;
            table.h1[p * k + q] = value;
            table.h1[q * k + p] = value;
        } else {
            check(i, false)?;
            check(j, false)?;
            check(kk, false)?;
            check(l, false)?;
            let slot = canonical(i - 1, j - 1, kk - 1, l - 1);
            if seen_h2[slot] && (table.h2[slot] - value).abs() > 1e-12 {
                return Err(NqsError::Consistency(format!(
                    "line {line_no}: conflicting two-electron record ({i} {j}|{kk} {l}) = {value} (was {})",
                    table.h2[slot]
                )));
            }
            seen_h2[slot] = true;
            table.h2[slot] = value;
        }
    }
    Ok(table)
}

fn parse_header_int(text: &str, line: usize, key: &str) -> Result<i64> {
    text.parse().map_err(|_| NqsError::Parse {
        line,
        msg: format!("header key {key} has non-integer value {text:?}"),
    })
}

/// Parse an FCIDUMP file from disk.
pub fn load_fcidump(path: impl AsRef<std::path::Path>) -> Result<IntegralTable> {
    parse_fcidump(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "&FCI NORB=2,NELEC=2,MS2=0,\n  ORBSYM=1,1,\n  ISYM=1,\n &END\n\
        0.67 1 2 1 2\n\
        -1.25 1 1 0 0\n\
        0.5 0 0 0 0\n";

    #[test]
    fn parses_core_h1_h2() {
        let t = parse_fcidump(TINY.as_bytes()).unwrap();
        assert_eq!(t.n_spatial(), 2);
        assert_eq!(t.n_elec(), 2);
        assert_eq!(t.ms2(), 0);
        assert_eq!(t.e_core(), 0.5);
        assert_eq!(t.h1(0, 0), -1.25);
        assert_eq!(t.h2(0, 1, 0, 1), 0.67);
    }

    #[test]
    fn completes_all_eight_symmetries() {
        let t = parse_fcidump(TINY.as_bytes()).unwrap();
        let (p, q, r, s) = (0, 1, 0, 1);
        let reference = t.h2(p, q, r, s);
        for (a, b, c, d) in [
            (q, p, r, s),
            (p, q, s, r),
            (q, p, s, r),
            (r, s, p, q),
            (s, r, p, q),
            (r, s, q, p),
            (s, r, q, p),
        ] {
            assert_eq!(t.h2(a, b, c, d), reference);
        }
    }

    #[test]
    fn spin_orbital_lookup_interleaves() {
        let t = parse_fcidump(
            "&FCI NORB=2,NELEC=2,MS2=0,\n&END\n 0.25 2 1 0 0\n 0.75 2 2 0 0\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(t.spin_orbital_h1(0, 2), 0.25);
        assert_eq!(t.spin_orbital_h1(0, 1), 0.0);
        assert_eq!(t.spin_orbital_h1(3, 3), 0.75);
    }

    #[test]
    fn record_order_and_whitespace_do_not_matter() {
        let shuffled = "&FCI NORB=2,NELEC=2,MS2=0,\n&END\n\
            0.5   0 0 0 0\n\
            \t0.67\t1 2 1 2\n\
            -1.25 1 1   0 0\n";
        assert_eq!(
            parse_fcidump(TINY.as_bytes()).unwrap(),
            parse_fcidump(shuffled.as_bytes()).unwrap()
        );
    }

    #[test]
    fn fortran_exponent_marker_is_accepted() {
        let t = parse_fcidump("&FCI NORB=1,NELEC=1,MS2=1,\n&END\n 1.5D-01 1 1 0 0\n".as_bytes())
            .unwrap();
        assert_eq!(t.h1(0, 0), 0.15);
    }

    #[test]
    fn padded_header_values_parse() {
        let t = parse_fcidump(
            "&FCI NORB=  2,NELEC=  2,MS2= 0,\n  ORBSYM=1,1,\n  ISYM=1,\n &END\n 0.5 0 0 0 0\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!((t.n_spatial(), t.n_elec(), t.ms2()), (2, 2, 0));
    }

    #[test]
    fn missing_norb_is_a_parse_error() {
        let err = parse_fcidump("&FCI NELEC=2,MS2=0,\n&END\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("NORB"), "{err}");
    }

    #[test]
    fn unterminated_header_is_a_parse_error() {
        let err = parse_fcidump("&FCI NORB=2,NELEC=2,MS2=0,\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let err =
            parse_fcidump("&FCI NORB=2,NELEC=2,MS2=0,\n&END\n 1.0 3 1 0 0\n".as_bytes())
                .unwrap_err();
        assert!(matches!(err, NqsError::Range(_)), "{err}");
    }

    #[test]
    fn conflicting_duplicates_are_rejected() {
        let text = "&FCI NORB=2,NELEC=2,MS2=0,\n&END\n 0.67 1 2 1 2\n 0.68 2 1 2 1\n";
        let err = parse_fcidump(text.as_bytes()).unwrap_err();
        assert!(matches!(err, NqsError::Consistency(_)), "{err}");

        let agreeing = "&FCI NORB=2,NELEC=2,MS2=0,\n&END\n 0.67 1 2 1 2\n 0.67 2 1 2 1\n";
        assert!(parse_fcidump(agreeing.as_bytes()).is_ok());
    }

    #[test]
    fn round_trips_through_canonical_records() {
        let t = parse_fcidump(TINY.as_bytes()).unwrap();
        let text = t.to_canonical_records();
        let back = parse_fcidump(text.as_bytes()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn spin_counts_follow_ms2() {
        let t = parse_fcidump("&FCI NORB=3,NELEC=3,MS2=1,\n&END\n 0.0 0 0 0 0\n".as_bytes())
            .unwrap();
        assert_eq!(t.spin_counts(), (2, 1));
    }
}
