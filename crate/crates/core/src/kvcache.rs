//! Fixed-capacity key/value cache pool for autoregressive sampling.
//!
//! All cache memory is allocated once at construction; expansion of the
//! live rows happens in place through [`MovePlan`]s that copy the
//! minimum number of rows without ever reading a clobbered source. Rows
//! that fall outside the capacity are deferred to the sampler's DFS
//! stack and rebuilt later from their token prefixes
//! ([`RecomputeTicket`]).

use crate::{NqsError, Result};

/// Instrumentation counters, reset never, exported to the metrics sink.
#[derive(Debug, Default, Clone, Copy)]
pub struct PoolStats {
    /// Bytes physically copied by expansions.
    pub bytes_moved: u64,
    /// Restore events (one per DFS chunk rebuilt).
    pub recompute_events: u64,
    /// Rows rebuilt across all restore events.
    pub recompute_rows: u64,
    /// High-water mark of live rows.
    pub peak_live_rows: usize,
}

/// A block copy of `rows` cache rows. `src` and `dst` are the lowest
/// row of each range; ranges with `dst > src` are executed highest row
/// first so no source is read after being overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyRange {
    pub src: usize,
    pub dst: usize,
    pub rows: usize,
}

/// Lazy expansion plan: which rows stay put, which get copied where,
/// and where the child list is truncated by the capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct MovePlan {
    generation: u64,
    pub multiplicities: Vec<u32>,
    /// Length of the leading multiplicity-1 run that stays in place.
    pub keep_rows: usize,
    /// Copies in execution order: shrinking moves ascending by
    /// destination, then growing moves descending by destination.
    pub copies: Vec<CopyRange>,
    /// min(total_children, capacity); children at and beyond this index
    /// are deferred.
    pub new_live_rows: usize,
    pub total_children: usize,
}

/// Everything needed to rebuild evicted rows later: the token prefixes,
/// to be replayed through a full-prefix forward pass.
#[derive(Debug, Clone)]
pub struct RecomputeTicket {
    pub depth: usize,
    pub prefixes: Vec<Vec<u8>>,
}

/// Pre-allocated K/V storage: per layer, `capacity_rows` cache rows of
/// `max_sequence` positions of `d_model` numbers each.
pub struct CachePool {
    n_layers: usize,
    capacity_rows: usize,
    max_sequence: usize,
    d_model: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    live_rows: usize,
    valid_len: Vec<usize>,
    generation: u64,
    pub stats: PoolStats,
}

impl CachePool {
    pub fn new(
        n_layers: usize,
        capacity_rows: usize,
        max_sequence: usize,
        d_model: usize,
    ) -> Result<Self> {
        if n_layers == 0 || capacity_rows == 0 || max_sequence == 0 || d_model == 0 {
            return Err(NqsError::Config("cache pool dimensions must be positive".into()));
        }
        let words = n_layers * capacity_rows * max_sequence * d_model;
        Ok(CachePool {
            n_layers,
            capacity_rows,
            max_sequence,
            d_model,
            keys: vec![0.0; words],
            values: vec![0.0; words],
            live_rows: 0,
            valid_len: vec![0; capacity_rows],
            generation: 0,
            stats: PoolStats::default(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn capacity_rows(&self) -> usize {
        self.capacity_rows
    }

    pub fn max_sequence(&self) -> usize {
        self.max_sequence
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn live_rows(&self) -> usize {
        self.live_rows
    }

    pub fn valid_len(&self, row: usize) -> usize {
        assert!(row < self.live_rows, "row {row} not live");
        self.valid_len[row]
    }

    /// Total bytes held by the K/V buffers; constant after construction.
    pub fn allocated_bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f64>()
    }

    #[inline]
    fn offset(&self, layer: usize, row: usize) -> usize {
        (layer * self.capacity_rows + row) * self.max_sequence * self.d_model
    }

    /// Filled key region of a row: `valid_len(row) * d_model` numbers.
    pub fn key_rows(&self, layer: usize, row: usize) -> &[f64] {
        assert!(layer < self.n_layers && row < self.live_rows);
        let off = self.offset(layer, row);
        &self.keys[off..off + self.valid_len[row] * self.d_model]
    }

    /// Filled value region of a row.
    pub fn value_rows(&self, layer: usize, row: usize) -> &[f64] {
        assert!(layer < self.n_layers && row < self.live_rows);
        let off = self.offset(layer, row);
        &self.values[off..off + self.valid_len[row] * self.d_model]
    }

    /// Start a fresh sampling pass with `rows` empty live rows.
    pub fn reset(&mut self, rows: usize) -> Result<()> {
        if rows > self.capacity_rows {
            return Err(NqsError::Range(format!(
                "{rows} rows exceed pool capacity {}",
                self.capacity_rows
            )));
        }
        self.live_rows = rows;
        self.valid_len[..rows].fill(0);
        self.generation += 1;
        self.stats.peak_live_rows = self.stats.peak_live_rows.max(rows);
        Ok(())
    }

    /// Append one K/V pair per layer per live row at each row's current
    /// position. `keys[layer]` and `values[layer]` hold `live_rows`
    /// consecutive vectors of `d_model` numbers.
    pub fn append(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<()> {
        if self.live_rows == 0 {
            return Err(NqsError::Consistency("append to a pool with no live rows".into()));
        }
        if keys.len() != self.n_layers || values.len() != self.n_layers {
            return Err(NqsError::Dimension(format!(
                "append carries {} layers, pool has {}",
                keys.len(),
                self.n_layers
            )));
        }
        let want = self.live_rows * self.d_model;
        for (layer, (k, v)) in keys.iter().zip(values).enumerate() {
            if k.len() != want || v.len() != want {
                return Err(NqsError::Dimension(format!(
                    "layer {layer} append has {} numbers, expected {want}",
                    k.len()
                )));
            }
        }
        for row in 0..self.live_rows {
            if self.valid_len[row] >= self.max_sequence {
                return Err(NqsError::Range(format!(
                    "row {row} is full at {} positions",
                    self.max_sequence
                )));
            }
        }
        for layer in 0..self.n_layers {
            for row in 0..self.live_rows {
                let dst = self.offset(layer, row) + self.valid_len[row] * self.d_model;
                let src = row * self.d_model;
                self.keys[dst..dst + self.d_model]
                    .copy_from_slice(&keys[layer][src..src + self.d_model]);
                self.values[dst..dst + self.d_model]
                    .copy_from_slice(&values[layer][src..src + self.d_model]);
            }
        }
        for row in 0..self.live_rows {
            self.valid_len[row] += 1;
        }
        self.generation += 1;
        Ok(())
    }

    /// Plan the row layout after each live row splits into
    /// `multiplicities[row]` children (0 = pruned), children enumerated
    /// parent-major. Pure: does not touch the pool.
    pub fn plan_expansion(&self, multiplicities: &[u32]) -> Result<MovePlan> {
        if multiplicities.len() != self.live_rows {
            return Err(NqsError::Dimension(format!(
                "expansion covers {} rows but {} are live",
                multiplicities.len(),
                self.live_rows
            )));
        }
        if let Some(&m) = multiplicities.iter().find(|&&m| m > 4) {
            return Err(NqsError::Range(format!(
                "child multiplicity {m} exceeds the 4-token fanout"
            )));
        }
        let total: usize = multiplicities.iter().map(|&m| m as usize).sum();
        let new_live = total.min(self.capacity_rows);

        let mut keep_rows = 0;
        while keep_rows < new_live && multiplicities[keep_rows] == 1 {
            keep_rows += 1;
        }

        // classify each non-identity child copy by shift direction
        let mut shrink: Vec<(usize, usize)> = Vec::new();
        let mut grow: Vec<(usize, usize)> = Vec::new();
        let mut child = 0usize;
        'assign: for (parent, &m) in multiplicities.iter().enumerate() {
            for _ in 0..m {
                if child == new_live {
                    break 'assign;
                }
                if child < parent {
                    shrink.push((parent, child));
                } else if child > parent {
                    grow.push((parent, child));
                }
                child += 1;
            }
        }
        grow.reverse();
        let mut copies = coalesce(&shrink, 1);
        copies.extend(coalesce(&grow, -1));
        Ok(MovePlan {
            generation: self.generation,
            multiplicities: multiplicities.to_vec(),
            keep_rows,
            copies,
            new_live_rows: new_live,
            total_children: total,
        })
    }

    /// Execute a plan made against the current pool state.
    pub fn apply_expansion(&mut self, plan: &MovePlan) -> Result<()> {
        if plan.generation != self.generation {
            return Err(NqsError::Consistency(
                "expansion plan is stale: pool changed since planning".into(),
            ));
        }
        let old_valid = self.valid_len.clone();
        for range in &plan.copies {
            let descending = range.dst > range.src;
            for step in 0..range.rows {
                let i = if descending { range.rows - 1 - step } else { step };
                let (src, dst) = (range.src + i, range.dst + i);
                let words = old_valid[src] * self.d_model;
                for layer in 0..self.n_layers {
                    let s = self.offset(layer, src);
                    let d = self.offset(layer, dst);
                    self.keys.copy_within(s..s + words, d);
                    self.values.copy_within(s..s + words, d);
                }
                self.stats.bytes_moved +=
                    (2 * self.n_layers * words * std::mem::size_of::<f64>()) as u64;
            }
        }
        let mut child = 0usize;
        'lens: for (parent, &m) in plan.multiplicities.iter().enumerate() {
            for _ in 0..m {
                if child == plan.new_live_rows {
                    break 'lens;
                }
                self.valid_len[child] = old_valid[parent];
                child += 1;
            }
        }
        self.live_rows = plan.new_live_rows;
        self.generation += 1;
        self.stats.peak_live_rows = self.stats.peak_live_rows.max(self.live_rows);
        Ok(())
    }

    /// Free a suffix of the live rows and record the token prefixes a
    /// later [`CachePool::restore`] will need. The range may be empty
    /// when the deferred rows were never materialized.
    pub fn evict_and_mark(
        &mut self,
        rows: std::ops::Range<usize>,
        prefixes: &[Vec<u8>],
    ) -> Result<RecomputeTicket> {
        if rows.end != self.live_rows || rows.start > rows.end {
            return Err(NqsError::Range(format!(
                "eviction {}..{} is not a suffix of the {} live rows",
                rows.start, rows.end, self.live_rows
            )));
        }
        let depth = prefixes.first().map_or(0, |p| p.len());
        if prefixes.iter().any(|p| p.len() != depth) {
            return Err(NqsError::Dimension("ticket prefixes must share one depth".into()));
        }
        self.live_rows = rows.start;
        self.generation += 1;
        Ok(RecomputeTicket { depth, prefixes: prefixes.to_vec() })
    }

    /// Reopen rows for a deferred chunk; the caller then replays the
    /// ticket's prefixes through the model to refill them.
    pub fn restore(&mut self, ticket: &RecomputeTicket) -> Result<()> {
        let rows = ticket.prefixes.len();
        if rows > self.capacity_rows {
            return Err(NqsError::Range(format!(
                "ticket holds {rows} rows, pool capacity is {}",
                self.capacity_rows
            )));
        }
        self.live_rows = rows;
        self.valid_len[..rows].fill(0);
        self.generation += 1;
        self.stats.recompute_events += 1;
        self.stats.recompute_rows += rows as u64;
        self.stats.peak_live_rows = self.stats.peak_live_rows.max(rows);
        Ok(())
    }
}

/// Merge consecutive copies whose src and dst both advance by `step`
/// into block ranges, recording each range by its lowest row.
fn coalesce(pairs: &[(usize, usize)], step: isize) -> Vec<CopyRange> {
    let mut out: Vec<CopyRange> = Vec::new();
    let mut run: Option<(usize, usize, usize, usize)> = None; // (src0, dst0, last_src, rows)
    for &(src, dst) in pairs {
        run = match run {
            Some((s0, d0, last, rows))
                if src as isize == last as isize + step
                    && dst as isize
                        == (d0 as isize + if step > 0 { rows as isize } else { -1 }) =>
            {
                if step > 0 {
                    Some((s0, d0, src, rows + 1))
                } else {
                    Some((src, dst, src, rows + 1))
                }
            }
            Some(prev) => {
                out.push(CopyRange { src: prev.0, dst: prev.1, rows: prev.3 });
                Some((src, dst, src, 1))
            }
            None => Some((src, dst, src, 1)),
        };
    }
    if let Some((s0, d0, _, rows)) = run {
        out.push(CopyRange { src: s0, dst: d0, rows });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedStream;

    fn pool(layers: usize, cap: usize, seq: usize, d: usize) -> CachePool {
        CachePool::new(layers, cap, seq, d).unwrap()
    }

    /// Deterministic per-origin-row content so moves can be traced.
    fn pattern(layer: usize, row: usize, pos: usize, i: usize, shift: f64) -> f64 {
        (((layer * 31 + row) * 31 + pos) * 31 + i) as f64 + shift
    }

    fn fill(p: &mut CachePool, rows: usize, positions: usize) {
        p.reset(rows).unwrap();
        for pos in 0..positions {
            let ks: Vec<Vec<f64>> = (0..p.n_layers())
                .map(|l| {
                    (0..rows * p.d_model())
                        .map(|j| pattern(l, j / p.d_model(), pos, j % p.d_model(), 0.0))
                        .collect()
                })
                .collect();
            let vs: Vec<Vec<f64>> = (0..p.n_layers())
                .map(|l| {
                    (0..rows * p.d_model())
                        .map(|j| pattern(l, j / p.d_model(), pos, j % p.d_model(), 0.5))
                        .collect()
                })
                .collect();
            p.append(&ks, &vs).unwrap();
        }
    }

    /// Parent of each surviving child row under truncation at `cap`.
    fn naive_parents(mult: &[u32], cap: usize) -> Vec<usize> {
        let mut out = Vec::new();
        'outer: for (parent, &m) in mult.iter().enumerate() {
            for _ in 0..m {
                if out.len() == cap {
                    break 'outer;
                }
                out.push(parent);
            }
        }
        out
    }

    fn check_layout(p: &CachePool, parents: &[usize], positions: usize) {
        assert_eq!(p.live_rows(), parents.len());
        for (row, &parent) in parents.iter().enumerate() {
            assert_eq!(p.valid_len(row), positions);
            for layer in 0..p.n_layers() {
                let k = p.key_rows(layer, row);
                let v = p.value_rows(layer, row);
                for pos in 0..positions {
                    for i in 0..p.d_model() {
                        let j = pos * p.d_model() + i;
                        assert_eq!(k[j], pattern(layer, parent, pos, i, 0.0));
                        assert_eq!(v[j], pattern(layer, parent, pos, i, 0.5));
                    }
                }
            }
        }
    }

    #[test]
    fn append_advances_and_bounds() {
        let mut p = pool(2, 4, 3, 2);
        let ks = vec![vec![0.0; 4]; 2];
        assert!(matches!(p.append(&ks, &ks), Err(NqsError::Consistency(_))));
        p.reset(2).unwrap();
        for _ in 0..3 {
            p.append(&ks, &ks).unwrap();
        }
        assert_eq!(p.valid_len(0), 3);
        assert_eq!(p.valid_len(1), 3);
        assert!(matches!(p.append(&ks, &ks), Err(NqsError::Range(_))));
    }

    #[test]
    fn appended_rows_read_back() {
        let mut p = pool(2, 4, 3, 2);
        fill(&mut p, 3, 2);
        check_layout(&p, &[0, 1, 2], 2);
    }

    #[test]
    fn identity_plan_moves_nothing() {
        let mut p = pool(2, 4, 3, 2);
        fill(&mut p, 3, 2);
        let plan = p.plan_expansion(&[1, 1, 1]).unwrap();
        assert_eq!(plan.keep_rows, 3);
        assert!(plan.copies.is_empty());
        p.apply_expansion(&plan).unwrap();
        assert_eq!(p.stats.bytes_moved, 0);
        check_layout(&p, &[0, 1, 2], 2);
    }

    #[test]
    fn leading_run_kept_and_tail_duplicated() {
        let mut p = pool(2, 4, 3, 2);
        fill(&mut p, 3, 2);
        let plan = p.plan_expansion(&[1, 1, 2]).unwrap();
        assert_eq!(plan.keep_rows, 2);
        assert_eq!(plan.copies, vec![CopyRange { src: 2, dst: 3, rows: 1 }]);
        p.apply_expansion(&plan).unwrap();
        check_layout(&p, &[0, 1, 2, 2], 2);
    }

    #[test]
    fn saturated_plan_truncates_at_capacity() {
        let mut p = pool(1, 4, 2, 2);
        fill(&mut p, 4, 1);
        let plan = p.plan_expansion(&[4, 4, 4, 4]).unwrap();
        assert_eq!(plan.new_live_rows, 4);
        assert_eq!(plan.total_children, 16);
        p.apply_expansion(&plan).unwrap();
        check_layout(&p, &[0, 0, 0, 0], 1);
    }

    #[test]
    fn stale_plan_rejected() {
        let mut p = pool(1, 4, 3, 2);
        fill(&mut p, 2, 1);
        let plan = p.plan_expansion(&[1, 2]).unwrap();
        let ks = vec![vec![0.0; 4]; 1];
        p.append(&ks, &ks).unwrap();
        assert!(matches!(p.apply_expansion(&plan), Err(NqsError::Consistency(_))));
    }

    #[test]
    fn plan_is_deterministic() {
        let mut p = pool(1, 8, 2, 2);
        fill(&mut p, 5, 1);
        let mult = [0, 3, 1, 0, 2];
        assert_eq!(p.plan_expansion(&mult).unwrap(), p.plan_expansion(&mult).unwrap());
    }

    #[test]
    fn oversized_multiplicity_rejected() {
        let mut p = pool(1, 4, 2, 2);
        fill(&mut p, 1, 1);
        assert!(matches!(p.plan_expansion(&[5]), Err(NqsError::Range(_))));
        assert!(matches!(p.plan_expansion(&[1, 1]), Err(NqsError::Dimension(_))));
    }

    #[test]
    fn evict_suffix_then_restore() {
        let mut p = pool(1, 4, 3, 2);
        fill(&mut p, 4, 2);
        let prefixes = vec![vec![0u8, 1], vec![2u8, 3]];
        let ticket = p.evict_and_mark(2..4, &prefixes).unwrap();
        assert_eq!(p.live_rows(), 2);
        assert_eq!(ticket.depth, 2);
        assert!(matches!(p.evict_and_mark(3..4, &[]), Err(NqsError::Range(_))));

        p.restore(&ticket).unwrap();
        assert_eq!(p.live_rows(), 2);
        assert_eq!(p.valid_len(0), 0);
        assert_eq!(p.stats.recompute_events, 1);
        assert_eq!(p.stats.recompute_rows, 2);
    }

    #[test]
    fn evict_everything_empties_pool() {
        let mut p = pool(1, 4, 3, 2);
        fill(&mut p, 3, 1);
        p.evict_and_mark(0..3, &[vec![0], vec![1], vec![2]]).unwrap();
        assert_eq!(p.live_rows(), 0);
    }

    #[test]
    fn buffers_never_reallocate() {
        let mut p = pool(2, 8, 4, 4);
        let before = (p.keys.as_ptr(), p.keys.capacity(), p.allocated_bytes());
        fill(&mut p, 6, 3);
        let plan = p.plan_expansion(&[2, 0, 1, 3, 0, 2]).unwrap();
        p.apply_expansion(&plan).unwrap();
        let t = p.evict_and_mark(p.live_rows()..p.live_rows(), &[vec![0, 0, 0]]).unwrap();
        p.restore(&t).unwrap();
        assert_eq!(before, (p.keys.as_ptr(), p.keys.capacity(), p.allocated_bytes()));
    }

    #[test]
    fn fuzz_matches_naive_gather() {
        let mut rng = KeyedStream::from_parts(&[0xCAC4E, 0]);
        for case in 0..1000u64 {
            let cap = 64;
            let rows = 1 + (rng.next_u64() % cap as u64) as usize;
            let positions = 1 + (rng.next_u64() % 3) as usize;
            let mult: Vec<u32> =
                (0..rows).map(|_| (rng.next_u64() % 5) as u32).collect();

            let mut p = pool(2, cap, 4, 3);
            fill(&mut p, rows, positions);
            let moved_before = p.stats.bytes_moved;
            let plan = p.plan_expansion(&mult).unwrap();
            p.apply_expansion(&plan).unwrap();

            let parents = naive_parents(&mult, cap);
            assert_eq!(plan.new_live_rows, parents.len(), "case {case}");
            check_layout(&p, &parents, positions);

            let row_bytes = (2 * p.n_layers() * positions * p.d_model() * 8) as u64;
            let naive_bytes = parents.len() as u64 * row_bytes;
            assert!(
                p.stats.bytes_moved - moved_before <= naive_bytes,
                "case {case}: moved more than a naive gather"
            );
        }
    }
}
