//! Autoregressive unique-sample generation over the occupation-token
//! quadtree: chemistry-informed pruning, multinomial child allocation,
//! and the memory-stable hybrid BFS/DFS traversal.
//!
//! Child draws are keyed by (seed, iteration, prefix bits) through the
//! counter-based stream, never by traversal order, so the final batch
//! is identical for every chunk threshold and across processes.

use serde::Serialize;
use std::collections::HashSet;

use crate::kvcache::{CachePool, RecomputeTicket};
use crate::onv::Onv;
use crate::rng::KeyedStream;
use crate::{NqsError, Result};

/// Unique sample prefixes at a common depth, with occurrence counts and
/// accumulated log-probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub prefixes: Vec<Vec<u8>>,
    pub counts: Vec<u64>,
    pub logp: Vec<f64>,
    pub depth: usize,
}

impl SampleBatch {
    /// The depth-0 batch: one empty prefix carrying the whole budget.
    pub fn root(n_count: u64) -> Self {
        SampleBatch {
            prefixes: vec![Vec::new()],
            counts: vec![n_count],
            logp: vec![0.0],
            depth: 0,
        }
    }

    pub fn empty(depth: usize) -> Self {
        SampleBatch { prefixes: Vec::new(), counts: Vec::new(), logp: Vec::new(), depth }
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Check the batch invariants: uniform depth, distinct prefixes,
    /// positive counts, and optionally a fixed total.
    pub fn validate(&self, expected_total: Option<u64>) -> Result<()> {
        if self.counts.len() != self.len() || self.logp.len() != self.len() {
            return Err(NqsError::Dimension("batch columns differ in length".into()));
        }
        let mut seen: HashSet<&[u8]> = HashSet::with_capacity(self.len());
        for (prefix, &count) in self.prefixes.iter().zip(&self.counts) {
            if prefix.len() != self.depth {
                return Err(NqsError::Consistency(format!(
                    "prefix of length {} in a depth-{} batch",
                    prefix.len(),
                    self.depth
                )));
            }
            if count == 0 {
                return Err(NqsError::Consistency("zero-count prefix retained".into()));
            }
            if !seen.insert(prefix) {
                return Err(NqsError::Consistency("duplicate prefix in batch".into()));
            }
        }
        if let Some(total) = expected_total {
            if self.total_count() != total {
                return Err(NqsError::Consistency(format!(
                    "batch holds {} samples, expected {total}",
                    self.total_count()
                )));
            }
        }
        Ok(())
    }

    /// Copy of the rows in `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> SampleBatch {
        SampleBatch {
            prefixes: self.prefixes[range.clone()].to_vec(),
            counts: self.counts[range.clone()].to_vec(),
            logp: self.logp[range].to_vec(),
            depth: self.depth,
        }
    }

    /// Decode each prefix as an orbital-occupation configuration.
    pub fn to_onvs(&self) -> Result<Vec<Onv>> {
        self.prefixes.iter().map(|p| Onv::from_tokens(p)).collect()
    }
}

/// Tokens that keep (n_alpha, n_beta) reachable: bit `t` of the result
/// allows token `t`, where the token's low bit adds an alpha electron
/// and the high bit a beta electron.
pub fn valid_mask(
    alpha_used: usize,
    beta_used: usize,
    t: usize,
    k_orbitals: usize,
    n_alpha: usize,
    n_beta: usize,
) -> u8 {
    debug_assert!(t < k_orbitals);
    let remaining = k_orbitals - t - 1;
    let mut mask = 0u8;
    for tok in 0..4u8 {
        let a = alpha_used + (tok & 1) as usize;
        let b = beta_used + (tok >> 1) as usize;
        if a <= n_alpha && b <= n_beta && n_alpha - a <= remaining && n_beta - b <= remaining
        {
            mask |= 1 << tok;
        }
    }
    mask
}

/// Prefix tokens packed two bits each, the key material that makes
/// child draws independent of traversal order.
fn prefix_words(prefix: &[u8]) -> [u64; 4] {
    debug_assert!(prefix.len() <= 128);
    let mut words = [0u64; 4];
    for (t, &tok) in prefix.iter().enumerate() {
        words[t / 32] |= (tok as u64 & 3) << (2 * (t % 32));
    }
    words
}

/// Split every prefix into children by a multinomial draw of its count
/// over the four token probabilities. Zero-count and zero-probability
/// children are dropped; children are emitted parent-major in token
/// order. Also returns the per-parent child multiplicities for the
/// cache expansion plan.
pub fn sample_layer(
    batch: &SampleBatch,
    conditionals: &[[f64; 4]],
    seed: u64,
    iteration: u64,
) -> Result<(SampleBatch, Vec<u32>)> {
    if conditionals.len() != batch.len() {
        return Err(NqsError::Dimension(format!(
            "{} conditional rows for {} prefixes",
            conditionals.len(),
            batch.len()
        )));
    }
    let mut children = SampleBatch::empty(batch.depth + 1);
    let mut multiplicities = Vec::with_capacity(batch.len());
    for (i, prefix) in batch.prefixes.iter().enumerate() {
        let probs = &conditionals[i];
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(NqsError::Numeric(format!(
                "conditional row {i} is not a distribution (sum {sum})"
            )));
        }
        let last_positive = (0..4).rev().find(|&t| probs[t] > 0.0).unwrap();

        let words = prefix_words(prefix);
        let mut rng = KeyedStream::from_parts(&[
            seed,
            iteration,
            batch.depth as u64,
            words[0],
            words[1],
            words[2],
            words[3],
        ]);
        let mut counts = [0u64; 4];
        for _ in 0..batch.counts[i] {
            let u = rng.next_f64();
            let mut cumulative = 0.0;
            let mut drawn = last_positive;
            for (t, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    cumulative += p;
                    if u < cumulative {
                        drawn = t;
                        break;
                    }
                }
            }
            counts[drawn] += 1;
        }

        let mut m = 0u32;
        for (t, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mut child = prefix.clone();
                child.push(t as u8);
                children.prefixes.push(child);
                children.counts.push(c);
                children.logp.push(batch.logp[i] + probs[t].ln());
                m += 1;
            }
        }
        multiplicities.push(m);
    }
    Ok((children, multiplicities))
}

/// The model interface the sampler drives: one incremental inference
/// step per layer against the cache pool.
///
/// Pool discipline: a row's position 0 holds the begin token and
/// position p > 0 holds input token p-1, so a row at prefix depth t has
/// valid length t. `step_conditionals` reads those t positions, appends
/// position t, and returns masked, renormalized next-token
/// distributions. `prefill` rebuilds rows 0..prefixes.len() from
/// scratch to valid length t.
pub trait SequenceModel {
    fn step_conditionals(
        &self,
        prefixes: &[Vec<u8>],
        pool: &mut CachePool,
    ) -> Result<Vec<[f64; 4]>>;

    /// Masked next-token distributions computed statelessly, no cache
    /// involved; agrees exactly with [`SequenceModel::step_conditionals`].
    fn layer_conditionals(&self, prefixes: &[Vec<u8>]) -> Result<Vec<[f64; 4]>>;

    fn prefill(&self, prefixes: &[Vec<u8>], pool: &mut CachePool) -> Result<()>;

    /// Sequence capacity: spatial orbital count plus the begin token.
    fn max_sequence(&self) -> usize;
}

/// A deferred chunk: the sample rows to resume plus the recompute
/// ticket for their cache rows.
pub struct DeferredChunk {
    pub batch: SampleBatch,
    pub ticket: RecomputeTicket,
}

/// Stack of deferred chunks awaiting depth-first descent.
#[derive(Default)]
pub struct DfsStack {
    entries: Vec<DeferredChunk>,
}

impl DfsStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: DeferredChunk) {
        self.entries.push(chunk);
    }

    pub fn pop(&mut self) -> Option<DeferredChunk> {
        self.entries.pop()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Total sample budget N.
    pub n_count: u64,
    /// Chunk threshold k; must equal the pool's row capacity.
    pub chunk_k: usize,
    pub seed: u64,
    /// Training iteration, part of the stream key so each step resamples.
    pub iteration: u64,
}

/// One per-step record of the traversal.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerTrace {
    pub depth: usize,
    pub unique: usize,
    pub total_count: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SampleTrace {
    pub layers: Vec<LayerTrace>,
    /// Depth at which the traversal first split into chunks.
    pub switch_depth: Option<usize>,
    /// Chunks driven to the leaves (1 when the tree fits in the pool).
    pub chunks: usize,
    pub peak_live_rows: usize,
}

/// Sample `n_count` configurations, breadth-first while the unique
/// count fits the pool and chunked depth-first beyond, returning the
/// union of leaf batches. The result is independent of `chunk_k`.
pub fn hybrid_sample(
    model: &dyn SequenceModel,
    pool: &mut CachePool,
    cfg: &SamplerConfig,
) -> Result<(SampleBatch, SampleTrace)> {
    let k_orbitals = model.max_sequence() - 1;
    if cfg.chunk_k == 0 || cfg.chunk_k != pool.capacity_rows() {
        return Err(NqsError::Config(format!(
            "chunk threshold {} must equal the pool capacity {}",
            cfg.chunk_k,
            pool.capacity_rows()
        )));
    }
    let mut trace = SampleTrace { chunks: 1, ..SampleTrace::default() };
    if cfg.n_count == 0 {
        return Ok((SampleBatch::empty(k_orbitals), trace));
    }

    let mut leaves: Vec<SampleBatch> = Vec::new();
    let mut stack = DfsStack::new();
    let mut current = SampleBatch::root(cfg.n_count);
    pool.reset(1)?;

    loop {
        let leaf =
            descend_to_leaves(model, pool, cfg, k_orbitals, current, &mut stack, &mut trace)?;
        leaves.push(leaf);

        match stack.pop() {
            Some(DeferredChunk { batch, ticket }) => {
                pool.restore(&ticket)?;
                model.prefill(&batch.prefixes, pool)?;
                current = batch;
            }
            None => break,
        }
    }

    let mut result = SampleBatch::empty(k_orbitals);
    for leaf in leaves {
        result.prefixes.extend(leaf.prefixes);
        result.counts.extend(leaf.counts);
        result.logp.extend(leaf.logp);
    }
    result.validate(Some(cfg.n_count))?;
    trace.peak_live_rows = pool.stats.peak_live_rows;
    Ok((result, trace))
}

/// Drive a common-depth batch the rest of the way to the leaves,
/// deferring overflow chunks onto the stack whenever a layer outgrows
/// the pool.
fn descend_to_leaves(
    model: &dyn SequenceModel,
    pool: &mut CachePool,
    cfg: &SamplerConfig,
    k_orbitals: usize,
    mut current: SampleBatch,
    stack: &mut DfsStack,
    trace: &mut SampleTrace,
) -> Result<SampleBatch> {
    while current.depth < k_orbitals {
        let conditionals = model.step_conditionals(&current.prefixes, pool)?;
        let (all_children, multiplicities) =
            sample_layer(&current, &conditionals, cfg.seed, cfg.iteration)?;
        let plan = pool.plan_expansion(&multiplicities)?;
        pool.apply_expansion(&plan)?;

        let kept = plan.new_live_rows;
        if all_children.len() > kept {
            trace.switch_depth.get_or_insert(all_children.depth);
            let mut hi = all_children.len();
            while hi > kept {
                let lo = kept.max(hi.saturating_sub(cfg.chunk_k));
                let chunk = all_children.slice_rows(lo..hi);
                let ticket =
                    pool.evict_and_mark(pool.live_rows()..pool.live_rows(), &chunk.prefixes)?;
                stack.push(DeferredChunk { batch: chunk, ticket });
                trace.chunks += 1;
                hi = lo;
            }
            current = all_children.slice_rows(0..kept);
        } else {
            current = all_children;
        }
        trace.layers.push(LayerTrace {
            depth: current.depth,
            unique: current.len(),
            total_count: current.total_count(),
        });
    }
    Ok(current)
}

/// Resume a traversal from an intermediate batch of common-depth
/// prefixes, driving it to the leaves with the same chunked
/// depth-first discipline as [`hybrid_sample`]. Restarting from a
/// contiguous slice of a layer reproduces the corresponding slice of
/// the uninterrupted run's leaves exactly, chunking included.
pub fn hybrid_complete(
    model: &dyn SequenceModel,
    pool: &mut CachePool,
    start: SampleBatch,
    cfg: &SamplerConfig,
) -> Result<(SampleBatch, SampleTrace)> {
    let k_orbitals = model.max_sequence() - 1;
    if cfg.chunk_k == 0 || cfg.chunk_k != pool.capacity_rows() {
        return Err(NqsError::Config(format!(
            "chunk threshold {} must equal the pool capacity {}",
            cfg.chunk_k,
            pool.capacity_rows()
        )));
    }
    if start.depth > k_orbitals {
        return Err(NqsError::Range(format!(
            "start depth {} exceeds the {k_orbitals} orbital positions",
            start.depth
        )));
    }
    start.validate(None)?;
    let total = start.total_count();
    let mut trace = SampleTrace::default();
    if start.is_empty() {
        return Ok((SampleBatch::empty(k_orbitals), trace));
    }

    let mut stack = DfsStack::new();
    pool.reset(0)?;
    if start.len() > cfg.chunk_k {
        trace.switch_depth = Some(start.depth);
    }
    let mut hi = start.len();
    while hi > 0 {
        let lo = hi.saturating_sub(cfg.chunk_k);
        let chunk = start.slice_rows(lo..hi);
        let ticket = pool.evict_and_mark(0..0, &chunk.prefixes)?;
        stack.push(DeferredChunk { batch: chunk, ticket });
        trace.chunks += 1;
        hi = lo;
    }

    let mut leaves: Vec<SampleBatch> = Vec::new();
    while let Some(DeferredChunk { batch, ticket }) = stack.pop() {
        pool.restore(&ticket)?;
        model.prefill(&batch.prefixes, pool)?;
        let leaf =
            descend_to_leaves(model, pool, cfg, k_orbitals, batch, &mut stack, &mut trace)?;
        leaves.push(leaf);
    }

    let mut result = SampleBatch::empty(k_orbitals);
    for leaf in leaves {
        result.prefixes.extend(leaf.prefixes);
        result.counts.extend(leaf.counts);
        result.logp.extend(leaf.logp);
    }
    result.validate(Some(total))?;
    trace.peak_live_rows = pool.stats.peak_live_rows;
    Ok((result, trace))
}

/// Reference model with conditionals read off an explicit leaf
/// distribution. Every step cross-checks the pool rows against the
/// deterministic K/V content it wrote earlier, so cache expansion or
/// recomputation bugs surface as errors in sampler tests.
pub struct ExactSequenceModel {
    k_orbitals: usize,
    /// (leaf tokens, |amplitude|^2), sorted by tokens; probabilities
    /// sum to 1.
    leaves: Vec<(Vec<u8>, f64)>,
}

impl ExactSequenceModel {
    pub fn new(k_orbitals: usize, leaf_p2: &[(Vec<u8>, f64)]) -> Result<Self> {
        let mut leaves = leaf_p2.to_vec();
        leaves.sort_by(|a, b| a.0.cmp(&b.0));
        let mut total = 0.0;
        for (tokens, p2) in &leaves {
            if tokens.len() != k_orbitals {
                return Err(NqsError::Dimension("leaf length differs from orbital count".into()));
            }
            if tokens.iter().any(|&t| t > 3) {
                return Err(NqsError::Range("leaf token out of vocabulary".into()));
            }
            if *p2 < 0.0 {
                return Err(NqsError::Numeric("negative leaf probability".into()));
            }
            total += p2;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(NqsError::Numeric(format!("leaf probabilities sum to {total}")));
        }
        for pair in leaves.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(NqsError::Consistency("duplicate leaf".into()));
            }
        }
        Ok(ExactSequenceModel { k_orbitals, leaves })
    }

    /// Probability mass of all leaves extending `prefix`, summed in
    /// sorted leaf order for run-to-run reproducibility. Leaves with a
    /// shared prefix form a contiguous run of the sorted list, located
    /// here by binary search.
    fn mass(&self, prefix: &[u8]) -> f64 {
        let lo = self
            .leaves
            .partition_point(|(tokens, _)| tokens.as_slice() < prefix);
        let span = self.leaves[lo..].partition_point(|(tokens, _)| tokens.starts_with(prefix));
        self.leaves[lo..lo + span].iter().map(|(_, p2)| p2).sum()
    }

    fn expected_kv(layer: usize, pos: usize, prefix: &[u8], d_model: usize) -> (Vec<f64>, Vec<f64>) {
        let words = prefix_words(&prefix[..pos]);
        let mut rng = KeyedStream::from_parts(&[
            0xE5AC,
            layer as u64,
            pos as u64,
            words[0],
            words[1],
            words[2],
            words[3],
        ]);
        let k = (0..d_model).map(|_| rng.next_f64()).collect();
        let v = (0..d_model).map(|_| rng.next_f64()).collect();
        (k, v)
    }

    fn append_position(
        prefixes: &[Vec<u8>],
        pos: usize,
        pool: &mut CachePool,
    ) -> Result<()> {
        let d = pool.d_model();
        let mut ks = Vec::with_capacity(pool.n_layers());
        let mut vs = Vec::with_capacity(pool.n_layers());
        for layer in 0..pool.n_layers() {
            let mut k_row = Vec::with_capacity(prefixes.len() * d);
            let mut v_row = Vec::with_capacity(prefixes.len() * d);
            for prefix in prefixes {
                let (k, v) = Self::expected_kv(layer, pos, prefix, d);
                k_row.extend(k);
                v_row.extend(v);
            }
            ks.push(k_row);
            vs.push(v_row);
        }
        pool.append(&ks, &vs)
    }

    fn verify_pool(&self, prefixes: &[Vec<u8>], pool: &CachePool) -> Result<()> {
        let d = pool.d_model();
        for (row, prefix) in prefixes.iter().enumerate() {
            if pool.valid_len(row) != prefix.len() {
                return Err(NqsError::Consistency(format!(
                    "row {row} holds {} positions for a depth-{} prefix",
                    pool.valid_len(row),
                    prefix.len()
                )));
            }
            for layer in 0..pool.n_layers() {
                let keys = pool.key_rows(layer, row);
                let values = pool.value_rows(layer, row);
                for pos in 0..prefix.len() {
                    let (k, v) = Self::expected_kv(layer, pos, prefix, d);
                    if keys[pos * d..(pos + 1) * d] != k[..]
                        || values[pos * d..(pos + 1) * d] != v[..]
                    {
                        return Err(NqsError::Consistency(format!(
                            "cache row {row} layer {layer} position {pos} does not match \
                             its prefix"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

impl SequenceModel for ExactSequenceModel {
    fn step_conditionals(
        &self,
        prefixes: &[Vec<u8>],
        pool: &mut CachePool,
    ) -> Result<Vec<[f64; 4]>> {
        if pool.live_rows() != prefixes.len() {
            return Err(NqsError::Dimension(format!(
                "{} live cache rows for {} prefixes",
                pool.live_rows(),
                prefixes.len()
            )));
        }
        self.verify_pool(prefixes, pool)?;
        let depth = prefixes.first().map_or(0, |p| p.len());
        Self::append_position(prefixes, depth, pool)?;
        self.layer_conditionals(prefixes)
    }

    fn layer_conditionals(&self, prefixes: &[Vec<u8>]) -> Result<Vec<[f64; 4]>> {
        let mut out = Vec::with_capacity(prefixes.len());
        let mut extended = Vec::new();
        for prefix in prefixes {
            let parent_mass = self.mass(prefix);
            if parent_mass <= 0.0 {
                return Err(NqsError::Consistency("prefix outside the leaf support".into()));
            }
            let mut row = [0.0; 4];
            for (tok, slot) in row.iter_mut().enumerate() {
                extended.clear();
                extended.extend_from_slice(prefix);
                extended.push(tok as u8);
                *slot = self.mass(&extended) / parent_mass;
            }
            out.push(row);
        }
        Ok(out)
    }

    fn prefill(&self, prefixes: &[Vec<u8>], pool: &mut CachePool) -> Result<()> {
        if pool.live_rows() != prefixes.len() {
            return Err(NqsError::Dimension(format!(
                "{} live cache rows for {} prefixes",
                pool.live_rows(),
                prefixes.len()
            )));
        }
        let depth = prefixes.first().map_or(0, |p| p.len());
        for pos in 0..depth {
            Self::append_position(prefixes, pos, pool)?;
        }
        Ok(())
    }

    fn max_sequence(&self) -> usize {
        self.k_orbitals + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// All valid token strings for (k, n_alpha, n_beta).
    fn valid_leaves(k: usize, n_alpha: usize, n_beta: usize) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let mut leaf = vec![0u8; k];
        #[allow(clippy::too_many_arguments)]
        fn rec(
            leaf: &mut Vec<u8>,
            t: usize,
            a: usize,
            b: usize,
            k: usize,
            na: usize,
            nb: usize,
            out: &mut Vec<Vec<u8>>,
        ) {
            if t == k {
                if a == na && b == nb {
                    out.push(leaf.clone());
                }
                return;
            }
            for tok in 0..4u8 {
                leaf[t] = tok;
                rec(leaf, t + 1, a + (tok & 1) as usize, b + (tok >> 1) as usize, k, na, nb, out);
            }
        }
        rec(&mut leaf, 0, 0, 0, k, n_alpha, n_beta, &mut out);
        out
    }

    fn random_model(k: usize, n_alpha: usize, n_beta: usize, seed: u64) -> ExactSequenceModel {
        let leaves = valid_leaves(k, n_alpha, n_beta);
        let mut rng = KeyedStream::from_parts(&[seed, 0xD157]);
        let raw: Vec<f64> = (0..leaves.len()).map(|_| 0.05 + rng.next_f64()).collect();
        let total: f64 = raw.iter().sum();
        let table: Vec<(Vec<u8>, f64)> =
            leaves.into_iter().zip(raw.iter().map(|w| w / total)).collect();
        ExactSequenceModel::new(k, &table).unwrap()
    }

    #[test]
    fn mask_forces_completion() {
        // one alpha and one beta still missing at the last position
        assert_eq!(valid_mask(1, 1, 3, 4, 2, 2), 0b1000);
        // alpha already full: tokens 1 and 3 forbidden
        assert_eq!(valid_mask(2, 1, 2, 4, 2, 2) & 0b1010, 0);
    }

    #[test]
    fn mask_reaches_exactly_the_valid_leaves() {
        let (k, na, nb) = (4, 2, 2);
        let mut reached = Vec::new();
        let mut stack = vec![(Vec::<u8>::new(), 0usize, 0usize)];
        while let Some((prefix, a, b)) = stack.pop() {
            if prefix.len() == k {
                reached.push(prefix);
                continue;
            }
            let mask = valid_mask(a, b, prefix.len(), k, na, nb);
            for tok in 0..4u8 {
                if mask >> tok & 1 == 1 {
                    let mut next = prefix.clone();
                    next.push(tok);
                    stack.push((next, a + (tok & 1) as usize, b + (tok >> 1) as usize));
                }
            }
        }
        reached.sort();
        assert_eq!(reached, valid_leaves(k, na, nb));
    }

    #[test]
    fn degenerate_distribution_yields_single_child() {
        let batch = SampleBatch::root(100);
        let (children, mult) =
            sample_layer(&batch, &[[1.0, 0.0, 0.0, 0.0]], 7, 0).unwrap();
        assert_eq!(children.prefixes, vec![vec![0u8]]);
        assert_eq!(children.counts, vec![100]);
        assert_eq!(mult, vec![1]);
    }

    #[test]
    fn layer_sampling_conserves_counts() {
        let mut rng = KeyedStream::from_parts(&[21]);
        let mut batch = SampleBatch::empty(2);
        let mut conditionals = Vec::new();
        for i in 0..16u8 {
            batch.prefixes.push(vec![i % 4, i / 4]);
            batch.counts.push(1 + rng.next_u64() % 500);
            batch.logp.push(0.0);
            let raw: Vec<f64> = (0..4).map(|_| rng.next_f64() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let mut row = [0.0; 4];
            for (slot, w) in row.iter_mut().zip(&raw) {
                *slot = w / sum;
            }
            conditionals.push(row);
        }
        let before = batch.total_count();
        let (children, mult) = sample_layer(&batch, &conditionals, 3, 11).unwrap();
        assert_eq!(children.total_count(), before);
        assert_eq!(mult.iter().map(|&m| m as usize).sum::<usize>(), children.len());
        children.validate(Some(before)).unwrap();
    }

    #[test]
    fn unnormalized_row_is_rejected() {
        let batch = SampleBatch::root(10);
        let err = sample_layer(&batch, &[[0.5, 0.2, 0.1, 0.1]], 0, 0).unwrap_err();
        assert!(matches!(err, NqsError::Numeric(_)));
    }

    #[test]
    fn repeated_runs_are_identical() {
        let model = random_model(3, 1, 1, 5);
        let run = || {
            let mut pool = CachePool::new(2, 64, 4, 3).unwrap();
            let cfg = SamplerConfig { n_count: 2000, chunk_k: 64, seed: 9, iteration: 4 };
            hybrid_sample(&model, &mut pool, &cfg).unwrap().0
        };
        assert_eq!(run(), run());
    }

    fn leaf_map(batch: &SampleBatch) -> HashMap<Vec<u8>, u64> {
        batch
            .prefixes
            .iter()
            .cloned()
            .zip(batch.counts.iter().copied())
            .collect()
    }

    #[test]
    fn chunk_threshold_does_not_change_the_result() {
        let model = random_model(4, 2, 2, 1);
        let mut reference = None;
        for chunk_k in [1usize, 4, 16, 64] {
            let mut pool = CachePool::new(2, chunk_k, 5, 3).unwrap();
            let cfg = SamplerConfig { n_count: 5000, chunk_k, seed: 42, iteration: 7 };
            let (batch, trace) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
            batch.validate(Some(5000)).unwrap();
            assert!(trace.peak_live_rows <= chunk_k);
            assert_eq!(
                pool.stats.recompute_events,
                trace.chunks as u64 - 1,
                "chunk_k {chunk_k}"
            );
            if chunk_k < 64 {
                assert!(trace.switch_depth.is_some());
            }
            let map = leaf_map(&batch);
            match &reference {
                None => reference = Some(map),
                Some(r) => assert_eq!(*r, map, "chunk_k {chunk_k}"),
            }
        }
    }

    #[test]
    fn leaves_satisfy_the_electron_count() {
        let model = random_model(4, 2, 2, 3);
        let mut pool = CachePool::new(1, 8, 5, 2).unwrap();
        let cfg = SamplerConfig { n_count: 1000, chunk_k: 8, seed: 1, iteration: 0 };
        let (batch, _) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
        for onv in batch.to_onvs().unwrap() {
            assert!(onv.is_physical(2, 2));
        }
    }

    #[test]
    fn empty_budget_yields_empty_batch() {
        let model = random_model(3, 1, 1, 4);
        let mut pool = CachePool::new(1, 4, 4, 2).unwrap();
        let cfg = SamplerConfig { n_count: 0, chunk_k: 4, seed: 0, iteration: 0 };
        let (batch, trace) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
        assert!(batch.is_empty());
        assert_eq!(batch.depth, 3);
        assert_eq!(trace.chunks, 1);
    }

    #[test]
    fn empirical_frequencies_match_the_distribution() {
        // chi-square over the four H2-sized leaves, df = 3; the 99.9th
        // percentile is 16.27
        let table: Vec<(Vec<u8>, f64)> = vec![
            (vec![0, 3], 0.4),
            (vec![3, 0], 0.3),
            (vec![1, 2], 0.2),
            (vec![2, 1], 0.1),
        ];
        let model = ExactSequenceModel::new(2, &table).unwrap();
        let mut pool = CachePool::new(1, 8, 3, 2).unwrap();
        let n = 1_000_000u64;
        let cfg = SamplerConfig { n_count: n, chunk_k: 8, seed: 1234, iteration: 0 };
        let (batch, _) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
        let map = leaf_map(&batch);
        let mut chi2 = 0.0;
        for (tokens, p) in &table {
            let observed = *map.get(tokens).unwrap_or(&0) as f64;
            let expected = *p * n as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        assert!(chi2 < 16.27, "chi-square {chi2} too large");
    }
}
