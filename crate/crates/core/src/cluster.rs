//! Virtual-rank cluster simulation: process-group construction,
//! synchronous collectives, and multi-stage density-aware workload
//! partitioning. Ranks execute round-robin in one process, so runs are
//! deterministic and the union of per-rank batches can be compared
//! exactly against a single-rank traversal.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::kvcache::CachePool;
use crate::sampler::{
    hybrid_complete, sample_layer, ExactSequenceModel, LayerTrace, SampleBatch, SampleTrace,
    SamplerConfig, SequenceModel,
};
use crate::{NqsError, Result};

/// Stagewise partition setting: at split layer `split_layers[i]` the
/// current batch is divided over `group_sizes[i]` ranks. The rank
/// count is the product of the group sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub group_sizes: Vec<usize>,
    pub split_layers: Vec<usize>,
}

impl PartitionPlan {
    /// The one-rank plan: a single trivial split at the root.
    pub fn single() -> Self {
        PartitionPlan { group_sizes: vec![1], split_layers: vec![0] }
    }

    pub fn n_ranks(&self) -> usize {
        self.group_sizes.iter().product()
    }

    pub fn validate(&self, k_orbitals: usize) -> Result<()> {
        if self.group_sizes.is_empty() {
            return Err(NqsError::Config("a partition plan needs at least one stage".into()));
        }
        if self.group_sizes.len() != self.split_layers.len() {
            return Err(NqsError::Config(format!(
                "{} group sizes for {} split layers",
                self.group_sizes.len(),
                self.split_layers.len()
            )));
        }
        if self.group_sizes.contains(&0) {
            return Err(NqsError::Config("group sizes must be positive".into()));
        }
        for pair in self.split_layers.windows(2) {
            if pair[1] <= pair[0] {
                return Err(NqsError::Config(format!(
                    "split layers must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&last) = self.split_layers.last() {
            if last >= k_orbitals {
                return Err(NqsError::Config(format!(
                    "split layer {last} out of range for {k_orbitals} orbital positions"
                )));
            }
        }
        Ok(())
    }
}

/// One rank's view of the group structure: per stage, the vertical
/// group it splits across and the horizontal group whose members hold
/// an identical slice once that split is done.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTopology {
    pub rank: usize,
    pub vert_groups: Vec<Vec<usize>>,
    pub horiz_groups: Vec<Vec<usize>>,
}

impl RankTopology {
    /// This rank's slot within its stage-`stage` vertical group, which
    /// selects the partition slice it keeps.
    pub fn vert_position(&self, stage: usize) -> usize {
        self.vert_groups[stage]
            .iter()
            .position(|&r| r == self.rank)
            .expect("topology always contains its own rank")
    }
}

/// Stagewise group construction over `world` ranks. At each stage the
/// enclosing group of size ws is tiled into blocks of s = ws / G_n[i]
/// consecutive ranks; the ranks at the same offset across blocks form
/// the vertical group, the rank's own block is the horizontal group,
/// and the construction recurses into that block. A world size other
/// than the product of the group sizes fails the stage division.
pub fn init_groups(rank: usize, world: usize, plan: &PartitionPlan) -> Result<RankTopology> {
    if rank >= world {
        return Err(NqsError::Range(format!("rank {rank} out of {world}")));
    }
    let mut enclosing: Vec<usize> = (0..world).collect();
    let mut vert_groups = Vec::with_capacity(plan.group_sizes.len());
    let mut horiz_groups = Vec::with_capacity(plan.group_sizes.len());
    for (stage, &g) in plan.group_sizes.iter().enumerate() {
        let ws = enclosing.len();
        if g == 0 || !ws.is_multiple_of(g) {
            return Err(NqsError::Config(format!(
                "stage {stage} group size {g} does not divide its enclosing group of {ws}"
            )));
        }
        let s = ws / g;
        let loc = enclosing
            .iter()
            .position(|&r| r == rank)
            .expect("rank stays inside its enclosing group");
        let vert: Vec<usize> = (0..g).map(|j| enclosing[loc % s + s * j]).collect();
        let block = loc / s;
        let horiz = enclosing[block * s..(block + 1) * s].to_vec();
        vert_groups.push(vert);
        horiz_groups.push(horiz.clone());
        enclosing = horiz;
    }
    Ok(RankTopology { rank, vert_groups, horiz_groups })
}

/// Unique-to-sample ratio measured on a rank's previous iteration,
/// used to predict how many unique prefixes a slice will fan out into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityState {
    pub d: f64,
}

impl Default for DensityState {
    fn default() -> Self {
        DensityState { d: 1.0 }
    }
}

impl DensityState {
    /// Record a finished iteration; an empty rank keeps its previous
    /// estimate.
    pub fn update(&mut self, unique: usize, sample_counts: u64) {
        if sample_counts > 0 {
            self.d = unique as f64 / sample_counts as f64;
        }
    }
}

/// Values of a synchronous collective in group order, after verifying
/// exact participation; a missing, foreign, or doubled caller would
/// hang a real job, so it surfaces as a deadlock error here.
fn group_values(contributions: &[(usize, f64)], group: &[usize]) -> Result<Vec<f64>> {
    let mut seen: HashMap<usize, f64> = HashMap::with_capacity(contributions.len());
    for &(rank, value) in contributions {
        if !group.contains(&rank) {
            return Err(NqsError::Consistency(format!(
                "collective deadlock: rank {rank} is not a group member"
            )));
        }
        if seen.insert(rank, value).is_some() {
            return Err(NqsError::Consistency(format!(
                "collective deadlock: rank {rank} joined twice"
            )));
        }
    }
    group
        .iter()
        .map(|member| {
            seen.get(member).copied().ok_or_else(|| {
                NqsError::Consistency(format!(
                    "collective deadlock: rank {member} never joined"
                ))
            })
        })
        .collect()
}

pub fn all_reduce_mean(contributions: &[(usize, f64)], group: &[usize]) -> Result<f64> {
    let values = group_values(contributions, group)?;
    if values.is_empty() {
        return Err(NqsError::Config("collective over an empty group".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn all_gather(contributions: &[(usize, f64)], group: &[usize]) -> Result<Vec<f64>> {
    group_values(contributions, group)
}

/// Contiguous assignment of a batch to group members, in group order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub ranges: Vec<Range<usize>>,
    /// True when some member received an empty slice.
    pub degenerate: bool,
}

impl Partition {
    fn from_cuts(cuts: &[usize]) -> Self {
        let ranges: Vec<Range<usize>> =
            cuts.windows(2).map(|pair| pair[0]..pair[1]).collect();
        let degenerate = ranges.iter().any(|r| r.is_empty());
        Partition { ranges, degenerate }
    }
}

/// Boundaries of a contiguous greedy partition: walking the weights,
/// segment j closes at the first element where the running total
/// reaches j times the ideal share.
fn prefix_cuts(weights: &[f64], parts: usize) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(NqsError::Numeric(format!("partition weights sum to {total}")));
    }
    let share = total / parts as f64;
    let mut cuts = Vec::with_capacity(parts + 1);
    cuts.push(0);
    let mut running = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        running += w;
        if cuts.len() < parts && running >= share * cuts.len() as f64 {
            cuts.push(i + 1);
        }
    }
    while cuts.len() < parts {
        cuts.push(weights.len());
    }
    cuts.push(weights.len());
    Ok(cuts)
}

fn check_split_args(batch: &SampleBatch, parts: usize) -> Result<()> {
    if parts == 0 {
        return Err(NqsError::Config("cannot partition into zero parts".into()));
    }
    if batch.is_empty() {
        return Err(NqsError::Consistency("cannot partition an empty batch".into()));
    }
    Ok(())
}

/// Two-pass density-aware split: a first partition of the raw counts
/// fixes provisional segments, each segment's weights are scaled by
/// its member's density estimate, and the scaled weights are
/// partitioned again to give the final slices.
pub fn partition_weighted(
    batch: &SampleBatch,
    densities: &[f64],
    parts: usize,
) -> Result<Partition> {
    check_split_args(batch, parts)?;
    if densities.len() != parts {
        return Err(NqsError::Dimension(format!(
            "{} density estimates for {parts} parts",
            densities.len()
        )));
    }
    for &d in densities {
        if !d.is_finite() || d <= 0.0 {
            return Err(NqsError::Numeric(format!("density estimate {d} out of range")));
        }
    }
    let mut weights: Vec<f64> = batch.counts.iter().map(|&c| c as f64).collect();
    let provisional = prefix_cuts(&weights, parts)?;
    for (j, &d) in densities.iter().enumerate() {
        for w in &mut weights[provisional[j]..provisional[j + 1]] {
            *w *= d;
        }
    }
    let cuts = prefix_cuts(&weights, parts)?;
    Ok(Partition::from_cuts(&cuts))
}

/// What a split balances: predicted unique work (count times density),
/// raw sample counts, or current unique prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    DensityAware,
    CountSplit,
    UniqueSplit,
}

pub fn partition_with_strategy(
    batch: &SampleBatch,
    densities: &[f64],
    parts: usize,
    strategy: SplitStrategy,
) -> Result<Partition> {
    match strategy {
        SplitStrategy::DensityAware => partition_weighted(batch, densities, parts),
        SplitStrategy::CountSplit => partition_weighted(batch, &vec![1.0; parts], parts),
        SplitStrategy::UniqueSplit => {
            check_split_args(batch, parts)?;
            let cuts = prefix_cuts(&vec![1.0; batch.len()], parts)?;
            Ok(Partition::from_cuts(&cuts))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub plan: PartitionPlan,
    pub sampler: SamplerConfig,
    pub strategy: SplitStrategy,
}

/// Everything one virtual rank produced in an iteration.
#[derive(Debug, Clone)]
pub struct RankRun {
    pub rank: usize,
    pub batch: SampleBatch,
    pub unique: usize,
    pub sample_counts: u64,
    /// Largest unique-prefix breadth carried through the staged phase,
    /// the quantity a late single split inflates.
    pub peak_pre_split_unique: usize,
    /// Density refreshed from this iteration, for the next one.
    pub density: DensityState,
    /// Trace of the completion run below the last split layer.
    pub trace: SampleTrace,
    /// Layer records of the staged phase, post-split totals included.
    pub bfs_layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub ranks: Vec<RankRun>,
    /// Logical split events that left at least one member empty.
    pub degenerate_splits: usize,
}

impl ClusterOutcome {
    /// Rank-order concatenation of the per-rank leaves; for a fixed
    /// seed this equals the single-rank batch row for row.
    pub fn union_batch(&self) -> SampleBatch {
        let depth = self.ranks.first().map_or(0, |run| run.batch.depth);
        let mut union = SampleBatch::empty(depth);
        for run in &self.ranks {
            union.prefixes.extend(run.batch.prefixes.iter().cloned());
            union.counts.extend(&run.batch.counts);
            union.logp.extend(&run.batch.logp);
        }
        union
    }
}

/// Per-rank, per-stage density lists via the two balancing
/// collectives: a horizontal mean followed by a vertical gather.
fn density_lists(
    topologies: &[RankTopology],
    densities: &[DensityState],
    n_stages: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_ranks = topologies.len();
    let mut lists = vec![Vec::with_capacity(n_stages); n_ranks];
    for stage in 0..n_stages {
        let mut avg = vec![0.0; n_ranks];
        for topo in topologies {
            let group = &topo.horiz_groups[stage];
            let contributions: Vec<(usize, f64)> =
                group.iter().map(|&m| (m, densities[m].d)).collect();
            avg[topo.rank] = all_reduce_mean(&contributions, group)?;
        }
        for topo in topologies {
            let group = &topo.vert_groups[stage];
            let contributions: Vec<(usize, f64)> =
                group.iter().map(|&m| (m, avg[m])).collect();
            lists[topo.rank].push(all_gather(&contributions, group)?);
        }
    }
    Ok(lists)
}

/// Run every virtual rank of the plan through one sampling iteration:
/// staged expansion from the root with a partition at each split
/// layer, then chunked completion of the kept slice. Splits select
/// contiguous slices in batch order, so concatenating the per-rank
/// results in rank order reproduces the single-rank run exactly.
pub fn run_parallel_sampling(
    model: &dyn SequenceModel,
    pool: &mut CachePool,
    cfg: &ClusterConfig,
    densities: &[DensityState],
) -> Result<ClusterOutcome> {
    let k_orbitals = model.max_sequence() - 1;
    cfg.plan.validate(k_orbitals)?;
    let n_ranks = cfg.plan.n_ranks();
    if densities.len() != n_ranks {
        return Err(NqsError::Dimension(format!(
            "{} density states for {n_ranks} ranks",
            densities.len()
        )));
    }
    let n_stages = cfg.plan.group_sizes.len();
    let topologies: Vec<RankTopology> =
        (0..n_ranks).map(|r| init_groups(r, n_ranks, &cfg.plan)).collect::<Result<_>>()?;
    let lists = density_lists(&topologies, densities, n_stages)?;

    let mut degenerate_splits = 0usize;
    let mut ranks = Vec::with_capacity(n_ranks);
    for topo in &topologies {
        let mut current = SampleBatch::root(cfg.sampler.n_count);
        let mut bfs_layers = Vec::new();
        let mut peak = current.len();
        let mut stage = 0;
        loop {
            while stage < n_stages && cfg.plan.split_layers[stage] == current.depth {
                let parts = cfg.plan.group_sizes[stage];
                let pos = topo.vert_position(stage);
                if current.is_empty() {
                    if pos == 0 {
                        degenerate_splits += 1;
                    }
                } else {
                    let partition = partition_with_strategy(
                        &current,
                        &lists[topo.rank][stage],
                        parts,
                        cfg.strategy,
                    )?;
                    if partition.degenerate && pos == 0 {
                        degenerate_splits += 1;
                        log::warn!(
                            "stage {stage} split of {} prefixes over {parts} ranks leaves \
                             some ranks idle",
                            current.len()
                        );
                    }
                    current = current.slice_rows(partition.ranges[pos].clone());
                }
                stage += 1;
            }
            if stage == n_stages {
                break;
            }
            if current.is_empty() {
                current = SampleBatch::empty(current.depth + 1);
            } else {
                let conditionals = model.layer_conditionals(&current.prefixes)?;
                current = sample_layer(
                    &current,
                    &conditionals,
                    cfg.sampler.seed,
                    cfg.sampler.iteration,
                )?
                .0;
            }
            peak = peak.max(current.len());
            bfs_layers.push(LayerTrace {
                depth: current.depth,
                unique: current.len(),
                total_count: current.total_count(),
            });
        }

        let (batch, trace) = hybrid_complete(model, pool, current, &cfg.sampler)?;
        let unique = batch.len();
        let sample_counts = batch.total_count();
        let mut density = densities[topo.rank];
        density.update(unique, sample_counts);
        ranks.push(RankRun {
            rank: topo.rank,
            batch,
            unique,
            sample_counts,
            peak_pre_split_unique: peak,
            density,
            trace,
            bfs_layers,
        });
    }
    Ok(ClusterOutcome { ranks, degenerate_splits })
}

/// Synthetic leaf distribution whose prefix mass decays fast while the
/// per-prefix unique-leaf yield decays slowly, so balancing counts,
/// balancing uniques, and balancing predicted work give clearly
/// different final loads.
pub fn skewed_tree(k_orbitals: usize) -> Result<ExactSequenceModel> {
    if k_orbitals < 4 {
        return Err(NqsError::Config(format!(
            "a skewed tree needs at least 4 orbital positions, got {k_orbitals}"
        )));
    }
    let n_prefix = 64usize;
    let completion_positions = k_orbitals - 3;
    let n_completion = 1usize << (2 * completion_positions.min(8));
    let mass: Vec<f64> = (0..n_prefix).map(|i| 0.9f64.powi(i as i32)).collect();
    let total: f64 = mass.iter().sum();
    let mut leaves = Vec::new();
    for (i, &m) in mass.iter().enumerate() {
        let support =
            ((251.0 * 0.945f64.powi(i as i32)).round() as usize).clamp(1, n_completion);
        let leaf_p = m / total / support as f64;
        for c in 0..support {
            let mut tokens = Vec::with_capacity(k_orbitals);
            tokens.push(((i >> 4) & 3) as u8);
            tokens.push(((i >> 2) & 3) as u8);
            tokens.push((i & 3) as u8);
            for pos in (0..completion_positions).rev() {
                tokens.push(((c >> (2 * pos)) & 3) as u8);
            }
            leaves.push((tokens, leaf_p));
        }
    }
    ExactSequenceModel::new(k_orbitals, &leaves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::hybrid_sample;
    use proptest::prelude::*;

    #[test]
    fn topology_matches_the_worked_example() {
        let plan = PartitionPlan { group_sizes: vec![2, 2, 3], split_layers: vec![6, 8, 10] };
        assert_eq!(plan.n_ranks(), 12);
        let topo = init_groups(0, 12, &plan).unwrap();
        assert_eq!(topo.vert_groups, vec![vec![0, 6], vec![0, 3], vec![0, 1, 2]]);
        assert_eq!(
            topo.horiz_groups,
            vec![vec![0, 1, 2, 3, 4, 5], vec![0, 1, 2], vec![0]]
        );
        for rank in 0..12 {
            let topo = init_groups(rank, 12, &plan).unwrap();
            for (stage, &g) in plan.group_sizes.iter().enumerate() {
                assert_eq!(topo.vert_groups[stage].len(), g);
            }
            assert_eq!(topo.horiz_groups.last().unwrap(), &vec![rank]);
        }
    }

    #[test]
    fn trivial_plan_keeps_the_single_rank_whole() {
        let plan = PartitionPlan { group_sizes: vec![1], split_layers: vec![0] };
        let topo = init_groups(0, 1, &plan).unwrap();
        assert_eq!(topo.vert_groups, vec![vec![0]]);
        assert_eq!(topo.horiz_groups, vec![vec![0]]);
    }

    #[test]
    fn mismatched_world_size_is_rejected() {
        let plan = PartitionPlan { group_sizes: vec![2, 2], split_layers: vec![1, 2] };
        assert!(init_groups(0, 4, &plan).is_ok());
        assert!(matches!(init_groups(0, 6, &plan), Err(NqsError::Config(_))));
        assert!(matches!(init_groups(0, 7, &plan), Err(NqsError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn groups_tile_the_ranks(sizes in proptest::collection::vec(1usize..=4, 1..=3)) {
            let split_layers: Vec<usize> = (0..sizes.len()).collect();
            let plan = PartitionPlan { group_sizes: sizes, split_layers };
            let n = plan.n_ranks();
            prop_assume!(n <= 64);
            let topos: Vec<RankTopology> =
                (0..n).map(|r| init_groups(r, n, &plan).unwrap()).collect();
            let mut expected_horiz = n;
            for stage in 0..plan.group_sizes.len() {
                expected_horiz /= plan.group_sizes[stage];
                for kind in 0..2 {
                    let mut groups: Vec<Vec<usize>> = Vec::new();
                    for topo in &topos {
                        let group = if kind == 0 {
                            &topo.horiz_groups[stage]
                        } else {
                            &topo.vert_groups[stage]
                        };
                        let expected = if kind == 0 {
                            expected_horiz
                        } else {
                            plan.group_sizes[stage]
                        };
                        prop_assert_eq!(group.len(), expected);
                        prop_assert!(group.contains(&topo.rank));
                        if !groups.contains(group) {
                            groups.push(group.clone());
                        }
                    }
                    let mut seen = vec![false; n];
                    for group in &groups {
                        for &member in group {
                            prop_assert!(!seen[member]);
                            seen[member] = true;
                        }
                    }
                    prop_assert!(seen.into_iter().all(|s| s));
                }
            }
        }
    }

    #[test]
    fn collectives_follow_group_order() {
        let group = vec![3, 1, 7];
        let ids: Vec<(usize, f64)> = group.iter().map(|&r| (r, r as f64)).collect();
        assert_eq!(all_gather(&ids, &group).unwrap(), vec![3.0, 1.0, 7.0]);
        let same = vec![(3, 0.2), (1, 0.2), (7, 0.2)];
        assert!((all_reduce_mean(&same, &group).unwrap() - 0.2).abs() < 1e-15);
        let pair = vec![(0, 0.5), (1, 1.0)];
        assert!((all_reduce_mean(&pair, &[0, 1]).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn partial_participation_deadlocks() {
        let err = all_reduce_mean(&[(0, 1.0)], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("deadlock"), "{err}");
        let err = all_gather(&[(0, 1.0), (2, 1.0)], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("deadlock"), "{err}");
        let err = all_gather(&[(0, 1.0), (0, 2.0)], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("deadlock"), "{err}");
    }

    fn batch_of(counts: &[u64]) -> SampleBatch {
        SampleBatch {
            prefixes: (0..counts.len()).map(|i| vec![i as u8 & 3]).collect(),
            counts: counts.to_vec(),
            logp: vec![0.0; counts.len()],
            depth: 1,
        }
    }

    #[test]
    fn symmetric_counts_split_evenly() {
        let batch = batch_of(&[4, 4, 4, 4]);
        let partition = partition_weighted(&batch, &[1.0, 1.0], 2).unwrap();
        assert_eq!(partition.ranges, vec![0..2, 2..4]);
        assert!(!partition.degenerate);
    }

    /// Max predicted work (slice counts times member density) over the
    /// members, the quantity the density-aware split balances.
    fn predicted_max(batch: &SampleBatch, densities: &[f64], cuts: &[usize]) -> f64 {
        densities
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                batch.counts[cuts[j]..cuts[j + 1]].iter().sum::<u64>() as f64 * d
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn density_scaling_achieves_the_best_contiguous_split() {
        let batch = batch_of(&[8, 8]);
        let densities = [1.0, 0.5];
        let partition = partition_weighted(&batch, &densities, 2).unwrap();
        assert_eq!(partition.ranges, vec![0..1, 1..2]);
        let achieved = predicted_max(
            &batch,
            &densities,
            &[partition.ranges[0].start, partition.ranges[1].start, partition.ranges[1].end],
        );
        let best = (0..=batch.len())
            .map(|cut| predicted_max(&batch, &densities, &[0, cut, batch.len()]))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(achieved, best);
    }

    #[test]
    fn one_part_keeps_the_whole_batch() {
        let batch = batch_of(&[3, 9, 1]);
        let partition = partition_weighted(&batch, &[0.7], 1).unwrap();
        assert_eq!(partition.ranges, vec![0..3]);
        assert!(!partition.degenerate);
    }

    #[test]
    fn more_parts_than_prefixes_degenerates() {
        let batch = batch_of(&[5]);
        let partition = partition_weighted(&batch, &[1.0, 1.0], 2).unwrap();
        assert_eq!(partition.ranges, vec![0..1, 1..1]);
        assert!(partition.degenerate);
    }

    #[test]
    fn strategies_weigh_different_quantities() {
        let batch = batch_of(&[10, 1, 1, 1, 1, 1]);
        let by_count =
            partition_with_strategy(&batch, &[1.0, 1.0], 2, SplitStrategy::CountSplit).unwrap();
        assert_eq!(by_count.ranges, vec![0..1, 1..6]);
        let by_unique =
            partition_with_strategy(&batch, &[1.0, 1.0], 2, SplitStrategy::UniqueSplit).unwrap();
        assert_eq!(by_unique.ranges, vec![0..3, 3..6]);
        let ones =
            partition_with_strategy(&batch, &[1.0, 1.0], 2, SplitStrategy::DensityAware).unwrap();
        assert_eq!(ones, by_count);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partitions_tile_the_batch(
            counts in proptest::collection::vec(1u64..50, 1..40),
            raw_densities in proptest::collection::vec(0.05f64..1.0, 1..6),
        ) {
            let batch = batch_of(&counts);
            let parts = raw_densities.len();
            let partition = partition_weighted(&batch, &raw_densities, parts).unwrap();
            prop_assert_eq!(partition.ranges.len(), parts);
            let mut next = 0;
            for range in &partition.ranges {
                prop_assert_eq!(range.start, next);
                next = range.end;
            }
            prop_assert_eq!(next, batch.len());
        }
    }

    /// Leaf distribution over the valid K=4, one-alpha one-beta
    /// strings with deterministic nonuniform weights.
    fn small_model() -> ExactSequenceModel {
        let mut leaves = Vec::new();
        let mut stack = vec![(Vec::<u8>::new(), 0usize, 0usize)];
        while let Some((prefix, a, b)) = stack.pop() {
            if prefix.len() == 4 {
                if a == 2 && b == 2 {
                    leaves.push(prefix);
                }
                continue;
            }
            for tok in 0..4u8 {
                let mut next = prefix.clone();
                next.push(tok);
                stack.push((next, a + (tok & 1) as usize, b + (tok >> 1) as usize));
            }
        }
        leaves.sort();
        let weights: Vec<f64> = (0..leaves.len()).map(|i| (i + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        let table: Vec<(Vec<u8>, f64)> = leaves
            .into_iter()
            .zip(weights)
            .map(|(tokens, w)| (tokens, w / total))
            .collect();
        ExactSequenceModel::new(4, &table).unwrap()
    }

    fn run_union(
        model: &ExactSequenceModel,
        plan: PartitionPlan,
        strategy: SplitStrategy,
        densities: &[DensityState],
        seed: u64,
        capacity: usize,
    ) -> ClusterOutcome {
        let sampler = SamplerConfig { n_count: 6000, chunk_k: capacity, seed, iteration: 1 };
        let cfg = ClusterConfig { plan, sampler, strategy };
        let mut pool = CachePool::new(1, capacity, model.max_sequence(), 2).unwrap();
        run_parallel_sampling(model, &mut pool, &cfg, densities).unwrap()
    }

    #[test]
    fn union_equals_the_single_rank_run() {
        let model = small_model();
        let plans = [
            PartitionPlan { group_sizes: vec![2], split_layers: vec![2] },
            PartitionPlan { group_sizes: vec![2, 2], split_layers: vec![2, 3] },
        ];
        for seed in [1, 2, 3] {
            let mut pool = CachePool::new(1, 16, 5, 2).unwrap();
            let cfg = SamplerConfig { n_count: 6000, chunk_k: 16, seed, iteration: 1 };
            let (single, _) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
            for plan in &plans {
                for strategy in [
                    SplitStrategy::DensityAware,
                    SplitStrategy::CountSplit,
                    SplitStrategy::UniqueSplit,
                ] {
                    let n = plan.n_ranks();
                    let densities: Vec<DensityState> = (0..n)
                        .map(|r| DensityState { d: 0.2 + 0.7 * r as f64 / n as f64 })
                        .collect();
                    let outcome =
                        run_union(&model, plan.clone(), strategy, &densities, seed, 16);
                    assert_eq!(outcome.union_batch(), single, "seed {seed} plan {plan:?}");
                }
            }
        }
    }

    #[test]
    fn single_rank_plan_matches_hybrid_sample() {
        let model = small_model();
        let mut pool = CachePool::new(1, 16, 5, 2).unwrap();
        let cfg = SamplerConfig { n_count: 6000, chunk_k: 16, seed: 11, iteration: 1 };
        let (single, _) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
        let outcome = run_union(
            &model,
            PartitionPlan::single(),
            SplitStrategy::DensityAware,
            &[DensityState::default()],
            11,
            16,
        );
        assert_eq!(outcome.ranks.len(), 1);
        assert_eq!(outcome.ranks[0].batch, single);
        assert_eq!(outcome.degenerate_splits, 0);
    }

    #[test]
    fn splitting_the_root_is_degenerate_but_exact() {
        let model = small_model();
        let mut pool = CachePool::new(1, 16, 5, 2).unwrap();
        let cfg = SamplerConfig { n_count: 6000, chunk_k: 16, seed: 4, iteration: 1 };
        let (single, _) = hybrid_sample(&model, &mut pool, &cfg).unwrap();
        let plan = PartitionPlan { group_sizes: vec![3], split_layers: vec![0] };
        let outcome = run_union(
            &model,
            plan,
            SplitStrategy::CountSplit,
            &[DensityState::default(); 3],
            4,
            16,
        );
        assert_eq!(outcome.degenerate_splits, 1);
        assert_eq!(outcome.union_batch(), single);
        assert_eq!(outcome.ranks[1].unique, 0);
        assert_eq!(outcome.ranks[2].unique, 0);
        assert_eq!(outcome.ranks[1].density.d, 1.0);
    }

    /// Sharing stage of a layer record: the last split applied at a
    /// depth strictly below it, if any.
    fn sharing_stage(plan: &PartitionPlan, depth: usize) -> Option<usize> {
        plan.split_layers.iter().rposition(|&l| l < depth)
    }

    #[test]
    fn counts_are_conserved_at_every_layer() {
        let model = small_model();
        let plan = PartitionPlan { group_sizes: vec![2, 2], split_layers: vec![1, 3] };
        let n_count = 10_000u64;
        let sampler = SamplerConfig { n_count, chunk_k: 64, seed: 9, iteration: 2 };
        let cfg = ClusterConfig {
            plan: plan.clone(),
            sampler,
            strategy: SplitStrategy::DensityAware,
        };
        let mut pool = CachePool::new(1, 64, 5, 2).unwrap();
        let densities = vec![DensityState::default(); 4];
        let outcome = run_parallel_sampling(&model, &mut pool, &cfg, &densities).unwrap();

        let mut per_depth: HashMap<usize, u64> = HashMap::new();
        for run in &outcome.ranks {
            let topo = init_groups(run.rank, plan.n_ranks(), &plan).unwrap();
            let layers = run
                .bfs_layers
                .iter()
                .chain(run.trace.layers.iter());
            for layer in layers {
                let representative = match sharing_stage(&plan, layer.depth) {
                    None => 0,
                    Some(stage) => topo.horiz_groups[stage][0],
                };
                if representative == run.rank {
                    *per_depth.entry(layer.depth).or_insert(0) += layer.total_count;
                }
            }
        }
        assert_eq!(per_depth.len(), 4);
        for (depth, total) in per_depth {
            assert_eq!(total, n_count, "depth {depth}");
        }
    }

    #[test]
    fn density_aware_beats_count_and_unique_splitting() {
        let model = skewed_tree(7).unwrap();
        let plan = PartitionPlan { group_sizes: vec![4], split_layers: vec![3] };
        let fresh = vec![DensityState::default(); 4];
        let mut pool = CachePool::new(1, 4096, model.max_sequence(), 2).unwrap();
        let mut run = |strategy: SplitStrategy, d: &[DensityState], iteration: u64| {
            let sampler =
                SamplerConfig { n_count: 50_000, chunk_k: 4096, seed: 7, iteration };
            let cfg = ClusterConfig { plan: plan.clone(), sampler, strategy };
            run_parallel_sampling(&model, &mut pool, &cfg, d).unwrap()
        };
        let first = run(SplitStrategy::CountSplit, &fresh, 1);
        let measured: Vec<DensityState> = first.ranks.iter().map(|r| r.density).collect();

        let max_unique = |outcome: &ClusterOutcome| {
            outcome.ranks.iter().map(|r| r.unique).max().unwrap()
        };
        let aware = max_unique(&run(SplitStrategy::DensityAware, &measured, 2));
        let by_count = max_unique(&run(SplitStrategy::CountSplit, &fresh, 2));
        let by_unique = max_unique(&run(SplitStrategy::UniqueSplit, &fresh, 2));
        assert!(
            aware < by_count && by_count < by_unique,
            "density {aware}, count {by_count}, unique {by_unique}"
        );
    }

    #[test]
    fn early_splits_cap_the_pre_split_breadth() {
        let model = skewed_tree(7).unwrap();
        let densities = vec![DensityState::default(); 4];
        let late = PartitionPlan { group_sizes: vec![4], split_layers: vec![5] };
        let staged = PartitionPlan { group_sizes: vec![2, 2], split_layers: vec![2, 5] };
        let peak = |plan: PartitionPlan| {
            let outcome =
                run_union(&model, plan, SplitStrategy::CountSplit, &densities, 3, 4096);
            outcome.ranks.iter().map(|r| r.peak_pre_split_unique).max().unwrap()
        };
        let one_stage = peak(late);
        let two_stage = peak(staged);
        assert!(two_stage < one_stage, "staged {two_stage}, single {one_stage}");
    }
}
