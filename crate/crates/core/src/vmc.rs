//! Variational Monte Carlo training: cluster-sampled batches, local
//! energies, stochastic energy gradients, and AdamW updates on a
//! warmup-then-decay learning-rate schedule.

use std::io::{Read, Write};
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ansatz::{tensor_kind, Ansatz, ParameterSet, TensorKind};
use crate::cluster::{
    run_parallel_sampling, ClusterConfig, DensityState, PartitionPlan, SplitStrategy,
};
use crate::eloc::{local_energy_batch, ElocMode, LocalEnergyReport};
use crate::integrals::IntegralTable;
use crate::kvcache::CachePool;
use crate::sampler::{SampleBatch, SamplerConfig};
use crate::{NqsError, Result};

const TRAIN_MAGIC: &[u8] = b"NQSTRAIN1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total sample budget per iteration.
    pub n_count: u64,
    /// Chunk threshold and cache-pool row capacity.
    pub chunk_k: usize,
    pub iterations: u64,
    pub n_warmup: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub eloc_mode: ElocMode,
    pub plan: PartitionPlan,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_count: 10_000,
            chunk_k: 4096,
            iterations: 2000,
            n_warmup: 2000,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            eloc_mode: ElocMode::SampleSpace,
            plan: PartitionPlan::single(),
            strategy: SplitStrategy::DensityAware,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k_orbitals: usize) -> Result<()> {
        if self.n_count == 0 {
            return Err(NqsError::Config("n_count must be at least 1".into()));
        }
        if self.n_warmup == 0 {
            return Err(NqsError::Config("n_warmup must be at least 1".into()));
        }
        if self.chunk_k == 0 {
            return Err(NqsError::Config("chunk_k must be at least 1".into()));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale > 0.0) {
            return Err(NqsError::Config(format!("lr_scale {} out of range", self.lr_scale)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(NqsError::Config(format!("{name} {beta} outside [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(NqsError::Config(format!("epsilon {} out of range", self.epsilon)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(NqsError::Config(format!(
                "weight_decay {} out of range",
                self.weight_decay
            )));
        }
        self.plan.validate(k_orbitals)
    }
}

/// Learning rate at step t:
/// lr_scale * d_model^{-1/2} * min((t+1)^{-1/2}, t * n_warmup^{-3/2}),
/// rising over the warmup steps and decaying as t^{-1/2} beyond.
pub fn lr_schedule(t: u64, d_model: usize, n_warmup: u64, lr_scale: f64) -> f64 {
    let t = t as f64;
    let warmup = n_warmup as f64;
    let base = (d_model as f64).powf(-0.5);
    lr_scale * base * (t + 1.0).powf(-0.5).min(t * warmup.powf(-1.5))
}

/// AdamW with decoupled weight decay applied to plain weight tensors
/// only; layer-norm gains and biases are never decayed.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decayed: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParameterSet, config: &TrainConfig) -> Self {
        let mut decayed = vec![false; params.len()];
        for spec in params.specs() {
            if tensor_kind(&spec.name) == TensorKind::Weight {
                let len: usize = spec.shape.iter().product();
                decayed[spec.offset..spec.offset + len].fill(true);
            }
        }
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
            decayed,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(NqsError::Dimension(format!(
                "optimizer state for {} parameters applied to {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.data.len() {
            let g = params.grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            let mut update = m_hat / (v_hat.sqrt() + self.epsilon);
            if self.decayed[i] {
                update += self.weight_decay * params.data[i];
            }
            params.data[i] -= lr * update;
        }
        Ok(())
    }
}

/// Sample-weighted energy mean and variance:
/// mean = sum_u (count_u / N) E_loc(u), variance the matching weighted
/// second moment of |E_loc - mean|^2. The physical energy is Re(mean).
pub fn energy_estimate(
    batch: &SampleBatch,
    report: &LocalEnergyReport,
) -> Result<(Complex64, f64)> {
    if batch.len() != report.e_loc.len() {
        return Err(NqsError::Dimension(format!(
            "{} local energies for {} samples",
            report.e_loc.len(),
            batch.len()
        )));
    }
    let total = batch.total_count();
    if total == 0 {
        return Err(NqsError::Config("energy estimate over zero samples".into()));
    }
    let n = total as f64;
    let mut mean = Complex64::new(0.0, 0.0);
    for (&count, &e) in batch.counts.iter().zip(&report.e_loc) {
        mean += (count as f64 / n) * e;
    }
    let mut variance = 0.0;
    for (&count, &e) in batch.counts.iter().zip(&report.e_loc) {
        variance += (count as f64 / n) * (e - mean).norm_sqr();
    }
    Ok((mean, variance))
}

/// Assemble the energy gradient into the ansatz gradient slots via the
/// weighted backward pass: each sample carries the centered weight
/// w_u = (count_u / N) (E_loc(u) - mean), so the accumulated objective
/// 2 Re[sum_u w_u ln Psi*(u)] differentiates to the energy gradient.
pub fn gradient_assemble(
    batch: &SampleBatch,
    report: &LocalEnergyReport,
    mean: Complex64,
    ansatz: &mut Ansatz,
) -> Result<()> {
    if batch.len() != report.e_loc.len() {
        return Err(NqsError::Dimension(format!(
            "{} local energies for {} samples",
            report.e_loc.len(),
            batch.len()
        )));
    }
    let total = batch.total_count();
    if total == 0 {
        return Err(NqsError::Config("gradient over zero samples".into()));
    }
    let n = total as f64;
    let weights: Vec<Complex64> = batch
        .counts
        .iter()
        .zip(&report.e_loc)
        .map(|(&count, &e)| (count as f64 / n) * (e - mean))
        .collect();
    ansatz.backward(batch, &weights)
}

/// One line of the training log. Wall-clock fields are grouped at the
/// end; everything before them is deterministic for a fixed seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub energy: f64,
    pub energy_imag: f64,
    pub variance: f64,
    pub lr: f64,
    pub n_count: u64,
    pub unique_total: usize,
    pub unique_per_rank: Vec<usize>,
    pub max_rank_unique: usize,
    pub min_rank_unique: usize,
    pub degenerate_splits: usize,
    pub psi_evaluations: usize,
    pub matrix_elements: usize,
    pub recompute_events: u64,
    pub bytes_moved: u64,
    pub sampling_seconds: f64,
    pub energy_seconds: f64,
    pub lut_build_seconds: f64,
    pub step_seconds: f64,
}

/// Header of the trainer block appended after the ansatz checkpoint.
#[derive(Serialize, Deserialize)]
struct TrainerHeader {
    config: TrainConfig,
    iteration: u64,
    opt_t: u64,
    densities: Vec<f64>,
}

/// The training loop state: ansatz, optimizer, per-rank densities, and
/// the iteration counter. Checkpoints capture all of it, so a resumed
/// run continues the interrupted trajectory bit for bit.
pub struct Trainer {
    pub config: TrainConfig,
    pub ansatz: Ansatz,
    pub densities: Vec<DensityState>,
    pub iteration: u64,
    optimizer: AdamW,
    pool: CachePool,
}

impl Trainer {
    pub fn new(config: TrainConfig, ansatz: Ansatz) -> Result<Self> {
        config.validate(ansatz.k_orbitals())?;
        let optimizer = AdamW::new(ansatz.parameters(), &config);
        let densities = vec![DensityState::default(); config.plan.n_ranks()];
        let pool = Self::build_pool(&config, &ansatz)?;
        Ok(Trainer { config, ansatz, densities, iteration: 0, optimizer, pool })
    }

    fn build_pool(config: &TrainConfig, ansatz: &Ansatz) -> Result<CachePool> {
        let model = ansatz.config();
        CachePool::new(model.n_layers, config.chunk_k, model.max_sequence, model.d_model)
    }

    /// One training iteration: sample, evaluate local energies, form
    /// the energy estimate and gradient, and apply an optimizer step.
    pub fn step(&mut self, table: &IntegralTable) -> Result<IterationMetrics> {
        let step_start = Instant::now();
        let iteration = self.iteration + 1;
        let cluster_cfg = ClusterConfig {
            plan: self.config.plan.clone(),
            sampler: SamplerConfig {
                n_count: self.config.n_count,
                chunk_k: self.config.chunk_k,
                seed: self.config.seed,
                iteration,
            },
            strategy: self.config.strategy,
        };
        let moved_before = self.pool.stats.bytes_moved;
        let recompute_before = self.pool.stats.recompute_events;

        let sample_start = Instant::now();
        let outcome =
            run_parallel_sampling(&self.ansatz, &mut self.pool, &cluster_cfg, &self.densities)?;
        let sampling_seconds = sample_start.elapsed().as_secs_f64();
        for run in &outcome.ranks {
            self.densities[run.rank] = run.density;
        }
        let batch = outcome.union_batch();

        let energy_start = Instant::now();
        let report = local_energy_batch(&batch, &self.ansatz, table, self.config.eloc_mode)?;
        let (mean, variance) = energy_estimate(&batch, &report)?;
        let energy_seconds = energy_start.elapsed().as_secs_f64();
        if !(mean.re.is_finite() && mean.im.is_finite() && variance.is_finite()) {
            let max_norm = report.e_loc.iter().map(|e| e.norm()).fold(0.0, f64::max);
            return Err(NqsError::Numeric(format!(
                "iteration {iteration}: non-finite energy (mean {mean}, variance {variance}, \
                 max |E_loc| {max_norm}, {} unique samples of {})",
                batch.len(),
                batch.total_count()
            )));
        }

        gradient_assemble(&batch, &report, mean, &mut self.ansatz)?;
        let lr = lr_schedule(
            iteration,
            self.ansatz.config().d_model,
            self.config.n_warmup,
            self.config.lr_scale,
        );
        self.optimizer.step(self.ansatz.parameters_mut(), lr)?;
        self.iteration = iteration;

        let unique_per_rank: Vec<usize> = outcome.ranks.iter().map(|r| r.unique).collect();
        Ok(IterationMetrics {
            iteration,
            energy: mean.re,
            energy_imag: mean.im,
            variance,
            lr,
            n_count: batch.total_count(),
            unique_total: batch.len(),
            max_rank_unique: unique_per_rank.iter().copied().max().unwrap_or(0),
            min_rank_unique: unique_per_rank.iter().copied().min().unwrap_or(0),
            unique_per_rank,
            degenerate_splits: outcome.degenerate_splits,
            psi_evaluations: report.psi_evaluations,
            matrix_elements: report.matrix_elements,
            recompute_events: self.pool.stats.recompute_events - recompute_before,
            bytes_moved: self.pool.stats.bytes_moved - moved_before,
            sampling_seconds,
            energy_seconds,
            lut_build_seconds: report.lut_build_seconds,
            step_seconds: step_start.elapsed().as_secs_f64(),
        })
    }

    /// Run `iterations` steps, handing each metrics record to the
    /// sink as it is produced.
    pub fn run(
        &mut self,
        table: &IntegralTable,
        iterations: u64,
        mut on_metrics: impl FnMut(&IterationMetrics) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..iterations {
            let metrics = self.step(table)?;
            on_metrics(&metrics)?;
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        self.ansatz.write_checkpoint(&mut w)?;
        w.write_all(TRAIN_MAGIC)?;
        let header = TrainerHeader {
            config: self.config.clone(),
            iteration: self.iteration,
            opt_t: self.optimizer.t,
            densities: self.densities.iter().map(|d| d.d).collect(),
        };
        let mut line = serde_json::to_string(&header)
            .map_err(|e| NqsError::Config(format!("trainer header: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for value in self.optimizer.m.iter().chain(self.optimizer.v.iter()) {
            w.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let ansatz = Ansatz::read_checkpoint(&mut r)?;
        let mut magic = vec![0u8; TRAIN_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != TRAIN_MAGIC {
            return Err(NqsError::Parse {
                line: 1,
                msg: "not a trainer checkpoint (magic mismatch)".into(),
            });
        }
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
        }
        let header: TrainerHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| NqsError::Parse { line: 2, msg: format!("trainer header: {e}") })?;
        if header.densities.len() != header.config.plan.n_ranks() {
            return Err(NqsError::Consistency(format!(
                "{} densities for a {}-rank plan",
                header.densities.len(),
                header.config.plan.n_ranks()
            )));
        }
        let mut trainer = Trainer::new(header.config, ansatz)?;
        trainer.iteration = header.iteration;
        trainer.optimizer.t = header.opt_t;
        trainer.densities =
            header.densities.into_iter().map(|d| DensityState { d }).collect();
        let mut bytes = vec![0u8; trainer.optimizer.m.len() * 8];
        r.read_exact(&mut bytes)?;
        for (slot, chunk) in trainer.optimizer.m.iter_mut().zip(bytes.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        r.read_exact(&mut bytes)?;
        for (slot, chunk) in trainer.optimizer.v.iter_mut().zip(bytes.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::AnsatzConfig;
    use crate::eloc::Wavefunction;
    use crate::oracle::{fci_ground_state, FciWavefunction};

    fn fixture(name: &str) -> IntegralTable {
        let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
        crate::integrals::load_fcidump(path).unwrap()
    }

    fn report_of(e_loc: Vec<Complex64>) -> LocalEnergyReport {
        LocalEnergyReport {
            e_loc,
            mode: ElocMode::Accurate,
            psi_evaluations: 0,
            matrix_elements: 0,
            lut_build_seconds: 0.0,
        }
    }

    #[test]
    fn schedule_is_zero_at_step_zero() {
        assert_eq!(lr_schedule(0, 64, 2000, 1.0), 0.0);
    }

    #[test]
    fn schedule_matches_the_closed_form_at_warmup_end() {
        let lr = lr_schedule(2000, 64, 2000, 1.0);
        let expected = 0.125 * (2001.0f64).powf(-0.5);
        assert!((lr - expected).abs() < 1e-12, "{lr} vs {expected}");
        assert!((lr - 2.7944e-3).abs() < 1e-7);
        assert_eq!(lr_schedule(2000, 64, 2000, 0.5), 0.5 * lr);
    }

    #[test]
    fn schedule_rises_through_warmup_and_decays_after() {
        for t in 0..1999 {
            assert!(lr_schedule(t + 1, 64, 2000, 1.0) > lr_schedule(t, 64, 2000, 1.0), "t {t}");
        }
        for t in 2000..4000 {
            assert!(lr_schedule(t + 1, 64, 2000, 1.0) < lr_schedule(t, 64, 2000, 1.0), "t {t}");
        }
    }

    fn flat_batch(counts: &[u64]) -> SampleBatch {
        let leaves = [vec![0u8, 3], vec![3u8, 0], vec![1u8, 2], vec![2u8, 1]];
        SampleBatch {
            prefixes: leaves[..counts.len()].to_vec(),
            counts: counts.to_vec(),
            logp: vec![0.0; counts.len()],
            depth: 2,
        }
    }

    #[test]
    fn constant_local_energy_has_zero_variance() {
        let batch = flat_batch(&[5, 1, 9]);
        let c = Complex64::new(-1.25, 0.375);
        let (mean, variance) = energy_estimate(&batch, &report_of(vec![c; 3])).unwrap();
        assert!((mean - c).norm() < 1e-15);
        assert!(variance < 1e-15);
    }

    #[test]
    fn weighted_mean_follows_the_counts() {
        let batch = flat_batch(&[3, 1]);
        let report = report_of(vec![Complex64::new(0.0, 0.0), Complex64::new(4.0, 0.0)]);
        let (mean, _) = energy_estimate(&batch, &report).unwrap();
        assert!((mean.re - 1.0).abs() < 1e-15);
        assert_eq!(mean.im, 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let batch = SampleBatch::empty(2);
        assert!(energy_estimate(&batch, &report_of(vec![])).is_err());
    }

    #[test]
    fn fci_amplitudes_give_the_exact_energy_with_zero_variance() {
        let table = fixture("h2_sto3g.fcidump");
        let (result, basis) = fci_ground_state(&table, 1, 1).unwrap();
        let psi = FciWavefunction::new(basis, result.vector.clone()).unwrap();
        let supported: Vec<(Vec<u8>, u64)> = psi
            .leaf_distribution()
            .into_iter()
            .filter(|(_, p2)| *p2 > 1e-20)
            .map(|(tokens, p2)| (tokens, 1 + (p2 * 1e6) as u64))
            .collect();
        let batch = SampleBatch {
            prefixes: supported.iter().map(|(t, _)| t.clone()).collect(),
            counts: supported.iter().map(|(_, c)| *c).collect(),
            logp: vec![0.0; supported.len()],
            depth: 2,
        };
        let report =
            local_energy_batch(&batch, &psi, &table, ElocMode::Accurate).unwrap();
        let (mean, variance) = energy_estimate(&batch, &report).unwrap();
        assert!((mean.re - result.e0).abs() < 1e-8, "{} vs {}", mean.re, result.e0);
        assert!(mean.im.abs() < 1e-10);
        assert!(variance < 1e-12, "variance {variance}");
    }

    fn toy(k: usize, na: usize, nb: usize, seed: u64) -> Ansatz {
        Ansatz::new(AnsatzConfig::toy(k), na, nb, seed).unwrap()
    }

    #[test]
    fn centered_weights_vanish_for_constant_local_energy() {
        let mut model = toy(2, 1, 1, 3);
        let batch = flat_batch(&[7, 2, 5, 4]);
        let c = Complex64::new(-0.8, 0.1);
        let report = report_of(vec![c; 4]);
        let (mean, _) = energy_estimate(&batch, &report).unwrap();
        gradient_assemble(&batch, &report, mean, &mut model).unwrap();
        assert!(model.parameters().grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn count_scaling_leaves_the_gradient_unchanged() {
        let table = fixture("h2_sto3g.fcidump");
        let mut model = toy(2, 1, 1, 5);
        let batch = flat_batch(&[7, 2, 5, 4]);
        let report = local_energy_batch(&batch, &model, &table, ElocMode::Accurate).unwrap();
        let (mean, _) = energy_estimate(&batch, &report).unwrap();
        gradient_assemble(&batch, &report, mean, &mut model).unwrap();
        let reference = model.parameters().grad.clone();

        let scaled = flat_batch(&[21, 6, 15, 12]);
        let report = local_energy_batch(&scaled, &model, &table, ElocMode::Accurate).unwrap();
        let (mean, _) = energy_estimate(&scaled, &report).unwrap();
        gradient_assemble(&scaled, &report, mean, &mut model).unwrap();
        assert_eq!(model.parameters().grad, reference);
    }

    /// Reweighted full-space energy of the model at its current
    /// parameters, against frozen reference amplitudes: with counts
    /// proportional to the reference probabilities, this equals the
    /// variational energy as a function of the parameters, so its
    /// central differences check the assembled gradient.
    fn reweighted_energy(
        model: &Ansatz,
        table: &IntegralTable,
        batch: &SampleBatch,
        reference: &[f64],
    ) -> f64 {
        let onvs = batch.to_onvs().unwrap();
        let values = model.evaluate_batch(&onvs);
        let report = local_energy_batch(batch, model, table, ElocMode::Accurate).unwrap();
        let mut numerator = Complex64::new(0.0, 0.0);
        let mut denominator = 0.0;
        for i in 0..batch.len() {
            let ratio = (2.0 * (values[i].log_amplitude - reference[i])).exp();
            let weight = batch.counts[i] as f64 * ratio;
            numerator += weight * report.e_loc[i];
            denominator += weight;
        }
        numerator.re / denominator
    }

    #[test]
    fn assembled_gradient_matches_central_differences() {
        let table = fixture("h2_sto3g.fcidump");
        let mut model = toy(2, 1, 1, 11);
        let leaves = [vec![0u8, 3], vec![3u8, 0], vec![1u8, 2], vec![2u8, 1]];
        let onvs: Vec<_> = leaves
            .iter()
            .map(|t| crate::onv::Onv::from_tokens(t).unwrap())
            .collect();
        let values = model.evaluate_batch(&onvs);
        let log_amps: Vec<f64> = values.iter().map(|v| v.log_amplitude).collect();
        let max = log_amps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let raw: Vec<f64> = log_amps.iter().map(|&l| (2.0 * (l - max)).exp()).collect();
        let z: f64 = raw.iter().sum();
        let counts: Vec<u64> = raw
            .iter()
            .map(|&p| ((p / z) * (1u64 << 31) as f64).round().max(1.0) as u64)
            .collect();
        let batch = SampleBatch {
            prefixes: leaves.to_vec(),
            counts,
            logp: vec![0.0; 4],
            depth: 2,
        };

        let report = local_energy_batch(&batch, &model, &table, ElocMode::Accurate).unwrap();
        let (mean, _) = energy_estimate(&batch, &report).unwrap();
        gradient_assemble(&batch, &report, mean, &mut model).unwrap();
        let analytic = model.parameters().grad.clone();

        let h = 1e-4;
        for (i, &exact) in analytic.iter().enumerate() {
            let original = model.parameters().data[i];
            model.parameters_mut().data[i] = original + h;
            let up = reweighted_energy(&model, &table, &batch, &log_amps);
            model.parameters_mut().data[i] = original - h;
            let down = reweighted_energy(&model, &table, &batch, &log_amps);
            model.parameters_mut().data[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let scale = exact.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (exact - numeric).abs() <= 1e-3 * scale,
                "param {i}: analytic {exact} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn energy_is_real_for_a_phaseless_model_on_real_integrals() {
        let table = fixture("h4_sto3g.fcidump");
        let mut model = toy(4, 2, 2, 7);
        let names: Vec<String> = model
            .parameters()
            .specs()
            .iter()
            .map(|s| s.name.clone())
            .filter(|n| n.starts_with("phase."))
            .collect();
        for name in names {
            model.parameters_mut().tensor_mut(&name).unwrap().fill(0.0);
        }
        let config = TrainConfig {
            n_count: 3000,
            chunk_k: 64,
            eloc_mode: ElocMode::Accurate,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config, model).unwrap();
        let metrics = trainer.step(&table).unwrap();
        assert!(metrics.energy_imag.abs() < 1e-10, "{}", metrics.energy_imag);
    }

    #[test]
    fn sampled_energy_respects_the_variational_bound() {
        for (name, na, nb) in [("h2_sto3g.fcidump", 1usize, 1usize), ("h4_sto3g.fcidump", 2, 2)] {
            let table = fixture(name);
            let (result, _) = fci_ground_state(&table, na, nb).unwrap();
            let model = toy(table.n_spatial(), na, nb, 13);
            let config = TrainConfig {
                n_count: 4000,
                chunk_k: 64,
                eloc_mode: ElocMode::Accurate,
                seed: 3,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(config, model).unwrap();
            let metrics = trainer.step(&table).unwrap();
            let standard_error = (metrics.variance / 4000.0).sqrt();
            assert!(
                metrics.energy >= result.e0 - 3.0 * standard_error - 1e-9,
                "{name}: {} vs bound {}",
                metrics.energy,
                result.e0
            );
        }
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let table = fixture("h2_sto3g.fcidump");
        let model = toy(2, 1, 1, 17);
        let before = model.parameters().data.clone();
        let config =
            TrainConfig { n_count: 500, chunk_k: 16, seed: 4, ..TrainConfig::default() };
        let mut trainer = Trainer::new(config, model).unwrap();
        let mut lines = 0;
        trainer
            .run(&table, 0, |_| {
                lines += 1;
                Ok(())
            })
            .unwrap();
        assert_eq!(lines, 0);
        assert_eq!(trainer.iteration, 0);
        assert_eq!(trainer.ansatz.parameters().data, before);
    }

    #[test]
    fn resumed_training_reproduces_the_trajectory_exactly() {
        let table = fixture("h2_sto3g.fcidump");
        let config = TrainConfig {
            n_count: 400,
            chunk_k: 16,
            n_warmup: 20,
            eloc_mode: ElocMode::Accurate,
            plan: PartitionPlan { group_sizes: vec![2], split_layers: vec![1] },
            seed: 21,
            ..TrainConfig::default()
        };

        let mut straight = Trainer::new(config.clone(), toy(2, 1, 1, 19)).unwrap();
        let mut reference = Vec::new();
        straight
            .run(&table, 6, |m| {
                reference.push(m.energy);
                Ok(())
            })
            .unwrap();

        let mut first = Trainer::new(config, toy(2, 1, 1, 19)).unwrap();
        let mut resumed_energies = Vec::new();
        first
            .run(&table, 3, |m| {
                resumed_energies.push(m.energy);
                Ok(())
            })
            .unwrap();
        let mut bytes = Vec::new();
        first.write_checkpoint(&mut bytes).unwrap();

        let mut second = Trainer::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(second.iteration, 3);
        second
            .run(&table, 3, |m| {
                resumed_energies.push(m.energy);
                Ok(())
            })
            .unwrap();

        assert_eq!(resumed_energies.len(), reference.len());
        for (a, b) in resumed_energies.iter().zip(&reference) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            second.ansatz.parameters().data,
            straight.ansatz.parameters().data
        );
    }

    #[test]
    fn energy_block_medians_trend_downward_on_h2() {
        let table = fixture("h2_sto3g.fcidump");
        let config = TrainConfig {
            n_count: 1500,
            chunk_k: 16,
            n_warmup: 400,
            lr_scale: 0.3,
            eloc_mode: ElocMode::Accurate,
            seed: 6,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config, toy(2, 1, 1, 23)).unwrap();
        let mut energies = Vec::new();
        trainer
            .run(&table, 300, |m| {
                energies.push(m.energy);
                Ok(())
            })
            .unwrap();
        let median = |block: &[f64]| {
            let mut sorted = block.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[sorted.len() / 2]
        };
        let medians: Vec<f64> = energies.chunks(100).map(median).collect();
        assert!(medians.first().unwrap() - medians.last().unwrap() > 1e-3);
        for pair in medians.windows(2) {
            assert!(pair[1] <= pair[0] + 2e-5, "medians {medians:?}");
        }
    }
}
