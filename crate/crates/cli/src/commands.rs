//! The five subcommands. Each one loads and validates its inputs in
//! full before any compute, emits a machine-readable result (JSON or
//! CSV), and keeps wall-clock readings in dedicated trailing fields so
//! everything else is byte-deterministic for a fixed seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;

use nqs_core::ansatz::{Ansatz, WavefunctionValue};
use nqs_core::cluster::{
    run_parallel_sampling, ClusterConfig, DensityState, SplitStrategy,
};
use nqs_core::eloc::{
    batched_kernel, local_energy_batch, local_energy_onvs, matrix_element, ElocMode,
    KernelStats, KetBlock, Wavefunction,
};
use nqs_core::integrals::{load_fcidump, IntegralTable};
use nqs_core::kvcache::CachePool;
use nqs_core::onv::{connected, Onv};
use nqs_core::oracle::{fci_ground_state_with, hf_energy};
use nqs_core::rng::mix64;
use nqs_core::sampler::{LayerTrace, SampleBatch, SamplerConfig, SampleTrace};
use nqs_core::vmc::{energy_estimate, IterationMetrics, Trainer};
use nqs_core::NqsError;

use crate::config::{resolve_chunk, RunConfig};
use crate::{config_error, runtime_error, Failure};

fn config_message(msg: String) -> Failure {
    config_error(anyhow!(msg))
}

fn load_table(cfg: &RunConfig) -> Result<IntegralTable, Failure> {
    let path = cfg.fcidump().map_err(config_message)?;
    load_fcidump(path)
        .map_err(|e| config_error(anyhow!("system.fcidump {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime_error),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json_line(value: &impl Serialize) -> Result<String, Failure> {
    let mut line = serde_json::to_string(value).map_err(runtime_error)?;
    line.push('\n');
    Ok(line)
}

// --- train ---------------------------------------------------------

#[derive(Serialize)]
struct RunHeader<'a> {
    fcidump: String,
    k_orbitals: usize,
    n_alpha: usize,
    n_beta: usize,
    parameters: usize,
    start_iteration: u64,
    target_iterations: u64,
    config: &'a nqs_core::vmc::TrainConfig,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    iterations: u64,
    energy: Option<f64>,
    variance: Option<f64>,
    checkpoint: Option<&'a Path>,
}

/// Train to `train.iterations` total steps; with `paths.resume` the
/// checkpoint's own hyperparameters govern and only the remaining
/// iterations run, so an interrupted run finishes identically.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let table = load_table(cfg)?;
    let k = table.n_spatial();
    let (n_alpha, n_beta) = cfg.spin_sector(&table);
    let train_config = cfg.train_config(k).map_err(config_message)?;
    let target = train_config.iterations;

    let mut trainer = match &cfg.paths.resume {
        Some(path) => {
            let file = File::open(path)
                .with_context(|| format!("paths.resume {}", path.display()))
                .map_err(config_error)?;
            let trainer = Trainer::read_checkpoint(BufReader::new(file))
                .map_err(|e| config_error(anyhow!("paths.resume {}: {e}", path.display())))?;
            if trainer.ansatz.k_orbitals() != k {
                return Err(config_message(format!(
                    "checkpoint is for {} orbitals, fcidump has {k}",
                    trainer.ansatz.k_orbitals()
                )));
            }
            trainer
        }
        None => {
            let shape = cfg.ansatz_config(k).map_err(config_message)?;
            let ansatz = Ansatz::new(shape, n_alpha, n_beta, cfg.ansatz.init_seed)
                .map_err(config_error)?;
            Trainer::new(train_config.clone(), ansatz).map_err(config_error)?
        }
    };

    let mut sink: Box<dyn Write> = match &cfg.paths.metrics {
        Some(path) => Box::new(BufWriter::new(
            File::create(path)
                .with_context(|| format!("paths.metrics {}", path.display()))
                .map_err(runtime_error)?,
        )),
        None => Box::new(std::io::stdout()),
    };
    let header = RunHeader {
        fcidump: cfg.fcidump().map_err(config_message)?.display().to_string(),
        k_orbitals: k,
        n_alpha,
        n_beta,
        parameters: trainer.ansatz.parameter_count(),
        start_iteration: trainer.iteration,
        target_iterations: target,
        config: &trainer.config,
    };
    sink.write_all(json_line(&header)?.as_bytes()).map_err(runtime_error)?;

    let remaining = target.saturating_sub(trainer.iteration);
    let mut last: Option<IterationMetrics> = None;
    trainer
        .run(&table, remaining, |metrics| {
            let line = serde_json::to_string(metrics)
                .map_err(|e| NqsError::Config(format!("metrics record: {e}")))?;
            sink.write_all(line.as_bytes())?;
            sink.write_all(b"\n")?;
            if metrics.iteration.is_multiple_of(100) {
                log::info!(
                    "iteration {}: energy {:.8}, variance {:.3e}, unique {}",
                    metrics.iteration,
                    metrics.energy,
                    metrics.variance,
                    metrics.unique_total
                );
            }
            last = Some(metrics.clone());
            Ok(())
        })
        .map_err(runtime_error)?;
    sink.flush().map_err(runtime_error)?;
    drop(sink);

    if let Some(path) = &cfg.paths.checkpoint {
        let file = File::create(path)
            .with_context(|| format!("paths.checkpoint {}", path.display()))
            .map_err(runtime_error)?;
        let mut writer = BufWriter::new(file);
        trainer.write_checkpoint(&mut writer).map_err(runtime_error)?;
        writer.flush().map_err(runtime_error)?;
    }

    if cfg.paths.metrics.is_some() {
        let summary = TrainSummary {
            iterations: trainer.iteration,
            energy: last.as_ref().map(|m| m.energy),
            variance: last.as_ref().map(|m| m.variance),
            checkpoint: cfg.paths.checkpoint.as_deref(),
        };
        print!("{}", json_line(&summary)?);
    }
    Ok(())
}

// --- fci -----------------------------------------------------------

#[derive(Serialize)]
struct FciOutput {
    e0: f64,
    hf: f64,
    dim: usize,
    solver_iterations: usize,
    n_spatial: usize,
    n_alpha: usize,
    n_beta: usize,
    seconds: f64,
}

pub fn cmd_fci(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let table = load_table(cfg)?;
    let (n_alpha, n_beta) = cfg.spin_sector(&table);
    let start = Instant::now();
    let (result, _) = fci_ground_state_with(&table, n_alpha, n_beta, &cfg.fci.options())
        .map_err(runtime_error)?;
    let output = FciOutput {
        e0: result.e0,
        hf: hf_energy(&table, n_alpha, n_beta),
        dim: result.dim,
        solver_iterations: result.iterations,
        n_spatial: table.n_spatial(),
        n_alpha,
        n_beta,
        seconds: start.elapsed().as_secs_f64(),
    };
    emit(out, &json_line(&output)?)
}

// --- energy --------------------------------------------------------

#[derive(Serialize)]
struct EnergyOutput {
    energy: f64,
    energy_imag: f64,
    variance: f64,
    std_error: f64,
    unique: usize,
    n_count: u64,
    mode: ElocMode,
    psi_evaluations: usize,
    matrix_elements: usize,
    seconds: f64,
}

fn read_ansatz(cfg: &RunConfig, table: &IntegralTable) -> Result<Ansatz, Failure> {
    let path = cfg.paths.checkpoint.as_deref().ok_or_else(|| {
        config_message("paths.checkpoint is not set (the ansatz to evaluate)".into())
    })?;
    let file = File::open(path)
        .with_context(|| format!("paths.checkpoint {}", path.display()))
        .map_err(config_error)?;
    let ansatz = Ansatz::read_checkpoint(BufReader::new(file))
        .map_err(|e| config_error(anyhow!("paths.checkpoint {}: {e}", path.display())))?;
    if ansatz.k_orbitals() != table.n_spatial() {
        return Err(config_message(format!(
            "checkpoint is for {} orbitals, fcidump has {}",
            ansatz.k_orbitals(),
            table.n_spatial()
        )));
    }
    Ok(ansatz)
}

fn sample_model(
    cfg: &RunConfig,
    model: &Ansatz,
) -> Result<(nqs_core::cluster::ClusterOutcome, ClusterConfig), Failure> {
    let k = model.k_orbitals();
    let (n_alpha, n_beta) = model.electron_counts();
    let plan = cfg.partition_plan();
    plan.validate(k).map_err(config_error)?;
    let n_count = cfg.sample.n_count.unwrap_or(cfg.train.n_count);
    let chunk = resolve_chunk(
        cfg.sample.chunk_k.unwrap_or(cfg.train.chunk_k),
        n_count,
        k,
        n_alpha,
        n_beta,
    );
    let cluster = ClusterConfig {
        plan,
        sampler: SamplerConfig {
            n_count,
            chunk_k: chunk,
            seed: cfg.sample.seed.unwrap_or(cfg.train.seed),
            iteration: cfg.sample.iteration,
        },
        strategy: cfg.cluster.strategy,
    };
    let shape = model.config();
    let mut pool = CachePool::new(shape.n_layers, chunk, shape.max_sequence, shape.d_model)
        .map_err(config_error)?;
    let densities = vec![DensityState::default(); cluster.plan.n_ranks()];
    let outcome =
        run_parallel_sampling(model, &mut pool, &cluster, &densities).map_err(runtime_error)?;
    Ok((outcome, cluster))
}

pub fn cmd_energy(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let table = load_table(cfg)?;
    let ansatz = read_ansatz(cfg, &table)?;
    let start = Instant::now();
    let (outcome, _) = sample_model(cfg, &ansatz)?;
    let batch = outcome.union_batch();
    let report = local_energy_batch(&batch, &ansatz, &table, cfg.train.eloc_mode)
        .map_err(runtime_error)?;
    let (mean, variance) = energy_estimate(&batch, &report).map_err(runtime_error)?;
    let output = EnergyOutput {
        energy: mean.re,
        energy_imag: mean.im,
        variance,
        std_error: (variance / batch.total_count() as f64).sqrt(),
        unique: batch.len(),
        n_count: batch.total_count(),
        mode: report.mode,
        psi_evaluations: report.psi_evaluations,
        matrix_elements: report.matrix_elements,
        seconds: start.elapsed().as_secs_f64(),
    };
    emit(out, &json_line(&output)?)
}

// --- sample --------------------------------------------------------

#[derive(Serialize)]
struct RankOutput {
    rank: usize,
    unique: usize,
    sample_counts: u64,
    density: f64,
    peak_pre_split_unique: usize,
    /// Per-layer unique counts through the staged breadth-first phase.
    staged_layers: Vec<LayerTrace>,
    /// The depth-first completion trace below the final split.
    completion: SampleTrace,
}

#[derive(Serialize)]
struct SampleOutput {
    k_orbitals: usize,
    n_count: u64,
    chunk_k: usize,
    seed: u64,
    iteration: u64,
    strategy: SplitStrategy,
    group_sizes: Vec<usize>,
    split_layers: Vec<usize>,
    degenerate_splits: usize,
    unique: usize,
    total_count: u64,
    /// Order-independent hash of the leaf multiset (prefixes + counts).
    digest: String,
    ranks: Vec<RankOutput>,
    seconds: f64,
}

/// Hash of the leaf multiset, invariant to row order and so to the
/// chunk threshold and partition plan that produced the batch.
fn leaf_digest(batch: &SampleBatch) -> u64 {
    let mut rows: Vec<(&[u8], u64)> = batch
        .prefixes
        .iter()
        .map(Vec::as_slice)
        .zip(batch.counts.iter().copied())
        .collect();
    rows.sort_unstable();
    let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
    for (prefix, count) in rows {
        for &token in prefix {
            acc = mix64(acc ^ u64::from(token));
        }
        acc = mix64(acc ^ count);
    }
    acc
}

pub fn cmd_sample(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let table = load_table(cfg)?;
    let k = table.n_spatial();
    let model = match &cfg.paths.checkpoint {
        Some(_) => read_ansatz(cfg, &table)?,
        None => {
            let shape = cfg.ansatz_config(k).map_err(config_message)?;
            let (n_alpha, n_beta) = cfg.spin_sector(&table);
            Ansatz::new(shape, n_alpha, n_beta, cfg.ansatz.init_seed).map_err(config_error)?
        }
    };
    let start = Instant::now();
    let (outcome, cluster) = sample_model(cfg, &model)?;
    let union = outcome.union_batch();
    let output = SampleOutput {
        k_orbitals: k,
        n_count: cluster.sampler.n_count,
        chunk_k: cluster.sampler.chunk_k,
        seed: cluster.sampler.seed,
        iteration: cluster.sampler.iteration,
        strategy: cluster.strategy,
        group_sizes: cluster.plan.group_sizes.clone(),
        split_layers: cluster.plan.split_layers.clone(),
        degenerate_splits: outcome.degenerate_splits,
        unique: union.len(),
        total_count: union.total_count(),
        digest: format!("{:016x}", leaf_digest(&union)),
        ranks: outcome
            .ranks
            .iter()
            .map(|run| RankOutput {
                rank: run.rank,
                unique: run.unique,
                sample_counts: run.sample_counts,
                density: run.density.d,
                peak_pre_split_unique: run.peak_pre_split_unique,
                staged_layers: run.bfs_layers.clone(),
                completion: run.trace.clone(),
            })
            .collect(),
        seconds: start.elapsed().as_secs_f64(),
    };
    emit(out, &json_line(&output)?)
}

// --- bench ---------------------------------------------------------

/// Deterministic synthetic wavefunction, cheap enough that kernel and
/// bookkeeping costs dominate the measured local-energy stage.
struct BenchPsi;

impl Wavefunction for BenchPsi {
    fn evaluate(&self, n: &Onv) -> WavefunctionValue {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for &chunk in n.chunks() {
            acc = mix64(acc ^ chunk);
        }
        WavefunctionValue { log_amplitude: -1e-3 * (acc % 4096) as f64, phase: 0.0 }
    }
}

/// Best-of-N wall time after one warmup pass. The minimum is the
/// stable statistic on a shared machine: scheduler and cache noise
/// only ever add time.
fn time_min(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        f();
        best = best.min(start.elapsed().as_secs_f64());
    }
    best
}

pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let b = &cfg.bench;
    if b.n_spatial < 2 {
        return Err(config_message("bench.n_spatial must be at least 2".into()));
    }
    if b.n_elec == 0 || b.n_elec > 2 * b.n_spatial {
        return Err(config_message(format!(
            "bench.n_elec {} outside 1..={}",
            b.n_elec,
            2 * b.n_spatial
        )));
    }
    if b.block == 0 || b.repeats == 0 || b.threads == 0 || b.n_samples == 0 {
        return Err(config_message(
            "bench.block, repeats, threads, and n_samples must be positive".into(),
        ));
    }

    let table = IntegralTable::synthetic(b.n_spatial, b.n_elec, b.seed);
    let (n_alpha, n_beta) = table.spin_counts();
    let tokens: Vec<u8> = (0..b.n_spatial)
        .map(|i| u8::from(i < n_alpha) + 2 * u8::from(i < n_beta))
        .collect();
    let bra = Onv::from_tokens(&tokens).map_err(config_error)?;
    let base = connected(&bra);
    let mut kets: Vec<Onv> = Vec::with_capacity(b.block + base.len());
    while kets.len() < b.block {
        kets.extend(base.iter().copied());
    }
    let block = KetBlock::from_onvs(&kets);
    let lanes = kets.len();

    let mut acc = 0.0f64;
    let scalar_seconds = time_min(b.repeats, || {
        for ket in &kets {
            acc += matrix_element(&bra, ket, &table);
        }
    });
    let batched_seconds = time_min(b.repeats, || {
        let mut stats = KernelStats::default();
        let values = batched_kernel(&bra, &block, &table, &mut stats);
        acc += values.iter().sum::<f64>();
    });

    let samples: Vec<Onv> = base.iter().copied().take(b.n_samples).collect();
    let psi = BenchPsi;
    local_energy_onvs(&samples, &psi, &table, ElocMode::Accurate).map_err(runtime_error)?;
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(runtime_error)?;
    let multi = rayon::ThreadPoolBuilder::new()
        .num_threads(b.threads)
        .build()
        .map_err(runtime_error)?;
    let off_seconds = single.install(|| {
        time_min(b.repeats, || {
            let report = local_energy_onvs(&samples, &psi, &table, ElocMode::Accurate).unwrap();
            acc += report.e_loc.iter().map(|e| e.re).sum::<f64>();
        })
    });
    let on_seconds = multi.install(|| {
        time_min(b.repeats, || {
            let report = local_energy_onvs(&samples, &psi, &table, ElocMode::Accurate).unwrap();
            acc += report.e_loc.iter().map(|e| e.re).sum::<f64>();
        })
    });
    std::hint::black_box(acc);

    let mut csv = String::from("stage,variant,n_spin_orbitals,items,threads,repeats,seconds,speedup\n");
    let nso = 2 * b.n_spatial;
    let rows = [
        ("kernel", "scalar", lanes, 1usize, scalar_seconds, 1.0),
        ("kernel", "batched", lanes, 1, batched_seconds, scalar_seconds / batched_seconds),
        ("eloc", "threads_off", samples.len(), 1, off_seconds, 1.0),
        ("eloc", "threads_on", samples.len(), b.threads, on_seconds, off_seconds / on_seconds),
    ];
    for (stage, variant, items, threads, seconds, speedup) in rows {
        csv.push_str(&format!(
            "{stage},{variant},{nso},{items},{threads},{},{seconds:.9},{speedup:.3}\n",
            b.repeats
        ));
    }
    emit(out, &csv)
}
