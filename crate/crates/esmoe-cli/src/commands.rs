//! Subcommand implementations.
//!
//! Every command resolves the same layered configuration (defaults, file,
//! flags), writes its artifacts into the configuration's run directory,
//! and reports what it did on standard output. All commands are
//! deterministic for a fixed configuration and seed.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use esmoe_core::cost::{append_csv, run_latency, speedup_ratio, BenchMode, BenchSpec};
use esmoe_core::data::{batch_from_indices, export_dataset};
use esmoe_core::viz::{weight_grid_pgm, write_routing_heatmaps};
use esmoe_core::{
    evaluate, generate, load_checkpoint, run_gradcheck, save_checkpoint, train, Classifier,
    RoutingMode, RoutingOutcome, TrainConfig,
};

use crate::config::Overrides;
use crate::error::{Error, Result};

/// Initialize an untrained model exactly as the training loop would: the
/// seed's dedicated initialization stream, so `eval` and `route-viz`
/// without a checkpoint see the model `train` would start from.
fn fresh_model(cfg: &TrainConfig) -> Result<Classifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    Ok(Classifier::init(&cfg.block, cfg.dataset.classes, &mut rng)?)
}

/// Load a checkpoint when a path is given, otherwise a fresh model, and
/// require it to consume the configured dataset's channels.
fn model_for(cfg: &TrainConfig, checkpoint: Option<&PathBuf>) -> Result<Classifier> {
    let model = match checkpoint {
        Some(path) => load_checkpoint(path)
            .map_err(|e| Error::Runtime(format!("checkpoint {}: {e}", path.display())))?,
        None => fresh_model(cfg)?,
    };
    if model.cfg.c_in != cfg.dataset.channels {
        return Err(Error::Config(format!(
            "model consumes {} channels but the dataset provides {}",
            model.cfg.c_in, cfg.dataset.channels
        )));
    }
    if model.classes != cfg.dataset.classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset provides {}",
            model.classes, cfg.dataset.classes
        )));
    }
    Ok(model)
}

/// Generate `n` held-out samples: the generator is indexed per sample, so
/// the tail after the training prefix is the same validation data the
/// training loop scores.
fn heldout(cfg: &TrainConfig, n: usize) -> Result<Vec<esmoe_core::SynthSample>> {
    let all = generate(cfg.seed, cfg.n_train + n, &cfg.dataset)?;
    Ok(all[cfg.n_train..].to_vec())
}

/// Route a labeled sample set in hard top-k mode, ordered by class so the
/// heatmaps' row-major sample grid shows each class as a contiguous band.
fn route_by_class(
    model: &Classifier,
    samples: &[esmoe_core::SynthSample],
) -> Result<(RoutingOutcome, Vec<usize>)> {
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    indices.sort_by_key(|&i| (samples[i].label, i));
    let (x, labels) = batch_from_indices(samples, &indices)?;
    let (_, routing) = model.forward_with_mode(&x, RoutingMode::Inference)?;
    Ok((routing, labels))
}

fn fmt_mu(mu: &[f64]) -> String {
    let cells: Vec<String> = mu.iter().map(|m| format!("{m:.4}")).collect();
    format!("[{}]", cells.join(", "))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(ov: &Overrides) -> Result<()> {
    let eff = ov.resolve()?;
    let dir = eff.run_dir(&ov.out_dir)?;
    println!("run directory: {}", dir.display());
    let t0 = Instant::now();
    let (model, report) = train(&eff.train)?;
    let secs = t0.elapsed().as_secs_f64();

    let last = report
        .final_epoch()
        .ok_or_else(|| Error::Runtime("training produced an empty report".into()))?;
    println!(
        "trained {} epochs in {secs:.1}s: task_loss {:.4}, lb_loss {:.6}, train_acc {:.4}, val_acc {:.4}",
        last.epoch, last.task_loss, last.lb_loss, last.train_acc, last.val_acc
    );
    println!(
        "utilization {} | routing entropy train {:.3} bits, inference {:.3} bits",
        fmt_mu(&last.mu),
        last.entropy_train_bits,
        last.entropy_infer_bits
    );

    let csv_path = dir.join("train_report.csv");
    std::fs::write(&csv_path, report.to_csv_string()?.as_bytes())?;
    println!("wrote {}", csv_path.display());

    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model)?;
    println!("wrote {}", ckpt_path.display());

    let val = heldout(&eff.train, eff.train.n_val)?;
    let (routing, _) = route_by_class(&model, &val)?;
    for path in write_routing_heatmaps(&dir, &routing)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn cmd_eval(ov: &Overrides, checkpoint: Option<&PathBuf>, samples: Option<usize>) -> Result<()> {
    let eff = ov.resolve()?;
    let n = samples.unwrap_or(eff.train.n_val);
    if n == 0 {
        return Err(Error::Config("cannot evaluate zero samples".into()));
    }
    let model = model_for(&eff.train, checkpoint)?;
    let set = heldout(&eff.train, n)?;
    let outcome = evaluate(&model, &set, eff.train.batch_size)?;

    println!("evaluated {n} held-out samples (experts {}, top_k {})", model.cfg.experts, model.cfg.top_k);
    println!("accuracy: {:.4}", outcome.accuracy);
    println!("utilization mu: {}", fmt_mu(&outcome.stats.mu));
    println!("routing entropy: {:.4} bits", outcome.stats.entropy_bits);
    println!(
        "expert evaluations: {} (top_k {} x {} samples)",
        outcome.expert_evals, model.cfg.top_k, n
    );
    let expected = (model.cfg.top_k * n) as u64;
    if outcome.expert_evals != expected {
        return Err(Error::Assertion(format!(
            "expert evaluation counter {} != top_k x samples = {expected}",
            outcome.expert_evals
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn cmd_bench(ov: &Overrides) -> Result<()> {
    let eff = ov.resolve_bench()?;
    let dir = eff.run_dir(&ov.out_dir)?;
    let spec = BenchSpec {
        cfg: eff.train.block.clone(),
        height: eff.bench.height,
        width: eff.bench.width,
        repetitions: eff.bench.repetitions,
        warmup: eff.bench.warmup,
        seed: eff.train.seed,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    println!(
        "timing expert stage: {} assorted inputs of {}x{}x{}, {} warmup",
        spec.repetitions, spec.cfg.c_in, spec.height, spec.width, spec.warmup
    );
    let sparse = run_latency(&spec, BenchMode::Sparse)?;
    let dense = run_latency(&spec, BenchMode::Dense)?;

    println!("{:<8} {:>7} {:>5} {:>12} {:>12} {:>12} {:>13}", "mode", "experts", "top_k", "median_us", "p10_us", "p90_us", "expert_evals");
    for r in [&sparse, &dense] {
        println!(
            "{:<8} {:>7} {:>5} {:>12.1} {:>12.1} {:>12.1} {:>13}",
            r.mode.as_str(),
            r.experts,
            r.top_k,
            r.median_us,
            r.p10_us,
            r.p90_us,
            r.expert_evals
        );
    }
    println!("sparse/dense median latency ratio: {:.3}", speedup_ratio(&sparse, &dense));

    let csv_path = dir.join("bench.csv");
    append_csv(&csv_path, &[sparse, dense])?;
    println!("appended 2 rows to {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn cmd_gradcheck(ov: &Overrides) -> Result<()> {
    // The check runs on a fixed internal geometry, so like `bench` it skips
    // the dataset/block channel cross-validation.
    let eff = ov.resolve_bench()?;
    println!(
        "finite-difference check at f64 (seed {}, lb_weight {})",
        eff.train.seed, eff.train.lb_weight
    );
    let t0 = Instant::now();
    let report = run_gradcheck(eff.train.seed, eff.train.lb_weight)?;
    println!(
        "checked {} parameters in {:.1}s",
        report.checks,
        t0.elapsed().as_secs_f64()
    );
    println!(
        "worst relative error: {:.3e} at {}",
        report.worst_rel_err, report.worst_param
    );
    if !report.passed() {
        return Err(Error::Assertion(format!(
            "worst relative error {:.3e} at {} exceeds 1e-3",
            report.worst_rel_err, report.worst_param
        )));
    }
    println!("gradient check passed (limit 1e-3)");
    Ok(())
}

// ---------------------------------------------------------------------------
// route-viz
// ---------------------------------------------------------------------------

pub fn cmd_route_viz(
    ov: &Overrides,
    checkpoint: Option<&PathBuf>,
    samples: usize,
    cell: usize,
) -> Result<()> {
    let eff = ov.resolve()?;
    if samples == 0 || cell == 0 {
        return Err(Error::Config("samples and cell size must be nonzero".into()));
    }
    let dir = eff.run_dir(&ov.out_dir)?;
    let model = model_for(&eff.train, checkpoint)?;
    let set = heldout(&eff.train, samples)?;
    let (routing, labels) = route_by_class(&model, &set)?;

    // Text companion to the images: mean routing weight per (class, expert).
    let classes = eff.train.dataset.classes;
    let mut sums = vec![vec![0.0f64; model.cfg.experts]; classes];
    let mut counts = vec![0usize; classes];
    for (s, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        for (e, w) in routing.weights_row(s).iter().enumerate() {
            sums[label][e] += w;
        }
    }
    println!("mean routing weight per class (rows) and expert (columns):");
    for (class, row) in sums.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|s| format!("{:.3}", s / counts[class].max(1) as f64))
            .collect();
        println!("  class {class}: [{}]", cells.join(", "));
    }

    for expert in 0..routing.experts() {
        let weights: Vec<f64> =
            (0..routing.samples()).map(|s| routing.weights_row(s)[expert]).collect();
        let bytes = weight_grid_pgm(&weights, cell)?;
        let path = dir.join(format!("expert_{expert}.pgm"));
        std::fs::write(&path, bytes)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset-export
// ---------------------------------------------------------------------------

pub fn cmd_dataset_export(
    ov: &Overrides,
    out: Option<&PathBuf>,
    count: Option<usize>,
) -> Result<()> {
    let eff = ov.resolve()?;
    let count = count.unwrap_or(eff.train.n_train + eff.train.n_val);
    if count == 0 {
        return Err(Error::Config("cannot export zero samples".into()));
    }
    let path = match out {
        Some(p) => p.clone(),
        None => eff.run_dir(&ov.out_dir)?.join("dataset.bin"),
    };
    let d = &eff.train.dataset;
    let samples = generate(eff.train.seed, count, d)?;
    export_dataset(&path, &samples)?;
    println!(
        "wrote {count} samples ({} classes, {}x{}x{} images) to {}",
        d.classes,
        d.channels,
        d.height,
        d.width,
        path.display()
    );
    Ok(())
}
