//! Training, evaluation and ablation runs over a loaded dataset.

use std::fmt::Write as _;
use std::path::Path;

use avtca_core::data::{epoch_batches, Split};
use avtca_core::metrics::MetricsReport;
use avtca_core::ops::concat;
use avtca_core::train::{predict_chunk, train_epoch, TrainOptions};
use avtca_core::{Architecture, ModelState, Tensor, VariantId};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Dataset;
use crate::metrics_csv;

type Chunk = avtca_core::Result<(f64, Tensor<f32>)>;

pub const THREADS_VAR: &str = "AVTCA_THREADS";

/// Worker cap from `AVTCA_THREADS`, defaulting to the machine's parallelism.
pub fn thread_count() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Eval-mode metrics and probabilities for `indices`, in chunks of
/// `chunk`. Chunks are spread over up to `threads` workers and joined in
/// order, so the result does not depend on the thread count.
pub fn evaluate(
    state: &ModelState<f32>,
    ds: &Dataset,
    indices: &[usize],
    chunk: usize,
    split: Split,
    threads: usize,
) -> CliResult<(MetricsReport, Tensor<f32>)> {
    if indices.is_empty() {
        return Err(CliError::Data(format!("the {} split is empty", split.as_str())));
    }
    let batches = epoch_batches(indices, chunk, 0, 0, false)?;
    let workers = threads.clamp(1, batches.len());
    let mut results: Vec<Option<Chunk>> = vec![None; batches.len()];
    if workers == 1 {
        for (slot, b) in results.iter_mut().zip(&batches) {
            *slot = Some(predict_chunk(state, &ds.samples, b));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let batches = &batches;
                    s.spawn(move || {
                        (w..batches.len()).step_by(workers).map(|i| (i, predict_chunk(state, &ds.samples, &batches[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let chunks = results.into_iter().map(|r| r.expect("every chunk is evaluated")).collect::<avtca_core::Result<Vec<_>>>()?;
    let labels = ds.labels(indices);
    let loss = chunks.iter().map(|c| c.0).sum::<f64>() / labels.len() as f64;
    let probs = concat(&chunks.iter().map(|c| &c.1).collect::<Vec<_>>(), 0)?;
    let report = MetricsReport::compute(state.epoch, split, loss, &probs, &labels)?;
    Ok((report, probs))
}

pub struct TrainRun {
    pub state: ModelState<f32>,
    /// Train and val rows of every epoch, in order.
    pub rows: Vec<MetricsReport>,
}

impl TrainRun {
    pub fn last(&self, split: Split) -> Option<&MetricsReport> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::output_io(path, e))
}

/// Trains `arch` on `ds` for `cfg.train.epochs` epochs, writing
/// `config.toml`, `metrics.csv`, `per_class.csv`, `best.ckpt` (on each new
/// best validation accuracy) and `final.ckpt` into `out`.
pub fn train(cfg: &RunConfig, arch: Architecture, ds: &Dataset, out: &Path, threads: usize, verbose: bool) -> CliResult<TrainRun> {
    std::fs::create_dir_all(out).map_err(|e| CliError::output_io(out, e))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let mut state = ModelState::<f32>::new(cfg.model, arch, cfg.train.seed)?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CliError::Data("both the train and the val split need samples".into()));
    }
    let opts = TrainOptions { batch_size: cfg.train.batch_size, hyper: cfg.train.hyper(), shuffle_seed: cfg.train.seed };
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    write(&out.join("metrics.csv"), metrics_csv::table(&rows))?;
    write(&out.join("per_class.csv"), metrics_csv::per_class_table(&rows))?;
    for _ in 0..cfg.train.epochs {
        train_epoch(&mut state, &ds.samples, &train_idx, &opts)?;
        let (tr, _) = evaluate(&state, ds, &train_idx, opts.batch_size, Split::Train, threads)?;
        let (va, _) = evaluate(&state, ds, &val_idx, opts.batch_size, Split::Val, threads)?;
        if verbose {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4} f1 {:.4}",
                state.epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, va.f1_macro
            );
        }
        let improved = va.accuracy > best;
        best = best.max(va.accuracy);
        rows.push(tr);
        rows.push(va);
        write(&out.join("metrics.csv"), metrics_csv::table(&rows))?;
        write(&out.join("per_class.csv"), metrics_csv::per_class_table(&rows))?;
        if improved {
            checkpoint::save(&out.join("best.ckpt"), &state)?;
        }
    }
    checkpoint::save(&out.join("final.ckpt"), &state)?;
    Ok(TrainRun { state, rows })
}

pub struct AblationRow {
    pub variant: VariantId,
    pub parameters: usize,
    /// Final validation metrics, or the error that stopped the variant.
    pub result: CliResult<MetricsReport>,
}

/// Trains every variant with the same seeds and data into `out/<variant>`.
/// A failing variant is recorded and the rest still run.
pub fn ablate(cfg: &RunConfig, ds: &Dataset, out: &Path, threads: usize, verbose: bool) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in VariantId::ALL {
        let arch = v.architecture(&cfg.model);
        let parameters = ModelState::<f32>::new(cfg.model, arch, cfg.train.seed)?.num_parameters();
        if verbose {
            eprintln!("== {v} ({parameters} parameters)");
        }
        let mut vcfg = cfg.clone();
        vcfg.variant = v.as_str().to_owned();
        let result = train(&vcfg, arch, ds, &out.join(v.as_str()), threads, verbose)
            .and_then(|run| run.last(Split::Val).cloned().ok_or_else(|| CliError::Data("no epochs were run".into())));
        if let Err(e) = &result {
            eprintln!("{v}: {e}");
        }
        rows.push(AblationRow { variant: v, parameters, result });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,parameters,accuracy,f1_macro,precision_at_5";

/// Failed variants get NaN metrics.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let (a, f, p) = r.result.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.accuracy, m.f1_macro, m.precision_at_5));
        writeln!(s, "{},{},{a},{f},{p}", r.variant, r.parameters).unwrap();
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8}{:>12}{:>10}{:>10}\n", "variant", "parameters", "accuracy", "f1");
    for r in rows {
        match &r.result {
            Ok(m) => writeln!(s, "{:<8}{:>12}{:>10.4}{:>10.4}", r.variant.as_str(), r.parameters, m.accuracy, m.f1_macro),
            Err(e) => writeln!(s, "{:<8}{:>12}  failed: {e}", r.variant.as_str(), r.parameters),
        }
        .unwrap();
    }
    s
}
