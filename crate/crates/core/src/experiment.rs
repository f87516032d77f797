//! Evaluation of trained models and multi-seed variant sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::{elbo_score, LossWeights, ScoreOptions, SliceScore};
use crate::metrics::{auroc, average_precision, dataset_mse, ScoredSet};
use crate::model::{Model, Variant};
use crate::phantom::{Dataset, Label};
use crate::rng::{derive_seed, SeedStream};
use crate::train::{epoch_log_csv, train_with, Checkpoint, EpochLog, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub score: ScoreOptions,
    /// Seed of the latent draws used for scoring.
    pub score_seed: u64,
    /// Use one posterior draw instead of the posterior mean for reconstruction MSE.
    pub sampled_mse: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub variant: Variant,
    pub mse: f64,
    pub auroc: f64,
    pub ap: f64,
    pub scores: Vec<SliceScore>,
    pub labels: Vec<Label>,
}

/// Reconstruction MSE on the test split plus AUROC and AP of the negative-ELBO score.
pub fn evaluate(model: &Model, weights: &LossWeights, data: &Dataset, opts: &EvalOptions) -> Result<EvalResult> {
    if model.config.image_size != data.image_size() {
        return Err(Error::Invalid(format!(
            "model expects {0}x{0} slices, dataset has {1}x{1}",
            model.config.image_size,
            data.image_size()
        )));
    }
    let mut mse_rng = SeedStream::new(derive_seed(opts.score_seed, &[1]));
    let mse = dataset_mse(model, &data.test, opts.sampled_mse.then_some(&mut mse_rng))?;
    let mut rng = SeedStream::new(opts.score_seed);
    let scores = elbo_score(model, &data.test, weights, &mut rng, &opts.score)?;
    let set = ScoredSet::new(
        scores.iter().map(|s| s.score).collect(),
        data.test_labels.iter().map(|l| *l == Label::Anomalous).collect(),
    )?;
    Ok(EvalResult {
        variant: model.variant(),
        mse,
        auroc: auroc(&set)?,
        ap: average_precision(&set)?,
        scores,
        labels: data.test_labels.clone(),
    })
}

/// Per-slice score table: `slice_id,label,term1,term2,term3,kl1,kl2,score`.
pub fn scores_csv(r: &EvalResult) -> String {
    let mut s = String::from("slice_id,label,term1,term2,term3,kl1,kl2,score\n");
    for (i, (sc, l)) in r.scores.iter().zip(&r.labels).enumerate() {
        let t = sc.terms;
        writeln!(
            s,
            "{i},{},{},{},{},{},{},{}",
            u8::from(*l == Label::Anomalous),
            t.term1,
            t.term2,
            t.term3,
            t.kl1,
            t.kl2,
            sc.score
        )
        .unwrap();
    }
    s
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableRow {
    pub variant: Variant,
    pub mse: (f64, f64),
    pub auroc: (f64, f64),
    pub ap: (f64, f64),
}

impl TableRow {
    pub fn from_results(variant: Variant, results: &[&EvalResult]) -> Self {
        let col = |f: fn(&EvalResult) -> f64| mean_std(&results.iter().map(|r| f(r)).collect::<Vec<_>>());
        TableRow {
            variant,
            mse: col(|r| r.mse),
            auroc: col(|r| r.auroc),
            ap: col(|r| r.ap),
        }
    }
}

pub const TABLE_HEADER: &str = "variant,mse_mean,mse_std,auroc_mean,auroc_std,ap_mean,ap_std";

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant, r.mse.0, r.mse.1, r.auroc.0, r.auroc.1, r.ap.0, r.ap.1
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Template; `seed` and `arch.variant` are set per run.
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub eval: EvalResult,
    pub log: Vec<EpochLog>,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<TableRow>,
}

impl SweepResult {
    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    pub fn run(&self, v: Variant, seed: u64) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.variant == v && r.seed == seed)
    }
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("variant,seed,mse,auroc,ap,term3_first,term3_last,checkpoint_sha256\n");
    for r in runs {
        let t3 = |e: Option<&EpochLog>| e.map_or(0.0, |e| e.terms.term3);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.eval.mse,
            r.eval.auroc,
            r.eval.ap,
            t3(r.log.first()),
            t3(r.log.last()),
            r.checkpoint_sha256
        )
        .unwrap();
    }
    s
}

/// Progress notifications from [`sweep`].
pub enum SweepEvent<'a> {
    Epoch {
        variant: Variant,
        seed: u64,
        log: &'a EpochLog,
    },
    Run(&'a RunRecord),
}

/// Trains and evaluates every `(variant, seed)` pair sequentially.
///
/// When `out` is given, writes `table.csv`, `runs.csv`, `hashes.txt`,
/// `timings.txt` and per-run directories with checkpoint, epoch log and scores.
pub fn sweep(
    data: &Dataset,
    cfg: &SweepConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(SweepEvent<'_>),
) -> Result<SweepResult> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one variant and one seed".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write = |rel: &str, content: &[u8]| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&p, content).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };

    let mut runs = Vec::new();
    let mut timings = String::from("# wall-clock seconds per run; not part of the reproducible outputs\n");
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.arch.variant = variant;
            let started = std::time::Instant::now();
            let outcome = train_with(Trainer::new(tc.clone())?, &data.train, |log| {
                progress(SweepEvent::Epoch { variant, seed, log })
            })?;
            let ckpt: Checkpoint = outcome.checkpoint;
            let eval_opts = EvalOptions {
                score_seed: derive_seed(seed, &[2]),
                ..cfg.eval
            };
            let eval = evaluate(&ckpt.model(), &tc.weights, data, &eval_opts)?;
            let bytes = ckpt.encode()?;
            let sha = crate::train::sha256_hex(&bytes);
            let run_dir = format!("{variant}_seed{seed}");
            write(&format!("{run_dir}/checkpoint.pchk"), &bytes)?;
            write(
                &format!("{run_dir}/epoch_log.csv"),
                epoch_log_csv(&outcome.log, false).as_bytes(),
            )?;
            write(&format!("{run_dir}/scores.csv"), scores_csv(&eval).as_bytes())?;
            writeln!(timings, "{variant},{seed},{:.3}", started.elapsed().as_secs_f64()).unwrap();
            let rec = RunRecord {
                variant,
                seed,
                eval,
                log: outcome.log,
                checkpoint_sha256: sha,
            };
            progress(SweepEvent::Run(&rec));
            runs.push(rec);
        }
    }
    let rows: Vec<TableRow> = cfg
        .variants
        .iter()
        .map(|&v| {
            TableRow::from_results(
                v,
                &runs
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| &r.eval)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    write("table.csv", table_csv(&rows).as_bytes())?;
    write("runs.csv", runs_csv(&runs).as_bytes())?;
    let hashes: String = runs
        .iter()
        .map(|r| {
            format!(
                "{}  {}_seed{}/checkpoint.pchk\n",
                r.checkpoint_sha256, r.variant, r.seed
            )
        })
        .collect();
    write("hashes.txt", hashes.as_bytes())?;
    write("timings.txt", timings.as_bytes())?;
    Ok(SweepResult { runs, rows })
}
