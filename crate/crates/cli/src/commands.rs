//! Subcommand implementations. Every artifact lands under the configured
//! output directory; reruns refuse to overwrite without --force.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use bcr_core::backbone::{fit_gmm_em, DiffusionBackbone, GmmBackbone};
use bcr_core::data::{
    decode, encode, fit_encoder, impute, load_csv, split, write_table_csv, EncodedMatrix, Encoder,
    Target, Task,
};
use bcr_core::error::{BcrError, Result};
use bcr_core::eval::{
    aggregate, dcr1_share, f1, macro_f1, manifold_precision_recall, nndr, train_downstream, tstr,
    DeltaReport, MetricReport,
};
use bcr_core::gkd::{relabel, train_teacher};
use bcr_core::representation::{FeatureLayout, RepMap};
use bcr_core::samplers::{run_sampler, SelectionSpec};
use bcr_core::search::{
    augment_with_target, generate_pool, k_sweep, optimize, EncodedSplits, SearchContext,
};

use crate::config::{config_hash, RunConfig};

pub struct CommonArgs {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub force: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    n_rows: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    task: Task,
    encoded_dim: usize,
    split_seed: u64,
    config: RunConfig,
}

fn write_guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(BcrError::config(format!(
            "refusing to overwrite {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    write_guard(path, force)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| BcrError::config(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| BcrError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| BcrError::Format(format!("{}: {e}", path.display())))
}

fn load_manifest(out: &Path, expected_hash: &str) -> Result<Manifest> {
    let manifest: Manifest = read_json(&out.join("manifest.json"))?;
    if manifest.config_hash != expected_hash {
        return Err(BcrError::Format(format!(
            "config hash mismatch: manifest {} vs current {expected_hash}; re-run prepare",
            manifest.config_hash
        )));
    }
    Ok(manifest)
}

fn load_splits(out: &Path) -> Result<(EncodedSplits, Encoder)> {
    let encoder: Encoder = read_json(&out.join("encoder.json"))?;
    let train: EncodedMatrix = read_json(&out.join("train.json"))?;
    let val: EncodedMatrix = read_json(&out.join("val.json"))?;
    let test: EncodedMatrix = read_json(&out.join("test.json"))?;
    let layout = FeatureLayout::from_encoder(&encoder);
    let task = encoder.schema.target.task;
    Ok((EncodedSplits { train, val, test, task, layout }, encoder))
}

fn load_backbone(out: &Path) -> Result<GmmBackbone> {
    read_json(&out.join("backbone.json"))
}

/// Ingest, split, impute, encode; write the split artifacts and manifest.
pub fn cmd_prepare(cfg: &RunConfig, cfg_text: &str, args: &CommonArgs) -> Result<()> {
    let schema = cfg.schema()?;
    let table = load_csv(&cfg.dataset.csv, &schema)?;
    let n_rows = table.rows.len();
    let split_seed = args.seed.unwrap_or(cfg.split.seed);
    let ratios = (
        1.0 - cfg.split.val_fraction - cfg.split.test_fraction,
        cfg.split.val_fraction,
        cfg.split.test_fraction,
    );
    let splits = split(&table, ratios, split_seed)?;
    let train = impute(&splits.train, &splits.train)?;
    let val = impute(&splits.validation, &splits.train)?;
    let test = impute(&splits.test, &splits.train)?;
    let encoder = fit_encoder(&train)?;
    let enc_train = encode(&train, &encoder)?;
    let enc_val = encode(&val, &encoder)?;
    let enc_test = encode(&test, &encoder)?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("encoder.json"), &encoder, args.force)?;
    write_json(&args.out.join("train.json"), &enc_train, args.force)?;
    write_json(&args.out.join("val.json"), &enc_val, args.force)?;
    write_json(&args.out.join("test.json"), &enc_test, args.force)?;
    let manifest = Manifest {
        config_hash: config_hash(cfg_text),
        n_rows,
        n_train: enc_train.n_rows(),
        n_val: enc_val.n_rows(),
        n_test: enc_test.n_rows(),
        task: schema.target.task,
        encoded_dim: encoder.encoded_dim,
        split_seed,
        config: cfg.clone(),
    };
    write_json(&args.out.join("manifest.json"), &manifest, args.force)?;
    println!(
        "prepared {} rows (train {}, val {}, test {}), encoded dim {}",
        n_rows,
        manifest.n_train,
        manifest.n_val,
        manifest.n_test,
        manifest.encoded_dim
    );
    Ok(())
}

/// Fit the frozen analytic backbone on the encoded training split.
pub fn cmd_fit_backbone(cfg: &RunConfig, cfg_text: &str, args: &CommonArgs) -> Result<()> {
    load_manifest(&args.out, &config_hash(cfg_text))?;
    let (splits, _) = load_splits(&args.out)?;
    let b = &cfg.backbone;
    let seed = args.seed.unwrap_or(b.seed);
    let backbone = match &splits.train.target {
        Target::Classes(labels) => {
            let n_classes = labels.iter().max().map_or(1, |m| m + 1);
            let mut mixtures = Vec::with_capacity(n_classes);
            for class in 0..n_classes {
                let idx: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == class).collect();
                let mut sub = Array2::zeros((idx.len(), splits.train.dim()));
                for (k, &i) in idx.iter().enumerate() {
                    sub.row_mut(k).assign(&splits.train.values.row(i));
                }
                let k_mix = b.k_mix.min(idx.len().max(1));
                mixtures.push(fit_gmm_em(&sub, k_mix, seed, b.em_iters, b.em_tol)?);
            }
            GmmBackbone::new_class_conditional(mixtures, b.t_steps)
        }
        _ => {
            let aug = augment_with_target(&splits.train)?;
            let gmm = fit_gmm_em(&aug.values, b.k_mix, seed, b.em_iters, b.em_tol)?;
            GmmBackbone::new_global(gmm, b.t_steps)
        }
    };
    write_json(&args.out.join("backbone.json"), &backbone, args.force)?;
    println!("fitted backbone: dim {}, T {}", backbone.dim(), backbone.t_steps);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub stage2_s: f64,
    pub stage3_s: f64,
    pub gkd_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineReport {
    pub per_seed: Vec<MetricReport>,
    pub psi_mean: f64,
    pub psi_sd: f64,
    /// TSTR of the learner trained on the real training data.
    pub psi_real: f64,
    pub task: Task,
    pub seeds: Vec<u64>,
    pub runtime: RuntimeBreakdown,
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Full single-configuration pipeline: Stage I-III per evaluation seed,
/// metrics on the test split, decoded D_syn CSV for the first seed.
pub fn cmd_refine(cfg: &RunConfig, cfg_text: &str, args: &CommonArgs) -> Result<()> {
    load_manifest(&args.out, &config_hash(cfg_text))?;
    let (splits, encoder) = load_splits(&args.out)?;
    let backbone = load_backbone(&args.out)?;
    let params = cfg.stage2_params()?;
    let sampler = cfg.sampler_kind()?;
    let ctx = SearchContext {
        splits: &splits,
        backbone: &backbone,
        m_factor: cfg.stage2.m,
        batch_size: cfg.stage2.batch_size,
        vae_epochs: cfg.stage2.vae_epochs,
        ref_type: cfg.ref_type()?,
    };
    let base_seed = args.seed.unwrap_or(cfg.split.seed);
    let n_r = splits.train.n_rows();
    let target_count = ((cfg.stage3.k * n_r as f64).round() as usize).max(1);

    let use_gkd = cfg.stage3.gkd && splits.task.is_classification();
    if cfg.stage3.gkd && !splits.task.is_classification() {
        eprintln!("warning: gkd requested for a regression task; disabled");
    }

    let run_dir = args.out.join("refine");
    fs::create_dir_all(&run_dir)?;
    let mut per_seed = Vec::new();
    let mut psis = Vec::new();
    let mut seeds = Vec::new();
    let mut stage2_s = 0.0;
    let mut stage3_s = 0.0;
    let mut gkd_s = 0.0;
    let started = Instant::now();
    let mut first_syn: Option<EncodedMatrix> = None;
    for s in 0..cfg.eval.seeds as u64 {
        let seed = base_seed.wrapping_add(s);
        seeds.push(seed);
        let t0 = Instant::now();
        let mut pool = generate_pool(&ctx, &params, seed)?;
        stage2_s += t0.elapsed().as_secs_f64();

        if use_gkd {
            let t = Instant::now();
            let teacher = train_teacher(&splits.train, seed, 0.3, 200)?;
            pool = relabel(&pool, &teacher)?;
            gkd_s += t.elapsed().as_secs_f64();
        }

        let t1 = Instant::now();
        let mut spec = SelectionSpec::new(sampler, target_count.min(pool.len()), seed);
        spec.batch = cfg.stage3.batch.min(pool.len());
        spec.k_neighbors = cfg.stage3.k_neighbors;
        let rep = RepMap::identity(pool.features.ncols());
        let idx = run_sampler(&mut pool, &splits.train, &spec, &rep)?;
        let syn = pool.select(&idx).as_matrix();
        stage3_s += t1.elapsed().as_secs_f64();

        let psi = tstr(&syn, &splits.val, &splits.test, splits.task, seed)?;
        let report = metric_report(&syn, &splits, psi, seed)?;
        psis.push(psi);
        per_seed.push(report);
        if first_syn.is_none() {
            first_syn = Some(syn);
        }
    }
    let psi_real = tstr(&splits.train, &splits.val, &splits.test, splits.task, base_seed)?;
    let (psi_mean, psi_sd) = mean_sd(&psis);
    let report = RefineReport {
        per_seed,
        psi_mean,
        psi_sd,
        psi_real,
        task: splits.task,
        seeds,
        runtime: RuntimeBreakdown {
            stage2_s,
            stage3_s,
            gkd_s,
            total_s: started.elapsed().as_secs_f64(),
        },
    };
    write_json(&run_dir.join("metrics.json"), &report, args.force)?;

    // Decoded synthetic table for the first seed.
    let syn = first_syn.unwrap();
    let table = decode(&syn, &encoder)?;
    let csv_path = run_dir.join("d_syn.csv");
    write_guard(&csv_path, args.force)?;
    write_table_csv(&table, &csv_path)?;
    println!(
        "refine: psi {psi_mean:.4} +- {psi_sd:.4} over {} seeds (real baseline {psi_real:.4})",
        cfg.eval.seeds
    );
    Ok(())
}

fn metric_report(
    syn: &EncodedMatrix,
    splits: &EncodedSplits,
    psi: f64,
    seed: u64,
) -> Result<MetricReport> {
    let k = 10usize
        .min(splits.train.n_rows().saturating_sub(1))
        .min(syn.n_rows().saturating_sub(1))
        .max(1);
    let (precision, recall) = manifold_precision_recall(&syn.values, &splits.train.values, k)?;
    let dcr = dcr1_share(&syn.values, &splits.train.values, &splits.test.values, seed)?;
    let nn = nndr(&syn.values, &splits.train.values)?;
    let f1_value = if splits.task.is_classification() {
        let learner = train_downstream(syn, &splits.val, splits.task, seed)?;
        let proba = learner.predict_proba(&splits.test.values)?;
        let preds: Vec<usize> = (0..proba.nrows())
            .map(|i| {
                let row = proba.row(i);
                (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
            })
            .collect();
        let labels = match &splits.test.target {
            Target::Classes(l) => l.clone(),
            _ => return Err(BcrError::config("classification test split lacks labels")),
        };
        Some(match splits.task {
            Task::Binary => f1(&preds, &labels)?,
            Task::Multiclass(n) => macro_f1(&preds, &labels, n)?,
            Task::Regression => unreachable!(),
        })
    } else {
        None
    };
    Ok(MetricReport { psi, f1: f1_value, precision, recall, dcr1_share: dcr, nndr: nn })
}

/// Outer TPE search; emits the JSON-lines trial log and best-config report.
pub fn cmd_search(cfg: &RunConfig, cfg_text: &str, args: &CommonArgs) -> Result<()> {
    load_manifest(&args.out, &config_hash(cfg_text))?;
    let (splits, _) = load_splits(&args.out)?;
    let backbone = load_backbone(&args.out)?;
    let ctx = SearchContext {
        splits: &splits,
        backbone: &backbone,
        m_factor: cfg.stage2.m,
        batch_size: cfg.stage2.batch_size,
        vae_epochs: cfg.stage2.vae_epochs,
        ref_type: cfg.ref_type()?,
    };
    let space = cfg.search_space()?;
    let seed = args.seed.unwrap_or(cfg.split.seed);
    let (best, log) = optimize(&ctx, &space, cfg.search.n_trials, cfg.search.n_start, seed)?;

    let dir = args.out.join("search");
    fs::create_dir_all(&dir)?;
    let log_path = dir.join("trials.jsonl");
    write_guard(&log_path, args.force)?;
    let mut f = fs::File::create(&log_path)?;
    for trial in &log {
        let line = serde_json::to_string(trial)
            .map_err(|e| BcrError::config(format!("serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    write_json(&dir.join("best.json"), &best, args.force)?;
    println!(
        "search: best objective {:.4} at trial {} (sampler {}, gkd {})",
        best.objective,
        best.trial,
        best.sampler.name(),
        best.gkd
    );
    Ok(())
}

/// K-sweep curve CSV (columns k, mean, sd, ablation).
pub fn cmd_sweep(cfg: &RunConfig, cfg_text: &str, args: &CommonArgs) -> Result<()> {
    load_manifest(&args.out, &config_hash(cfg_text))?;
    let (splits, _) = load_splits(&args.out)?;
    let backbone = load_backbone(&args.out)?;
    let ctx = SearchContext {
        splits: &splits,
        backbone: &backbone,
        m_factor: cfg.stage2.m,
        batch_size: cfg.stage2.batch_size,
        vae_epochs: cfg.stage2.vae_epochs,
        ref_type: cfg.ref_type()?,
    };
    let params = cfg.stage2_params()?;
    let seeds: Vec<u64> = match args.seed {
        Some(s) => cfg.sweep.seeds.iter().enumerate().map(|(i, _)| s + i as u64).collect(),
        None => cfg.sweep.seeds.clone(),
    };
    let points = k_sweep(&ctx, &params, &cfg.sweep.k_values, &seeds)?;

    let dir = args.out.join("sweep");
    fs::create_dir_all(&dir)?;
    let path = dir.join("sweep.csv");
    write_guard(&path, args.force)?;
    let mut f = fs::File::create(&path)?;
    writeln!(f, "k,mean,sd,ablation")?;
    for p in &points {
        writeln!(f, "{},{},{},{}", p.k, p.mean, p.sd, p.ablation)?;
    }
    println!("sweep: {} points written to {}", points.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportOut {
    delta: DeltaReport,
    runs: Vec<RunSummary>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    dir: String,
    psi_mean: f64,
    psi_real: f64,
    delta_percent: f64,
    stage2_s: f64,
    stage3_s: f64,
    gkd_s: f64,
    total_s: f64,
}

/// Aggregate refine reports across run directories into a DeltaReport plus
/// a per-run runtime table.
pub fn cmd_report(dirs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    if dirs.is_empty() {
        return Err(BcrError::config("report needs at least one run directory"));
    }
    let mut deltas = Vec::new();
    let mut runs = Vec::new();
    for dir in dirs {
        let report: RefineReport = read_json(&dir.join("refine").join("metrics.json"))?;
        let delta =
            bcr_core::eval::delta_percent(report.psi_mean, report.psi_real, report.task)?;
        deltas.push(delta);
        runs.push(RunSummary {
            dir: dir.display().to_string(),
            psi_mean: report.psi_mean,
            psi_real: report.psi_real,
            delta_percent: delta,
            stage2_s: report.runtime.stage2_s,
            stage3_s: report.runtime.stage3_s,
            gkd_s: report.runtime.gkd_s,
            total_s: report.runtime.total_s,
        });
    }
    let delta = aggregate(&deltas, 10_000, 0)?;
    let out_report = ReportOut { delta, runs };
    write_json(out, &out_report, force)?;
    println!(
        "report: median delta {:+.2}% ({} / {} wins), p = {:.4}",
        out_report.delta.median,
        out_report.delta.wins,
        out_report.delta.n,
        out_report.delta.wilcoxon_p
    );
    Ok(())
}
