//! Outer TPE-style search over Stage II hyperparameters, the inner Stage
//! III grid (five samplers x distillation toggle), and the K-sweep harness.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    oversample_noise, reverse_diffuse, DiffusionBackbone, GammaFamily, GuidanceConfig, RefType,
};
use crate::data::{EncodedMatrix, Target, Task};
use crate::error::{BcrError, Result};
use crate::eval::{score_learner, train_downstream};
use crate::gkd::{relabel, train_teacher, Teacher};
use crate::representation::{
    vae_train, AnnealFamily, AnnealSchedule, FeatureLayout, RepMap, VaeTrainConfig,
};
use crate::samplers::{run_sampler, CandidatePool, SamplerKind, SelectionSpec};

/// Representation-map choice exposed to the outer search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceChoice {
    None,
    Identity,
    BetaVae,
}

impl GuidanceChoice {
    const ALL: [GuidanceChoice; 3] =
        [GuidanceChoice::None, GuidanceChoice::Identity, GuidanceChoice::BetaVae];
}

const GAMMA_FAMILIES: [GammaFamily; 4] = [
    GammaFamily::Constant,
    GammaFamily::Linear,
    GammaFamily::Cosine,
    GammaFamily::Sine,
];
const ANNEAL_FAMILIES: [AnnealFamily; 5] = [
    AnnealFamily::Constant,
    AnnealFamily::Linear,
    AnnealFamily::Cosine,
    AnnealFamily::Sine,
    AnnealFamily::Cyclical,
];
const RATIOS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.1];
const VAE_DIMS: [usize; 4] = [4, 8, 16, 32];

/// Stage II search domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub k_min: f64,
    pub k_max: f64,
    pub k_step: f64,
    pub gamma_max_lo: f64,
    pub gamma_max_hi: f64,
    pub gamma_min_lo: f64,
    pub t_g_min: usize,
    pub t_g_max: usize,
    /// Restrict the guidance toggle (e.g. force `none` for ablations).
    pub guidance: Vec<GuidanceChoice>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            k_min: 0.1,
            k_max: 25.0,
            k_step: 0.1,
            gamma_max_lo: 0.1,
            gamma_max_hi: 5.0,
            gamma_min_lo: 1e-8,
            t_g_min: 3,
            t_g_max: 20,
            guidance: GuidanceChoice::ALL.to_vec(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.k_min <= 0.0 || self.k_min > self.k_max || self.k_step <= 0.0 {
            return Err(BcrError::config("invalid K domain"));
        }
        if self.gamma_max_lo <= 0.0 || self.gamma_max_lo > self.gamma_max_hi {
            return Err(BcrError::config("invalid gamma_max domain"));
        }
        if self.t_g_min < 3 || self.t_g_min > self.t_g_max {
            return Err(BcrError::config("invalid t_g domain"));
        }
        if self.guidance.is_empty() {
            return Err(BcrError::config("guidance domain is empty"));
        }
        Ok(())
    }

    fn round_k(&self, k: f64) -> f64 {
        let stepped = (k / self.k_step).round() * self.k_step;
        (stepped.max(self.k_min).min(self.k_max) * 1e9).round() / 1e9
    }

    /// Upper bound of the gamma_min domain given gamma_max.
    fn gamma_min_hi(&self, gamma_max: f64) -> f64 {
        (gamma_max - 0.1).max(self.gamma_min_lo)
    }
}

/// One sampled Stage II configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Params {
    pub k: f64,
    pub guidance: GuidanceChoice,
    pub family: GammaFamily,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub t_g: usize,
    /// Reference batching fraction; `None` iff guidance is disabled.
    pub ratio: Option<f64>,
    pub vae_dim: Option<usize>,
    pub vae_schedule: Option<AnnealFamily>,
}

/// One completed outer-search trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: Stage2Params,
    pub sampler: SamplerKind,
    pub gkd: bool,
    /// Maximized objective (AUROC family, or -RMSE for regression).
    pub objective: f64,
    /// Raw validation psi (equals objective except for regression).
    pub psi: f64,
    pub seed: u64,
}

/// TPE-lite state: univariate Parzen estimators over the good/bad split.
#[derive(Debug, Clone)]
pub struct TpeState {
    pub history: Vec<TrialRecord>,
    pub gamma_q: f64,
    pub n_start: usize,
    pub n_candidates: usize,
}

impl TpeState {
    pub fn new(n_start: usize) -> Self {
        TpeState { history: Vec::new(), gamma_q: 0.25, n_start, n_candidates: 24 }
    }

    /// Finished trials with finite objectives, split into (good, bad) by the
    /// objective quantile.
    fn split(&self) -> (Vec<&TrialRecord>, Vec<&TrialRecord>) {
        let mut finite: Vec<&TrialRecord> =
            self.history.iter().filter(|t| t.objective.is_finite()).collect();
        finite.sort_by(|a, b| b.objective.partial_cmp(&a.objective).unwrap());
        let n_good = ((finite.len() as f64 * self.gamma_q).ceil() as usize)
            .clamp(1, finite.len().max(1));
        let bad = finite.split_off(n_good.min(finite.len()));
        (finite, bad)
    }
}

fn silverman_bandwidth(values: &[f64], span: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let bw = 1.06 * sd * n.powf(-0.2);
    bw.max(span * 1e-3)
}

fn parzen_density(x: f64, centers: &[f64], bw: f64) -> f64 {
    let norm = 1.0 / (centers.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    centers
        .iter()
        .map(|&c| {
            let z = (x - c) / bw;
            (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        * norm
}

/// TPE step for one continuous dimension: sample candidates from the good
/// Parzen mixture, keep the argmax of the good/bad density ratio.
fn tpe_continuous(
    good: &[f64],
    bad: &[f64],
    lo: f64,
    hi: f64,
    log_scale: bool,
    n_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let transform = |v: f64| if log_scale { v.ln() } else { v };
    let back = |v: f64| if log_scale { v.exp() } else { v };
    let (tlo, thi) = (transform(lo), transform(hi));
    if good.is_empty() {
        return back(rng.gen_range(tlo..=thi));
    }
    let tg: Vec<f64> = good.iter().map(|&v| transform(v)).collect();
    let tb: Vec<f64> = bad.iter().map(|&v| transform(v)).collect();
    let span = thi - tlo;
    let bw_g = silverman_bandwidth(&tg, span);
    let bw_b = if tb.is_empty() { bw_g } else { silverman_bandwidth(&tb, span) };
    let mut best = tg[0];
    let mut best_ratio = f64::MIN;
    for _ in 0..n_candidates {
        let center = tg[rng.gen_range(0..tg.len())];
        let draw = (center + bw_g * crate::representation::standard_normal(rng)).clamp(tlo, thi);
        let l = parzen_density(draw, &tg, bw_g);
        let g = if tb.is_empty() { 1.0 } else { parzen_density(draw, &tb, bw_b).max(1e-12) };
        let ratio = l / g;
        if ratio > best_ratio {
            best_ratio = ratio;
            best = draw;
        }
    }
    back(best)
}

/// Categorical TPE step: sample from +1-smoothed good-subset frequencies.
fn tpe_categorical(good_counts: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let weights: Vec<f64> = good_counts.iter().map(|&c| c as f64 + 1.0).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i;
        }
        draw -= w;
    }
    weights.len() - 1
}

/// Suggest the next Stage II configuration. The first `n_start` trials are
/// uniform over the domains (log-uniform where marked).
pub fn suggest(state: &TpeState, space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<Stage2Params> {
    space.validate()?;
    let (good, bad) = state.split();
    let startup = state.history.len() < state.n_start || good.is_empty();

    let uniform_log =
        |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.gen_range(lo.ln()..=hi.ln())).exp();

    let guidance = if startup {
        space.guidance[rng.gen_range(0..space.guidance.len())]
    } else {
        let counts: Vec<usize> = space
            .guidance
            .iter()
            .map(|&g| good.iter().filter(|t| t.params.guidance == g).count())
            .collect();
        space.guidance[tpe_categorical(&counts, rng)]
    };

    let k = if startup {
        space.round_k(rng.gen_range(space.k_min..=space.k_max))
    } else {
        let gk: Vec<f64> = good.iter().map(|t| t.params.k).collect();
        let bk: Vec<f64> = bad.iter().map(|t| t.params.k).collect();
        space.round_k(tpe_continuous(
            &gk,
            &bk,
            space.k_min,
            space.k_max,
            false,
            state.n_candidates,
            rng,
        ))
    };

    let family = if startup {
        GAMMA_FAMILIES[rng.gen_range(0..GAMMA_FAMILIES.len())]
    } else {
        let counts: Vec<usize> = GAMMA_FAMILIES
            .iter()
            .map(|&f| good.iter().filter(|t| t.params.family == f).count())
            .collect();
        GAMMA_FAMILIES[tpe_categorical(&counts, rng)]
    };

    let gamma_max = if startup {
        uniform_log(rng, space.gamma_max_lo, space.gamma_max_hi)
    } else {
        let gv: Vec<f64> = good.iter().map(|t| t.params.gamma_max).collect();
        let bv: Vec<f64> = bad.iter().map(|t| t.params.gamma_max).collect();
        tpe_continuous(
            &gv,
            &bv,
            space.gamma_max_lo,
            space.gamma_max_hi,
            true,
            state.n_candidates,
            rng,
        )
    };

    let gmin_hi = space.gamma_min_hi(gamma_max);
    let gamma_min = if startup {
        uniform_log(rng, space.gamma_min_lo, gmin_hi)
    } else {
        let gv: Vec<f64> = good.iter().map(|t| t.params.gamma_min).collect();
        let bv: Vec<f64> = bad.iter().map(|t| t.params.gamma_min).collect();
        tpe_continuous(
            &gv,
            &bv,
            space.gamma_min_lo,
            space.gamma_min_hi(space.gamma_max_hi),
            true,
            state.n_candidates,
            rng,
        )
    }
    // Re-clamp after both draws so the conditional bound always holds.
    .clamp(space.gamma_min_lo, gmin_hi);

    let t_g = if startup {
        rng.gen_range(space.t_g_min..=space.t_g_max)
    } else {
        let gv: Vec<f64> = good.iter().map(|t| t.params.t_g as f64).collect();
        let bv: Vec<f64> = bad.iter().map(|t| t.params.t_g as f64).collect();
        tpe_continuous(
            &gv,
            &bv,
            space.t_g_min as f64,
            space.t_g_max as f64,
            false,
            state.n_candidates,
            rng,
        )
        .round() as usize
    }
    .clamp(space.t_g_min, space.t_g_max);

    // Conditional dimensions: ratio only with guidance on, VAE sub-space
    // only with the beta-VAE mapping.
    let ratio = if guidance == GuidanceChoice::None {
        None
    } else if startup {
        Some(RATIOS[rng.gen_range(0..RATIOS.len())])
    } else {
        let counts: Vec<usize> = RATIOS
            .iter()
            .map(|&r| good.iter().filter(|t| t.params.ratio == Some(r)).count())
            .collect();
        Some(RATIOS[tpe_categorical(&counts, rng)])
    };

    let (vae_dim, vae_schedule) = if guidance == GuidanceChoice::BetaVae {
        let dim = if startup {
            VAE_DIMS[rng.gen_range(0..VAE_DIMS.len())]
        } else {
            let counts: Vec<usize> = VAE_DIMS
                .iter()
                .map(|&d| good.iter().filter(|t| t.params.vae_dim == Some(d)).count())
                .collect();
            VAE_DIMS[tpe_categorical(&counts, rng)]
        };
        let sched = if startup {
            ANNEAL_FAMILIES[rng.gen_range(0..ANNEAL_FAMILIES.len())]
        } else {
            let counts: Vec<usize> = ANNEAL_FAMILIES
                .iter()
                .map(|&s| good.iter().filter(|t| t.params.vae_schedule == Some(s)).count())
                .collect();
            ANNEAL_FAMILIES[tpe_categorical(&counts, rng)]
        };
        (Some(dim), Some(sched))
    } else {
        (None, None)
    };

    Ok(Stage2Params {
        k,
        guidance,
        family,
        gamma_max,
        gamma_min,
        t_g,
        ratio,
        vae_dim,
        vae_schedule,
    })
}

/// Encoded dataset splits plus the feature layout of the encoded space.
#[derive(Debug, Clone)]
pub struct EncodedSplits {
    pub train: EncodedMatrix,
    pub val: EncodedMatrix,
    pub test: EncodedMatrix,
    pub task: Task,
    pub layout: FeatureLayout,
}

/// Everything a trial needs besides its sampled parameters.
pub struct SearchContext<'a> {
    pub splits: &'a EncodedSplits,
    pub backbone: &'a dyn DiffusionBackbone,
    /// Oversampling multiplier M.
    pub m_factor: usize,
    /// Stage II denoising batch size.
    pub batch_size: usize,
    pub vae_epochs: usize,
    /// Reference batching type; defaults by task (class-conditional for
    /// classification, global for regression) when `None`.
    pub ref_type: Option<RefType>,
}

impl SearchContext<'_> {
    fn ref_type(&self) -> RefType {
        self.ref_type.unwrap_or(match self.splits.task {
            Task::Regression => RefType::Global,
            _ => RefType::ClassConditional,
        })
    }

    fn n_r(&self) -> usize {
        self.splits.train.n_rows()
    }

    /// Real matrix in backbone space: the target joins the features as an
    /// extra trailing column for regression.
    fn stage2_real(&self) -> Result<EncodedMatrix> {
        match self.splits.task {
            Task::Regression => augment_with_target(&self.splits.train),
            _ => Ok(self.splits.train.clone()),
        }
    }

    fn class_counts(&self) -> Option<Vec<usize>> {
        match &self.splits.train.target {
            Target::Classes(labels) => {
                let n = labels.iter().max().map_or(1, |m| m + 1);
                let mut counts = vec![0usize; n];
                for &c in labels {
                    counts[c] += 1;
                }
                Some(counts)
            }
            _ => None,
        }
    }
}

/// Append the regression target as a trailing feature column.
pub fn augment_with_target(m: &EncodedMatrix) -> Result<EncodedMatrix> {
    let values = match &m.target {
        Target::Values(v) => v,
        _ => return Err(BcrError::config("target augmentation is regression-only")),
    };
    let (n, d) = (m.values.nrows(), m.values.ncols());
    let mut out = Array2::zeros((n, d + 1));
    for i in 0..n {
        for j in 0..d {
            out[[i, j]] = m.values[[i, j]];
        }
        out[[i, d]] = values[i];
    }
    Ok(EncodedMatrix { values: out, target: m.target.clone() })
}

/// Split the trailing target column back off a generated matrix.
fn split_target_column(features: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = features.ncols() - 1;
    let values: Vec<f64> = (0..features.nrows()).map(|i| features[[i, d]]).collect();
    (features.slice(ndarray::s![.., ..d]).to_owned(), values)
}

fn layout_with_target(layout: &FeatureLayout) -> FeatureLayout {
    let mut slots = layout.numeric_slots.clone();
    slots.push(layout.dim);
    FeatureLayout { numeric_slots: slots, groups: layout.groups.clone(), dim: layout.dim + 1 }
}

/// Build the Stage II representation map for a trial.
fn build_rep(ctx: &SearchContext, params: &Stage2Params, trial_seed: u64) -> Result<RepMap> {
    let stage2_dim = ctx.backbone.dim();
    match params.guidance {
        GuidanceChoice::None | GuidanceChoice::Identity => Ok(RepMap::identity(stage2_dim)),
        GuidanceChoice::BetaVae => {
            let layout = match ctx.splits.task {
                Task::Regression => layout_with_target(&ctx.splits.layout),
                _ => ctx.splits.layout.clone(),
            };
            let schedule = AnnealSchedule::new(
                params.vae_schedule.ok_or_else(|| BcrError::config("missing VAE schedule"))?,
                0.0,
                0.1,
                ctx.vae_epochs,
                (ctx.vae_epochs / 4).max(1),
            )?;
            let latent = params.vae_dim.ok_or_else(|| BcrError::config("missing VAE dim"))?;
            let cfg = VaeTrainConfig::new(latent, schedule, ctx.vae_epochs, 0.05, trial_seed);
            let train = ctx.stage2_real()?;
            let (vae, _) = vae_train(&train, layout, &cfg)?;
            Ok(RepMap::Vae(vae))
        }
    }
}

/// Stage I + II: oversample noise and denoise it, optionally guided.
pub fn generate_pool(
    ctx: &SearchContext,
    params: &Stage2Params,
    trial_seed: u64,
) -> Result<CandidatePool> {
    let t_steps = ctx.backbone.steps();
    let noise = oversample_noise(
        ctx.m_factor,
        ctx.n_r(),
        ctx.backbone.dim(),
        trial_seed,
        ctx.class_counts().as_deref(),
    )?;
    let cfg = if params.guidance == GuidanceChoice::None {
        GuidanceConfig::disabled(ctx.backbone.dim(), trial_seed)
    } else {
        GuidanceConfig {
            enabled: true,
            rep: build_rep(ctx, params, trial_seed)?,
            family: params.family,
            gamma_min: params.gamma_min,
            gamma_max: params.gamma_max,
            t_g: params.t_g.clamp(3, 20.min(t_steps)),
            ref_ratio: params.ratio,
            ref_type: ctx.ref_type(),
            seed: trial_seed,
        }
    };
    let real = ctx.stage2_real()?;
    let pool = reverse_diffuse(&noise, ctx.backbone, &cfg, &real, ctx.batch_size)?;
    match ctx.splits.task {
        Task::Regression => {
            let (features, values) = split_target_column(&pool.features);
            Ok(CandidatePool {
                features,
                target: Target::Values(values),
                embeddings: None,
                seed: pool.seed,
                guided: pool.guided,
            })
        }
        _ => Ok(pool),
    }
}

/// One inner-grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub sampler: SamplerKind,
    pub gkd: bool,
    pub objective: f64,
}

/// Stage III grid: five samplers x GKD toggle (GKD off only for
/// regression), each scored by validation utility. Ties break by grid
/// order; failures record -inf and continue.
pub fn inner_grid(
    ctx: &SearchContext,
    pool: &CandidatePool,
    k: f64,
    selection_seed: u64,
) -> Result<(SamplerKind, bool, f64, Vec<GridEntry>)> {
    let n_r = ctx.n_r();
    let target_count = ((k * n_r as f64).round() as usize).clamp(1, pool.len());
    let rep = RepMap::identity(pool.features.ncols());
    let gkd_options: &[bool] = if ctx.splits.task.is_classification() {
        &[false, true]
    } else {
        &[false]
    };
    let teacher: Option<Teacher> = if gkd_options.contains(&true) {
        Some(train_teacher(&ctx.splits.train, selection_seed, 0.3, 200)?)
    } else {
        None
    };

    let mut table = Vec::new();
    let mut best: Option<(SamplerKind, bool, f64)> = None;
    for kind in SamplerKind::ALL {
        for &gkd in gkd_options {
            let objective = evaluate_combo(ctx, pool, kind, gkd, teacher.as_ref(), target_count, selection_seed, &rep)
                .unwrap_or_else(|e| {
                    eprintln!("warning: combo {}/gkd={gkd} failed: {e}", kind.name());
                    f64::NEG_INFINITY
                });
            table.push(GridEntry { sampler: kind, gkd, objective });
            let better = match best {
                None => true,
                Some((_, _, b)) => objective > b,
            };
            if better {
                best = Some((kind, gkd, objective));
            }
        }
    }
    let (kind, gkd, objective) = best.unwrap();
    Ok((kind, gkd, objective, table))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_combo(
    ctx: &SearchContext,
    pool: &CandidatePool,
    kind: SamplerKind,
    gkd: bool,
    teacher: Option<&Teacher>,
    target_count: usize,
    seed: u64,
    rep: &RepMap,
) -> Result<f64> {
    let mut work = if gkd {
        relabel(pool, teacher.ok_or_else(|| BcrError::config("missing teacher"))?)?
    } else {
        pool.clone()
    };
    let mut spec = SelectionSpec::new(kind, target_count, seed);
    spec.batch = spec.batch.min(work.len());
    let idx = run_sampler(&mut work, &ctx.splits.train, &spec, rep)?;
    let syn = work.select(&idx).as_matrix();
    let learner = train_downstream(&syn, &ctx.splits.val, ctx.splits.task, seed)?;
    let psi = score_learner(&learner, &ctx.splits.val, ctx.splits.task)?;
    Ok(objective_of(psi, ctx.splits.task))
}

/// All tasks maximize: AUROC family as-is, regression as -RMSE.
pub fn objective_of(psi: f64, task: Task) -> f64 {
    match task {
        Task::Regression => -psi,
        _ => psi,
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64 + 1)
}

/// The full outer search: suggest, generate, run the inner grid, record.
/// Unguided pools are generated once and shared across guidance-off trials.
pub fn optimize(
    ctx: &SearchContext,
    space: &SearchSpace,
    n_trials: usize,
    n_start: usize,
    seed: u64,
) -> Result<(TrialRecord, Vec<TrialRecord>)> {
    space.validate()?;
    if n_trials == 0 || n_trials < n_start.min(n_trials) {
        return Err(BcrError::config("n_trials must be at least 1"));
    }
    let mut state = TpeState::new(n_start);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unguided_pool: Option<CandidatePool> = None;
    for trial in 0..n_trials {
        let params = suggest(&state, space, &mut rng)?;
        let t_seed = trial_seed(seed, trial);
        let record = match run_trial(ctx, &params, trial, t_seed, &mut unguided_pool, seed) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: trial {trial} failed: {e}");
                TrialRecord {
                    trial,
                    params,
                    sampler: SamplerKind::Chamfer,
                    gkd: false,
                    objective: f64::NEG_INFINITY,
                    psi: f64::NAN,
                    seed: t_seed,
                }
            }
        };
        state.history.push(record);
    }
    let best = state
        .history
        .iter()
        .max_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap())
        .cloned()
        .ok_or_else(|| BcrError::Empty("no trials recorded".into()))?;
    Ok((best, state.history))
}

fn run_trial(
    ctx: &SearchContext,
    params: &Stage2Params,
    trial: usize,
    t_seed: u64,
    unguided_pool: &mut Option<CandidatePool>,
    base_seed: u64,
) -> Result<TrialRecord> {
    let pool = if params.guidance == GuidanceChoice::None {
        if unguided_pool.is_none() {
            // One shared pool for every guidance-off trial, seeded from the
            // search seed so it is independent of trial order.
            *unguided_pool = Some(generate_pool(ctx, params, trial_seed(base_seed, 0))?);
        }
        unguided_pool.as_ref().unwrap().clone()
    } else {
        generate_pool(ctx, params, t_seed)?
    };
    let (sampler, gkd, objective, _) = inner_grid(ctx, &pool, params.k, t_seed)?;
    let psi = match ctx.splits.task {
        Task::Regression => -objective,
        _ => objective,
    };
    Ok(TrialRecord {
        trial,
        params: params.clone(),
        sampler,
        gkd,
        objective,
        psi,
        seed: t_seed,
    })
}

/// One point of the K-sweep curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: f64,
    pub mean: f64,
    pub sd: f64,
    /// True for the K = 1 selection-disabled reference point.
    pub ablation: bool,
}

/// Sweep the cardinality multiplier K over a shared per-seed pool, scoring
/// each K by the test-set TSTR psi of the Chamfer-selected subset. Emits an
/// additional K = 1 point with selection disabled (guidance only).
pub fn k_sweep(
    ctx: &SearchContext,
    base: &Stage2Params,
    k_values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if seeds.is_empty() || k_values.is_empty() {
        return Err(BcrError::config("k_sweep needs seeds and K values"));
    }
    for &k in k_values {
        if k >= ctx.m_factor as f64 {
            return Err(BcrError::config(format!(
                "K = {k} must be below M = {}",
                ctx.m_factor
            )));
        }
    }
    let n_r = ctx.n_r();
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); k_values.len()];
    let mut ablation: Vec<f64> = Vec::new();
    for &seed in seeds {
        let mut pool = generate_pool(ctx, base, seed)?;
        for (ki, &k) in k_values.iter().enumerate() {
            let target_count = ((k * n_r as f64).round() as usize).clamp(1, pool.len());
            let mut spec = SelectionSpec::new(SamplerKind::Chamfer, target_count, seed);
            spec.batch = spec.batch.min(pool.len());
            let rep = RepMap::identity(pool.features.ncols());
            let idx = run_sampler(&mut pool, &ctx.splits.train, &spec, &rep)?;
            let syn = pool.select(&idx).as_matrix();
            let psi = crate::eval::tstr(&syn, &ctx.splits.val, &ctx.splits.test, ctx.splits.task, seed)?;
            per_k[ki].push(psi);
        }
        // Selection disabled: the first N_r generated rows stand in for the
        // whole pipeline output.
        let take: Vec<usize> = (0..n_r.min(pool.len())).collect();
        let syn = pool.select(&take).as_matrix();
        let psi = crate::eval::tstr(&syn, &ctx.splits.val, &ctx.splits.test, ctx.splits.task, seed)?;
        ablation.push(psi);
    }
    let stat = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut out: Vec<SweepPoint> = k_values
        .iter()
        .zip(&per_k)
        .map(|(&k, vals)| {
            let (mean, sd) = stat(vals);
            SweepPoint { k, mean, sd, ablation: false }
        })
        .collect();
    let (mean, sd) = stat(&ablation);
    out.push(SweepPoint { k: 1.0, mean, sd, ablation: true });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{fit_gmm_em, GmmBackbone};
    use crate::representation::standard_normal;

    fn space() -> SearchSpace {
        SearchSpace::default()
    }

    fn in_domain(p: &Stage2Params, s: &SearchSpace) {
        assert!(p.k >= s.k_min - 1e-12 && p.k <= s.k_max + 1e-12, "k {}", p.k);
        let steps = p.k / s.k_step;
        assert!((steps - steps.round()).abs() < 1e-6, "k {} off-grid", p.k);
        assert!(p.gamma_max >= s.gamma_max_lo && p.gamma_max <= s.gamma_max_hi);
        assert!(p.gamma_min >= s.gamma_min_lo);
        assert!(
            p.gamma_min <= (p.gamma_max - 0.1).max(s.gamma_min_lo) + 1e-12,
            "gamma_min {} vs gamma_max {}",
            p.gamma_min,
            p.gamma_max
        );
        assert!(p.t_g >= s.t_g_min && p.t_g <= s.t_g_max);
        match p.guidance {
            GuidanceChoice::None => {
                assert!(p.ratio.is_none());
                assert!(p.vae_dim.is_none());
            }
            GuidanceChoice::Identity => {
                assert!(RATIOS.contains(&p.ratio.unwrap()));
                assert!(p.vae_dim.is_none());
            }
            GuidanceChoice::BetaVae => {
                assert!(RATIOS.contains(&p.ratio.unwrap()));
                assert!(VAE_DIMS.contains(&p.vae_dim.unwrap()));
                assert!(p.vae_schedule.is_some());
            }
        }
    }

    #[test]
    fn startup_suggestions_respect_domains() {
        let s = space();
        let state = TpeState::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let p = suggest(&state, &s, &mut rng).unwrap();
            in_domain(&p, &s);
        }
    }

    fn fake_record(trial: usize, k: f64, objective: f64) -> TrialRecord {
        TrialRecord {
            trial,
            params: Stage2Params {
                k,
                guidance: GuidanceChoice::Identity,
                family: GammaFamily::Cosine,
                gamma_max: 1.0,
                gamma_min: 0.01,
                t_g: 10,
                ratio: Some(0.5),
                vae_dim: None,
                vae_schedule: None,
            },
            sampler: SamplerKind::Chamfer,
            gkd: false,
            objective,
            psi: objective,
            seed: trial as u64,
        }
    }

    #[test]
    fn tpe_suggestions_respect_domains_and_concentrate() {
        let s = space();
        let mut state = TpeState::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Synthetic history: K near 20 wins, everything else loses.
        for trial in 0..40 {
            let k = if trial % 4 == 0 { 20.0 + (trial % 3) as f64 * 0.5 } else { 2.0 + (trial % 7) as f64 };
            let objective = if trial % 4 == 0 { 0.9 } else { 0.4 };
            state.history.push(fake_record(trial, k, objective));
        }
        let mut near = 0;
        let mut ks = Vec::new();
        for _ in 0..100 {
            let p = suggest(&state, &s, &mut rng).unwrap();
            in_domain(&p, &s);
            ks.push(p.k);
            if (15.0..=25.0).contains(&p.k) {
                near += 1;
            }
        }
        assert!(near >= 60, "only {near}/100 suggestions near the good mode: {ks:?}");
    }

    #[test]
    fn degenerate_history_falls_back_to_uniform() {
        let s = space();
        let mut state = TpeState::new(2);
        state.history.push(fake_record(0, 5.0, f64::NEG_INFINITY));
        state.history.push(fake_record(1, 5.0, f64::NEG_INFINITY));
        state.history.push(fake_record(2, 5.0, f64::NEG_INFINITY));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = suggest(&state, &s, &mut rng).unwrap();
        in_domain(&p, &s);
    }

    /// Well-separated two-class fixture with a class-conditional GMM
    /// backbone fitted on it.
    fn classification_fixture(seed: u64) -> (EncodedSplits, GmmBackbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = |n: usize, rng: &mut ChaCha8Rng| {
            let mut values = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let class = i % 2;
                let c = if class == 0 { -2.0 } else { 2.0 };
                values.push(c + 0.6 * standard_normal(rng));
                values.push(c + 0.6 * standard_normal(rng));
                labels.push(class);
            }
            EncodedMatrix {
                values: Array2::from_shape_vec((n, 2), values).unwrap(),
                target: Target::Classes(labels),
            }
        };
        let train = gen(80, &mut rng);
        let val = gen(40, &mut rng);
        let test = gen(40, &mut rng);
        let mut mixtures = Vec::new();
        for class in 0..2 {
            let idx: Vec<usize> = (0..80).filter(|i| i % 2 == class).collect();
            let mut sub = Array2::zeros((idx.len(), 2));
            for (k, &i) in idx.iter().enumerate() {
                sub.row_mut(k).assign(&train.values.row(i));
            }
            mixtures.push(fit_gmm_em(&sub, 1, seed, 50, 1e-8).unwrap());
        }
        let backbone = GmmBackbone::new_class_conditional(mixtures, 40);
        let layout = FeatureLayout::all_numeric(2);
        (EncodedSplits { train, val, test, task: Task::Binary, layout }, backbone)
    }

    fn regression_fixture(seed: u64) -> (EncodedSplits, GmmBackbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = |n: usize, rng: &mut ChaCha8Rng| {
            let mut values = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..n {
                let x = standard_normal(rng);
                values.push(x);
                targets.push(0.5 + 0.3 * x + 0.05 * standard_normal(rng));
            }
            EncodedMatrix {
                values: Array2::from_shape_vec((n, 1), values).unwrap(),
                target: Target::Values(targets),
            }
        };
        let train = gen(60, &mut rng);
        let val = gen(30, &mut rng);
        let test = gen(30, &mut rng);
        let aug = augment_with_target(&train).unwrap();
        let gmm = fit_gmm_em(&aug.values, 2, seed, 60, 1e-8).unwrap();
        let backbone = GmmBackbone::new_global(gmm, 40);
        let layout = FeatureLayout::all_numeric(1);
        (EncodedSplits { train, val, test, task: Task::Regression, layout }, backbone)
    }

    fn base_params() -> Stage2Params {
        Stage2Params {
            k: 1.0,
            guidance: GuidanceChoice::None,
            family: GammaFamily::Constant,
            gamma_max: 0.5,
            gamma_min: 0.01,
            t_g: 5,
            ratio: None,
            vae_dim: None,
            vae_schedule: None,
        }
    }

    fn ctx<'a>(splits: &'a EncodedSplits, backbone: &'a GmmBackbone) -> SearchContext<'a> {
        SearchContext {
            splits,
            backbone,
            m_factor: 4,
            batch_size: 64,
            vae_epochs: 40,
            ref_type: None,
        }
    }

    #[test]
    fn inner_grid_classification_has_ten_combos() {
        let (splits, backbone) = classification_fixture(3);
        let c = ctx(&splits, &backbone);
        let pool = generate_pool(&c, &base_params(), 7).unwrap();
        let (_, _, best, table) = inner_grid(&c, &pool, 1.0, 7).unwrap();
        assert_eq!(table.len(), 10);
        let max = table.iter().map(|e| e.objective).fold(f64::MIN, f64::max);
        assert_eq!(best, max);
    }

    #[test]
    fn inner_grid_regression_has_five_combos() {
        let (splits, backbone) = regression_fixture(4);
        let c = ctx(&splits, &backbone);
        let pool = generate_pool(&c, &base_params(), 8).unwrap();
        let (_, gkd, best, table) = inner_grid(&c, &pool, 1.0, 8).unwrap();
        assert_eq!(table.len(), 5);
        assert!(!gkd);
        assert!(table.iter().all(|e| !e.gkd));
        let max = table.iter().map(|e| e.objective).fold(f64::MIN, f64::max);
        assert_eq!(best, max);
    }

    #[test]
    fn inner_grid_matches_exhaustive_oracle() {
        let (splits, backbone) = classification_fixture(5);
        let c = ctx(&splits, &backbone);
        let pool = generate_pool(&c, &base_params(), 9).unwrap();
        let (kind, gkd, best, table) = inner_grid(&c, &pool, 0.8, 9).unwrap();
        // Oracle: re-evaluate every combo independently and take the argmax
        // in grid order.
        let mut expected: Option<(SamplerKind, bool, f64)> = None;
        for entry in &table {
            let better = match expected {
                None => true,
                Some((_, _, b)) => entry.objective > b,
            };
            if better {
                expected = Some((entry.sampler, entry.gkd, entry.objective));
            }
        }
        let (ek, eg, eb) = expected.unwrap();
        assert_eq!((kind, gkd), (ek, eg));
        assert_eq!(best, eb);
    }

    #[test]
    fn optimize_single_uniform_trial() {
        let (splits, backbone) = classification_fixture(6);
        let c = ctx(&splits, &backbone);
        let mut s = space();
        s.k_max = 3.0;
        let (best, log) = optimize(&c, &s, 1, 1, 42).unwrap();
        assert_eq!(log.len(), 1);
        assert!(best.objective.is_finite());
    }

    #[test]
    fn optimize_is_deterministic_and_best_dominates() {
        let (splits, backbone) = classification_fixture(7);
        let c = ctx(&splits, &backbone);
        let mut s = space();
        s.k_max = 3.0;
        s.guidance = vec![GuidanceChoice::None, GuidanceChoice::Identity];
        let (best_a, log_a) = optimize(&c, &s, 4, 2, 11).unwrap();
        let (best_b, log_b) = optimize(&c, &s, 4, 2, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&log_a).unwrap(),
            serde_json::to_string(&log_b).unwrap()
        );
        assert_eq!(best_a.objective, best_b.objective);
        for t in &log_a {
            assert!(best_a.objective >= t.objective);
        }
    }

    #[test]
    fn optimize_guidance_none_never_trains_vae() {
        let (splits, backbone) = classification_fixture(8);
        let c = ctx(&splits, &backbone);
        let mut s = space();
        s.k_max = 2.0;
        s.guidance = vec![GuidanceChoice::None];
        let (_, log) = optimize(&c, &s, 3, 3, 13).unwrap();
        for t in &log {
            assert_eq!(t.params.guidance, GuidanceChoice::None);
            assert!(t.params.vae_dim.is_none());
            assert!(t.params.vae_schedule.is_none());
        }
    }

    #[test]
    fn k_sweep_rejects_k_at_or_above_m() {
        let (splits, backbone) = classification_fixture(9);
        let c = ctx(&splits, &backbone);
        assert!(k_sweep(&c, &base_params(), &[4.0], &[1]).is_err());
        assert!(k_sweep(&c, &base_params(), &[5.0], &[1]).is_err());
    }

    #[test]
    fn k_sweep_curve_and_ablation_point() {
        let (splits, backbone) = classification_fixture(10);
        let c = ctx(&splits, &backbone);
        let ks = [0.5, 1.0, 2.0, 3.0];
        let points = k_sweep(&c, &base_params(), &ks, &[1, 2, 3]).unwrap();
        assert_eq!(points.len(), ks.len() + 1);
        assert!(points.last().unwrap().ablation);
        assert!((points.last().unwrap().k - 1.0).abs() < 1e-12);
        // Spearman correlation between K and mean psi is non-negative at
        // fixture scale (monotone-then-plateau trend).
        let sweep: Vec<&SweepPoint> = points.iter().filter(|p| !p.ablation).collect();
        let n = sweep.len() as f64;
        let rank = |vals: Vec<f64>| -> Vec<f64> {
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let mut r = vec![0.0; vals.len()];
            for (pos, &i) in order.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let rk = rank(sweep.iter().map(|p| p.k).collect());
        let rp = rank(sweep.iter().map(|p| p.mean).collect());
        let mean_r = (n - 1.0) / 2.0;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..sweep.len() {
            num += (rk[i] - mean_r) * (rp[i] - mean_r);
            da += (rk[i] - mean_r).powi(2);
            db += (rp[i] - mean_r).powi(2);
        }
        let spearman = num / (da.sqrt() * db.sqrt());
        assert!(spearman >= 0.0, "Spearman {spearman}; points {points:?}");
    }

    #[test]
    fn regression_trial_end_to_end() {
        let (splits, backbone) = regression_fixture(11);
        let c = ctx(&splits, &backbone);
        let mut s = space();
        s.k_max = 2.0;
        s.guidance = vec![GuidanceChoice::None, GuidanceChoice::Identity];
        let (best, log) = optimize(&c, &s, 2, 2, 17).unwrap();
        assert_eq!(log.len(), 2);
        assert!(best.objective.is_finite());
        // Objective = -RMSE, so psi is positive RMSE.
        assert!(best.psi >= 0.0);
    }

    #[test]
    fn guided_trial_with_vae_mapping_runs() {
        let (splits, backbone) = classification_fixture(12);
        let c = ctx(&splits, &backbone);
        let mut params = base_params();
        params.guidance = GuidanceChoice::BetaVae;
        params.ratio = Some(0.5);
        params.vae_dim = Some(4);
        params.vae_schedule = Some(AnnealFamily::Linear);
        params.gamma_max = 0.5;
        params.gamma_min = 0.05;
        let pool = generate_pool(&c, &params, 19).unwrap();
        assert_eq!(pool.len(), 4 * 80);
        assert!(pool.guided);
    }
}
