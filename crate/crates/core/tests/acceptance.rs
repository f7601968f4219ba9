//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see every line even on success.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bcr_core::backbone::{
    fit_gmm_em, oversample_noise, reverse_diffuse, DiffusionBackbone, GammaFamily, Gmm,
    GmmBackbone, GuidanceConfig, RefType,
};
use bcr_core::chamfer::{chamfer, chamfer_grad, PointSet};
use bcr_core::data::{EncodedMatrix, Target, Task};
use bcr_core::eval::{aggregate, dcr1_share, delta_percent, manifold_precision_recall, tstr, wilcoxon_signed_rank};
use bcr_core::representation::{FeatureLayout, RepMap, VaeParams};
use bcr_core::samplers::{
    chamfer_sampler, compute_hyperspheres, iboss_sampler, manifold_distance, md_sampler,
    run_sampler, stratified_sampler, CandidatePool, SamplerKind, SelectionSpec,
};
use bcr_core::search::{
    k_sweep, objective_of, optimize, EncodedSplits, GuidanceChoice, SearchContext, SearchSpace,
    Stage2Params,
};

struct Gate {
    name: &'static str,
    failures: Vec<String>,
}

impl Gate {
    fn new(name: &'static str) -> Self {
        Gate { name, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            println!("[PASS] {}", self.name);
        } else {
            println!("[FAIL] {}: {}", self.name, self.failures.join("; "));
            panic!("{} failed: {}", self.name, self.failures.join("; "));
        }
    }
}

fn rand_set(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(-scale..scale))
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c01_chamfer_axioms() {
    let mut gate = Gate::new("criterion 1: Chamfer axioms on 200 random pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pair in 0..200 {
        let d = rng.gen_range(1..=8);
        let na = rng.gen_range(1..=64);
        let nb = rng.gen_range(1..=64);
        let a = PointSet::new(rand_set(&mut rng, na, d, 3.0)).unwrap();
        let b = PointSet::new(rand_set(&mut rng, nb, d, 3.0)).unwrap();
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        gate.check(ab.total >= 0.0, format!("pair {pair}: negative value"));
        gate.check(
            (ab.total - ba.total).abs() <= 1e-12,
            format!("pair {pair}: asymmetry {}", (ab.total - ba.total).abs()),
        );
        let aa = chamfer(&a, &a).unwrap();
        gate.check(aa.total == 0.0, format!("pair {pair}: C(A,A) = {} != 0", aa.total));
    }
    gate.finish();
}

// ---------------------------------------------------------------- criterion 2

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

#[test]
fn c02_gradient_oracles() {
    let mut gate = Gate::new("criterion 2: gradient finite-difference oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-5;

    // chamfer_grad vs central differences of the total, identity map.
    let mut probes = 0;
    while probes < 50 {
        let d = rng.gen_range(2..=4);
        let mut a_pts = rand_set(&mut rng, 8, d, 2.0);
        let b_pts = rand_set(&mut rng, 10, d, 2.0);
        let b = PointSet::new(b_pts).unwrap();
        let a = PointSet::new(a_pts.clone()).unwrap();
        let grad = chamfer_grad(&a, &b, None, d).unwrap();
        let i = rng.gen_range(0..8);
        let j = rng.gen_range(0..d);
        let orig = a_pts[[i, j]];
        a_pts[[i, j]] = orig + h;
        let plus = chamfer(&PointSet::new(a_pts.clone()).unwrap(), &b).unwrap().total;
        a_pts[[i, j]] = orig - h;
        let minus = chamfer(&PointSet::new(a_pts.clone()).unwrap(), &b).unwrap().total;
        a_pts[[i, j]] = orig;
        let fd = (plus - minus) / (2.0 * h);
        if fd.abs() < 1e-6 && grad[[i, j]].abs() < 1e-6 {
            continue; // degenerate probe (zero-distance or argmin tie region)
        }
        gate.check(
            rel_err(fd, grad[[i, j]]) <= 1e-4,
            format!("chamfer_grad probe {probes}: fd {fd} vs {}", grad[[i, j]]),
        );
        probes += 1;
    }

    // vae_loss parameter gradients.
    let layout = FeatureLayout::all_numeric(4);
    let mut params = VaeParams::init(layout, 2, &mut rng);
    let x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
    let eps = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
    let beta = 0.7;
    let (_, grads) = bcr_core::representation::vae_loss_grad(&params, &x, &eps, beta).unwrap();
    let analytic = grads.flatten();
    let flat = params.flatten();
    for probe in 0..50 {
        let idx = rng.gen_range(0..flat.len());
        let mut perturbed = flat.clone();
        perturbed[idx] = flat[idx] + h;
        params.assign_flat(&perturbed);
        let plus = bcr_core::representation::vae_loss(&params, &x, &eps, beta).unwrap().total;
        perturbed[idx] = flat[idx] - h;
        params.assign_flat(&perturbed);
        let minus = bcr_core::representation::vae_loss(&params, &x, &eps, beta).unwrap().total;
        params.assign_flat(&flat);
        let fd = (plus - minus) / (2.0 * h);
        gate.check(
            rel_err(fd, analytic[idx]) <= 1e-4 || (fd.abs() < 1e-7 && analytic[idx].abs() < 1e-7),
            format!("vae_loss probe {probe} (param {idx}): fd {fd} vs {}", analytic[idx]),
        );
    }

    // Encoder Jacobian vs central differences of encode_mean.
    for probe in 0..50 {
        let mut x = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let jac = params.encode_jacobian(&x);
        let l = rng.gen_range(0..2);
        let j = rng.gen_range(0..4);
        let orig = x[j];
        x[j] = orig + h;
        let plus = params.encode_mean(&x)[l];
        x[j] = orig - h;
        let minus = params.encode_mean(&x)[l];
        x[j] = orig;
        let fd = (plus - minus) / (2.0 * h);
        gate.check(
            rel_err(fd, jac[[l, j]]) <= 1e-4 || (fd.abs() < 1e-7 && jac[[l, j]].abs() < 1e-7),
            format!("jacobian probe {probe}: fd {fd} vs {}", jac[[l, j]]),
        );
    }

    // GMM score (predicted noise) vs -sigma * grad log p_t from log_marginal.
    let gmm = Gmm {
        weights: vec![0.5, 0.3, 0.2],
        means: ndarray::arr2(&[[-2.0, 0.5], [1.5, -1.0], [0.0, 2.0]]),
        vars: ndarray::arr2(&[[0.4, 0.7], [0.9, 0.3], [0.5, 0.5]]),
    };
    let backbone = GmmBackbone::new_global(gmm, 50);
    for probe in 0..50 {
        let t = rng.gen_range(1..50);
        let mut x = Array1::from_shape_fn(2, |_| rng.gen_range(-3.0..3.0));
        let xm = Array2::from_shape_fn((1, 2), |(_, j)| x[j]);
        let eps_hat = backbone.score(&xm, None, t).unwrap();
        let sigma = backbone.sigma(t);
        let j = rng.gen_range(0..2);
        let orig = x[j];
        x[j] = orig + h;
        let plus = backbone.log_marginal(0, &x, t);
        x[j] = orig - h;
        let minus = backbone.log_marginal(0, &x, t);
        x[j] = orig;
        let fd = -sigma * (plus - minus) / (2.0 * h);
        gate.check(
            rel_err(fd, eps_hat[[0, j]]) <= 1e-4,
            format!("gmm score probe {probe}: fd {fd} vs {}", eps_hat[[0, j]]),
        );
    }
    gate.finish();
}

// ---------------------------------------------------------------- criterion 3

fn gmm_fixture_2d() -> Gmm {
    Gmm {
        weights: vec![0.4, 0.35, 0.25],
        means: ndarray::arr2(&[[-3.0, 0.0], [3.0, 2.0], [0.0, -3.0]]),
        vars: ndarray::arr2(&[[0.3, 0.3], [0.3, 0.3], [0.3, 0.3]]),
    }
}

fn sample_gmm(gmm: &Gmm, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, gmm.dim()));
    for i in 0..n {
        out.row_mut(i).assign(&gmm.sample(&mut rng));
    }
    out
}

#[test]
fn c03_guidance_lowers_chamfer() {
    let mut gate = Gate::new("criterion 3: guidance lowers the Chamfer value in >= 8/10 seeds");
    let real_values = sample_gmm(&gmm_fixture_2d(), 500, 7);
    let real = EncodedMatrix {
        values: real_values.clone(),
        target: Target::Values(vec![0.0; 500]),
    };
    let gmm = fit_gmm_em(&real_values, 3, 7, 200, 1e-6).unwrap();
    let backbone = GmmBackbone::new_global(gmm, 200);
    let real_set = PointSet::new(real_values).unwrap();

    let mut wins = 0;
    for seed in 0..10u64 {
        let noise = oversample_noise(10, 500, 2, seed, None).unwrap();
        let unguided =
            reverse_diffuse(&noise, &backbone, &GuidanceConfig::disabled(2, seed), &real, 500)
                .unwrap();
        let guided_cfg = GuidanceConfig {
            enabled: true,
            rep: RepMap::identity(2),
            family: GammaFamily::Cosine,
            gamma_min: 0.01,
            gamma_max: 1.0,
            t_g: 10,
            ref_ratio: Some(1.0),
            ref_type: RefType::Global,
            seed,
        };
        let guided = reverse_diffuse(&noise, &backbone, &guided_cfg, &real, 500).unwrap();
        let c_un = chamfer(&PointSet::new(unguided.features).unwrap(), &real_set).unwrap().total;
        let c_g = chamfer(&PointSet::new(guided.features).unwrap(), &real_set).unwrap().total;
        if c_g < c_un {
            wins += 1;
        }
    }
    gate.check(wins >= 8, format!("guided won only {wins}/10 paired seeds"));
    gate.finish();
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn c04_unguided_moments() {
    let mut gate = Gate::new("criterion 4: unguided samples match backbone moments within 5%");
    let source = Gmm {
        weights: vec![1.0],
        means: ndarray::arr2(&[[2.0, -3.0]]),
        vars: ndarray::arr2(&[[0.5, 2.0]]),
    };
    let data = sample_gmm(&source, 2000, 4);
    let fitted = fit_gmm_em(&data, 1, 4, 200, 1e-8).unwrap();
    let backbone = GmmBackbone::new_global(fitted.clone(), 200);
    let real = EncodedMatrix { values: data, target: Target::Values(vec![0.0; 2000]) };

    let noise = oversample_noise(10, 500, 2, 4, None).unwrap();
    let samples =
        reverse_diffuse(&noise, &backbone, &GuidanceConfig::disabled(2, 4), &real, 500).unwrap();
    let n = samples.features.nrows() as f64;
    for j in 0..2 {
        let col = samples.features.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (m_ref, v_ref) = (fitted.means[[0, j]], fitted.vars[[0, j]]);
        gate.check(
            (mean - m_ref).abs() / m_ref.abs() <= 0.05,
            format!("dim {j}: mean {mean} vs backbone {m_ref}"),
        );
        gate.check(
            (var - v_ref).abs() / v_ref <= 0.05,
            format!("dim {j}: var {var} vs backbone {v_ref}"),
        );
    }
    gate.finish();
}

// ---------------------------------------------------------------- criterion 5

/// O(n^2) re-statement of the batch accumulation rule with brute-force
/// nearest neighbors; must agree index-for-index with chamfer_sampler.
fn chamfer_oracle(pool: &CandidatePool, real: &Array2<f64>, spec: &SelectionSpec) -> Vec<usize> {
    let pts = &pool.features;
    let nearest_real = |row: usize| -> f64 {
        (0..real.nrows())
            .map(|r| {
                (0..real.ncols())
                    .map(|j| (pts[[row, j]] - real[[r, j]]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let brute_chamfer = |batch: &[usize]| -> f64 {
        let fid = batch.iter().map(|&i| nearest_real(i)).sum::<f64>() / batch.len() as f64;
        let mut cov = 0.0;
        for r in 0..real.nrows() {
            cov += batch
                .iter()
                .map(|&i| {
                    (0..real.ncols())
                        .map(|j| (pts[[i, j]] - real[[r, j]]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
        }
        fid + cov / real.nrows() as f64
    };

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let batches: Vec<&[usize]> = order.chunks(spec.batch).collect();
    let mut scored: Vec<(usize, f64)> =
        batches.iter().enumerate().map(|(bi, b)| (bi, brute_chamfer(b))).collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

    let mut selected = Vec::new();
    for (bi, _) in scored {
        let batch = batches[bi];
        let remaining = spec.target_count - selected.len();
        if batch.len() <= remaining {
            selected.extend_from_slice(batch);
        } else {
            let mut fid: Vec<(usize, f64)> = batch.iter().map(|&i| (i, nearest_real(i))).collect();
            fid.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            selected.extend(fid.into_iter().take(remaining).map(|(i, _)| i));
        }
        if selected.len() == spec.target_count {
            break;
        }
    }
    selected
}

#[test]
fn c05_sampler_oracles() {
    let mut gate = Gate::new("criterion 5: sampler oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    // Chamfer sampler vs exhaustive batch scoring on pools <= 32.
    for case in 0..20 {
        let n = rng.gen_range(8..=32);
        let d = rng.gen_range(2..=4);
        let features = rand_set(&mut rng, n, d, 2.0);
        let real = rand_set(&mut rng, 12, d, 2.0);
        let mut pool = CandidatePool {
            features,
            target: Target::Values(vec![0.0; n]),
            embeddings: None,
            seed: case,
            guided: false,
        };
        let mut spec = SelectionSpec::new(SamplerKind::Chamfer, rng.gen_range(1..=n), case);
        spec.batch = rng.gen_range(2..=8);
        let expected = chamfer_oracle(&pool, &real, &spec);
        let real_m = EncodedMatrix { values: real, target: Target::Values(vec![0.0; 12]) };
        let got = chamfer_sampler(&mut pool, &real_m, &spec, &RepMap::identity(d)).unwrap();
        gate.check(got == expected, format!("chamfer case {case}: {got:?} != {expected:?}"));
    }

    // MD sampler threshold property on 100 random fixtures.
    for case in 0..100 {
        let n = rng.gen_range(10..=40);
        let d = rng.gen_range(2..=3);
        let features = rand_set(&mut rng, n, d, 3.0);
        let real = rand_set(&mut rng, 15, d, 2.0);
        let mut pool = CandidatePool {
            features: features.clone(),
            target: Target::Values(vec![0.0; n]),
            embeddings: None,
            seed: case,
            guided: false,
        };
        let mut spec = SelectionSpec::new(SamplerKind::Md, rng.gen_range(1..n), case);
        spec.k_neighbors = 5;
        let real_m = EncodedMatrix { values: real.clone(), target: Target::Values(vec![0.0; 15]) };
        let idx = md_sampler(&mut pool, &real_m, &spec, &RepMap::identity(d)).unwrap();
        let radii = compute_hyperspheres(&real, 5).unwrap();
        let dist: Vec<f64> =
            (0..n).map(|i| manifold_distance(features.row(i), &real, &radii)).collect();
        let selected_max =
            idx.iter().map(|&i| dist[i]).fold(f64::NEG_INFINITY, f64::max);
        let rest_min = (0..n)
            .filter(|i| !idx.contains(i))
            .map(|i| dist[i])
            .fold(f64::INFINITY, f64::min);
        gate.check(
            selected_max <= rest_min,
            format!("md case {case}: selected max {selected_max} > unselected min {rest_min}"),
        );
    }

    // IBOSS 1-D hand case: r = 2 smallest and 2 largest.
    let values = [5.0, 10.0, 1.0, 9.0, 2.0, 8.0, 0.0, 4.0, 6.0, 3.0];
    let features = Array2::from_shape_fn((10, 1), |(i, _)| values[i]);
    let mut pool = CandidatePool {
        features,
        target: Target::Values(vec![0.0; 10]),
        embeddings: None,
        seed: 0,
        guided: false,
    };
    let spec = SelectionSpec::new(SamplerKind::Iboss, 4, 0);
    let mut idx = iboss_sampler(&mut pool, &spec, &RepMap::identity(1)).unwrap();
    idx.sort_unstable();
    // Values 0.0 (idx 6), 1.0 (idx 2) and 10.0 (idx 1), 9.0 (idx 3).
    gate.check(idx == vec![1, 2, 3, 6], format!("iboss hand case selected {idx:?}"));

    // Stratified counts within +-1 of the proportional quota per stratum.
    for case in 0..20 {
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let real_labels: Vec<usize> =
            (0..40).map(|i| if i < 20 { 0 } else if i < 32 { 1 } else { 2 }).collect();
        let mut pool = CandidatePool {
            features: rand_set(&mut rng, n, 2, 1.0),
            target: Target::Classes(labels.clone()),
            embeddings: None,
            seed: case,
            guided: false,
        };
        let real_m = EncodedMatrix {
            values: rand_set(&mut rng, 40, 2, 1.0),
            target: Target::Classes(real_labels.clone()),
        };
        let target_count = rng.gen_range(6..=20);
        let spec = SelectionSpec::new(SamplerKind::Stratified, target_count, case);
        let idx = stratified_sampler(&mut pool, &real_m, &spec).unwrap();
        let mut counts = [0usize; 3];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        for c in 0..3 {
            let real_count = real_labels.iter().filter(|&&l| l == c).count() as f64;
            let quota = real_count * target_count as f64 / 40.0;
            let cap = labels.iter().filter(|&&l| l == c).count() as f64;
            let lo = (quota.floor() - 1.0).max(0.0);
            let hi = (quota.ceil() + 1.0).min(cap);
            gate.check(
                (lo..=hi).contains(&(counts[c] as f64)),
                format!("stratified case {case}: class {c} got {} for quota {quota:.2}", counts[c]),
            );
        }
    }
    gate.finish();
}

// --------------------------------------------------- shared search fixtures

fn classification_splits(n_per_split: usize, n_classes: usize, seed: u64) -> EncodedSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<[f64; 2]> = (0..n_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
            [3.0 * angle.cos(), 3.0 * angle.sin()]
        })
        .collect();
    let mut make = |n: usize| {
        let mut values = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % n_classes;
            for j in 0..2 {
                values[[i, j]] = centers[c][j] + rng.gen_range(-1.0..1.0);
            }
            labels.push(c);
        }
        EncodedMatrix { values, target: Target::Classes(labels) }
    };
    let task = if n_classes == 2 { Task::Binary } else { Task::Multiclass(n_classes) };
    EncodedSplits {
        train: make(n_per_split),
        val: make(n_per_split),
        test: make(n_per_split),
        task,
        layout: FeatureLayout::all_numeric(2),
    }
}

fn regression_splits(n_per_split: usize, seed: u64) -> EncodedSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| {
        let mut values = Array2::zeros((n, 2));
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let x0 = rng.gen_range(-2.0..2.0);
            let x1 = rng.gen_range(-2.0..2.0);
            values[[i, 0]] = x0;
            values[[i, 1]] = x1;
            targets.push(0.8 * x0 - 0.5 * x1 + 0.1 * rng.gen_range(-1.0..1.0f64));
        }
        EncodedMatrix { values, target: Target::Values(targets) }
    };
    EncodedSplits {
        train: make(n_per_split),
        val: make(n_per_split),
        test: make(n_per_split),
        task: Task::Regression,
        layout: FeatureLayout::all_numeric(2),
    }
}

fn fit_backbone_for(splits: &EncodedSplits, t_steps: usize, seed: u64) -> GmmBackbone {
    match &splits.train.target {
        Target::Classes(labels) => {
            let n_classes = labels.iter().max().unwrap() + 1;
            let mut mixtures = Vec::new();
            for c in 0..n_classes {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                let mut sub = Array2::zeros((idx.len(), splits.train.dim()));
                for (k, &i) in idx.iter().enumerate() {
                    sub.row_mut(k).assign(&splits.train.values.row(i));
                }
                mixtures.push(fit_gmm_em(&sub, 2, seed, 100, 1e-6).unwrap());
            }
            GmmBackbone::new_class_conditional(mixtures, t_steps)
        }
        _ => {
            let aug = bcr_core::search::augment_with_target(&splits.train).unwrap();
            GmmBackbone::new_global(fit_gmm_em(&aug.values, 3, seed, 100, 1e-6).unwrap(), t_steps)
        }
    }
}

fn unguided_params(k: f64) -> Stage2Params {
    Stage2Params {
        k,
        guidance: GuidanceChoice::None,
        family: GammaFamily::Cosine,
        gamma_max: 1.0,
        gamma_min: 0.01,
        t_g: 10,
        ratio: None,
        vae_dim: None,
        vae_schedule: None,
    }
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn c06_k_sweep_saturation() {
    let mut gate = Gate::new("criterion 6: K-sweep is monotone-then-plateau (Spearman >= 0)");
    let splits = classification_splits(100, 2, 66);
    let backbone = fit_backbone_for(&splits, 50, 66);
    let ctx = SearchContext {
        splits: &splits,
        backbone: &backbone,
        m_factor: 50,
        batch_size: 512,
        vae_epochs: 50,
        ref_type: None,
    };
    let ks = [0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 20.0];
    let seeds = [1, 2, 3, 4, 5];
    let points = k_sweep(&ctx, &unguided_params(1.0), &ks, &seeds).unwrap();
    let grid: Vec<_> = points.iter().filter(|p| !p.ablation).collect();
    assert_eq!(grid.len(), ks.len());

    let means: Vec<f64> = grid.iter().map(|p| p.mean).collect();
    let rho = spearman(&ks, &means);
    gate.check(rho >= 0.0, format!("Spearman rho = {rho:.3}"));

    let pooled_sd = (grid.iter().map(|p| p.sd * p.sd).sum::<f64>() / grid.len() as f64).sqrt();
    let first = grid.first().unwrap().mean;
    let last = grid.last().unwrap().mean;
    gate.check(
        last >= first - pooled_sd,
        format!("K=20 mean {last:.4} below K=0.1 mean {first:.4} - pooled sd {pooled_sd:.4}"),
    );
    gate.finish();
}

// ---------------------------------------------------------------- criterion 7

fn baseline_unguided_k1(ctx: &SearchContext, seeds: &[u64]) -> f64 {
    let params = unguided_params(1.0);
    let n_r = ctx.splits.train.n_rows();
    let mut objs = Vec::new();
    for &seed in seeds {
        let pool = bcr_core::search::generate_pool(ctx, &params, seed).unwrap();
        let take: Vec<usize> = (0..n_r.min(pool.len())).collect();
        let syn = pool.select(&take).as_matrix();
        let psi = tstr(&syn, &ctx.splits.val, &ctx.splits.test, ctx.splits.task, seed).unwrap();
        objs.push(objective_of(psi, ctx.splits.task));
    }
    objs.iter().sum::<f64>() / objs.len() as f64
}

fn evaluate_best(ctx: &SearchContext, best: &bcr_core::search::TrialRecord, seeds: &[u64]) -> f64 {
    let n_r = ctx.splits.train.n_rows();
    let mut objs = Vec::new();
    for &seed in seeds {
        let mut pool = bcr_core::search::generate_pool(ctx, &best.params, seed).unwrap();
        if best.gkd {
            let teacher = bcr_core::gkd::train_teacher(&ctx.splits.train, seed, 0.3, 200).unwrap();
            pool = bcr_core::gkd::relabel(&pool, &teacher).unwrap();
        }
        let target = ((best.params.k * n_r as f64).round() as usize).clamp(1, pool.len());
        let mut spec = SelectionSpec::new(best.sampler, target, seed);
        spec.batch = spec.batch.min(pool.len());
        let rep = RepMap::identity(pool.features.ncols());
        let idx = run_sampler(&mut pool, &ctx.splits.train, &spec, &rep).unwrap();
        let syn = pool.select(&idx).as_matrix();
        let psi = tstr(&syn, &ctx.splits.val, &ctx.splits.test, ctx.splits.task, seed).unwrap();
        objs.push(objective_of(psi, ctx.splits.task));
    }
    objs.iter().sum::<f64>() / objs.len() as f64
}

#[test]
fn c07_refinement_beats_backbone() {
    let mut gate = Gate::new("criterion 7: searched pipeline >= unguided K=1 baseline on 3 fixtures");
    let fixtures: Vec<(&str, EncodedSplits)> = vec![
        ("binary", classification_splits(80, 2, 77)),
        ("3-class", classification_splits(90, 3, 78)),
        ("regression", regression_splits(80, 79)),
    ];
    let space = SearchSpace { k_max: 10.0, ..SearchSpace::default() };
    let seeds = [1, 2, 3, 4, 5];
    for (name, splits) in &fixtures {
        let backbone = fit_backbone_for(splits, 40, 7);
        let ctx = SearchContext {
            splits,
            backbone: &backbone,
            m_factor: 50,
            batch_size: 512,
            vae_epochs: 40,
            ref_type: None,
        };
        let (best, _) = optimize(&ctx, &space, 10, 5, 7).unwrap();
        let pipeline = evaluate_best(&ctx, &best, &seeds);
        let baseline = baseline_unguided_k1(&ctx, &seeds);
        gate.check(
            pipeline >= baseline,
            format!("{name}: pipeline {pipeline:.4} < baseline {baseline:.4}"),
        );
    }
    gate.finish();
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c08_identical_distribution_controls() {
    let mut gate = Gate::new("criterion 8: identical-distribution controls");
    let splits = classification_splits(2000, 2, 88);

    // TSTR on an exact copy of the training split.
    let psi_real = tstr(&splits.train, &splits.val, &splits.test, splits.task, 1).unwrap();
    let copy = splits.train.clone();
    let psi_copy = tstr(&copy, &splits.val, &splits.test, splits.task, 1).unwrap();
    gate.check(
        (psi_copy - psi_real).abs() <= 0.02,
        format!("psi copy {psi_copy:.4} vs real {psi_real:.4}"),
    );

    // Manifold precision/recall of the copy.
    let (precision, recall) =
        manifold_precision_recall(&copy.values, &splits.train.values, 10).unwrap();
    gate.check(precision >= 0.9, format!("precision {precision:.3}"));
    gate.check(recall >= 0.9, format!("recall {recall:.3}"));

    // DCR-1 share of an independent same-distribution sample against
    // equal-size train/holdout halves.
    let independent = classification_splits(2000, 2, 89);
    let share = dcr1_share(
        &independent.train.values,
        &splits.train.values,
        &splits.val.values,
        1,
    )
    .unwrap();
    gate.check(
        (share - 0.5).abs() <= 0.05,
        format!("dcr1 share {share:.4} outside 0.5 +- 0.05"),
    );
    gate.finish();
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_statistics() {
    let mut gate = Gate::new("criterion 9: statistics fixtures");
    let p = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    gate.check((p - 1.0 / 32.0).abs() < 1e-12, format!("wilcoxon p = {p}"));

    let report = aggregate(&[3.7; 8], 2000, 0).unwrap();
    gate.check(
        report.ci_lower == 3.7 && report.ci_upper == 3.7 && report.median == 3.7,
        format!("constant CI [{}, {}]", report.ci_lower, report.ci_upper),
    );

    // Reported regression improvements from the cited inputs.
    let solar = delta_percent(0.0620, 0.1025, Task::Regression).unwrap();
    gate.check((solar - 39.5).abs() < 0.05, format!("solar-flare delta {solar:.2}"));
    let abalone = delta_percent(0.074, 0.079, Task::Regression).unwrap();
    gate.check((abalone - 6.3).abs() < 0.05, format!("abalone delta {abalone:.2}"));
    gate.finish();
}

// --------------------------------------------------------------- criterion 10

#[test]
fn c10_search_thread_determinism() {
    let mut gate = Gate::new("criterion 10: search trial log is thread-count invariant");
    let splits = classification_splits(60, 2, 100);
    let backbone = fit_backbone_for(&splits, 30, 100);
    let space = SearchSpace { k_max: 5.0, ..SearchSpace::default() };

    let run = |threads: usize| -> String {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let ctx = SearchContext {
                splits: &splits,
                backbone: &backbone,
                m_factor: 20,
                batch_size: 256,
                vae_epochs: 30,
                ref_type: None,
            };
            let (_, log) = optimize(&ctx, &space, 4, 2, 9).unwrap();
            log.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect()
        })
    };
    let single = run(1);
    let multi = run(4);
    gate.check(single == multi, "trial logs differ between 1 and 4 threads".to_string());
    gate.finish();
}
