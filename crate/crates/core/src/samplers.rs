//! Stage III subset selection: five samplers drawing K * N_r rows from the
//! candidate pool. Samplers select, they never synthesize: every returned
//! row is a row of the input pool, without duplicate indices.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chamfer::{chamfer, PointSet};
use crate::data::{EncodedMatrix, Target};
use crate::error::{BcrError, Result};
use crate::representation::RepMap;

/// Candidate samples with hard or soft targets and cached phi-embeddings.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub features: Array2<f64>,
    pub target: Target,
    pub embeddings: Option<Array2<f64>>,
    pub seed: u64,
    pub guided: bool,
}

impl CandidatePool {
    pub fn from_matrix(m: &EncodedMatrix, seed: u64) -> Self {
        CandidatePool {
            features: m.values.clone(),
            target: m.target.clone(),
            embeddings: None,
            seed,
            guided: false,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Compute and cache phi-embeddings of every candidate.
    pub fn embed(&mut self, rep: &RepMap) -> Result<&Array2<f64>> {
        if self.embeddings.is_none() {
            self.embeddings = Some(rep.map_batch(&self.features)?);
        }
        Ok(self.embeddings.as_ref().unwrap())
    }

    pub fn select(&self, indices: &[usize]) -> CandidatePool {
        let mut features = Array2::zeros((indices.len(), self.features.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            features.row_mut(k).assign(&self.features.row(i));
        }
        let embeddings = self.embeddings.as_ref().map(|e| {
            let mut out = Array2::zeros((indices.len(), e.ncols()));
            for (k, &i) in indices.iter().enumerate() {
                out.row_mut(k).assign(&e.row(i));
            }
            out
        });
        CandidatePool {
            features,
            target: self.target.select(indices),
            embeddings,
            seed: self.seed,
            guided: self.guided,
        }
    }

    pub fn as_matrix(&self) -> EncodedMatrix {
        EncodedMatrix { values: self.features.clone(), target: self.target.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    Chamfer,
    Stratified,
    Iboss,
    Hdbscan,
    Md,
}

impl SamplerKind {
    /// Grid order used for deterministic tie-breaks.
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Chamfer,
        SamplerKind::Stratified,
        SamplerKind::Iboss,
        SamplerKind::Hdbscan,
        SamplerKind::Md,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Chamfer => "chamfer",
            SamplerKind::Stratified => "stratified",
            SamplerKind::Iboss => "iboss",
            SamplerKind::Hdbscan => "hdbscan",
            SamplerKind::Md => "md",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub kind: SamplerKind,
    pub target_count: usize,
    /// Chamfer batch size / HDBSCAN min cluster size.
    pub batch: usize,
    /// Neighbor count for the manifold-distance score.
    pub k_neighbors: usize,
    pub seed: u64,
}

impl SelectionSpec {
    pub fn new(kind: SamplerKind, target_count: usize, seed: u64) -> Self {
        SelectionSpec { kind, target_count, batch: 512, k_neighbors: 10, seed }
    }

    fn validate(&self, pool_len: usize) -> Result<()> {
        if self.target_count == 0 || self.target_count > pool_len {
            return Err(BcrError::config(format!(
                "target_count {} outside (0, {pool_len}]",
                self.target_count
            )));
        }
        if self.batch == 0 {
            return Err(BcrError::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Dispatch to the requested sampler; returns the selected pool indices.
pub fn run_sampler(
    pool: &mut CandidatePool,
    real: &EncodedMatrix,
    spec: &SelectionSpec,
    rep: &RepMap,
) -> Result<Vec<usize>> {
    match spec.kind {
        SamplerKind::Chamfer => chamfer_sampler(pool, real, spec, rep),
        SamplerKind::Stratified => stratified_sampler(pool, real, spec),
        SamplerKind::Iboss => iboss_sampler(pool, spec, rep),
        SamplerKind::Hdbscan => hdbscan_sampler(pool, real, spec, rep),
        SamplerKind::Md => md_sampler(pool, real, spec, rep),
    }
}

/// Partition the (seeded-shuffled) pool into consecutive batches, score each
/// by the symmetric Chamfer functional against the real set in phi-space,
/// and take batches in ascending order until the budget is met. The final
/// batch is truncated by dropping its highest per-point fidelity distances.
pub fn chamfer_sampler(
    pool: &mut CandidatePool,
    real: &EncodedMatrix,
    spec: &SelectionSpec,
    rep: &RepMap,
) -> Result<Vec<usize>> {
    spec.validate(pool.len())?;
    let n = pool.len();
    let embeddings = pool.embed(rep)?.clone();
    let real_set = PointSet::new(rep.map_batch(&real.values)?)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let batches: Vec<&[usize]> = order.chunks(spec.batch).collect();

    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(batches.len());
    for (bi, batch) in batches.iter().enumerate() {
        let mut pts = Array2::zeros((batch.len(), embeddings.ncols()));
        for (k, &i) in batch.iter().enumerate() {
            pts.row_mut(k).assign(&embeddings.row(i));
        }
        let score = chamfer(&PointSet::new(pts)?, &real_set)?.total;
        scored.push((bi, score));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

    let mut selected = Vec::with_capacity(spec.target_count);
    for (bi, _) in scored {
        let batch = batches[bi];
        let remaining = spec.target_count - selected.len();
        if batch.len() <= remaining {
            selected.extend_from_slice(batch);
        } else {
            // Keep the rows nearest the real set.
            let mut fidelity: Vec<(usize, f64)> = batch
                .iter()
                .map(|&i| {
                    let d = real_set.nearest(embeddings.row(i)).unwrap().1;
                    (i, d)
                })
                .collect();
            fidelity.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            selected.extend(fidelity.into_iter().take(remaining).map(|(i, _)| i));
        }
        if selected.len() == spec.target_count {
            break;
        }
    }
    Ok(selected)
}

/// Per-stratum counts proportional to the real stratum frequencies
/// (largest-remainder rounding), uniform without replacement within each
/// stratum. Regression strata are 10 equal-frequency bins on real targets.
pub fn stratified_sampler(
    pool: &CandidatePool,
    real: &EncodedMatrix,
    spec: &SelectionSpec,
) -> Result<Vec<usize>> {
    spec.validate(pool.len())?;
    let (pool_strata, real_counts) = strata(pool, real)?;
    let n_strata = real_counts.len();

    // Desired counts from real frequencies by largest remainder.
    let real_total: usize = real_counts.iter().sum();
    let quotas: Vec<f64> = real_counts
        .iter()
        .map(|&c| c as f64 * spec.target_count as f64 / real_total as f64)
        .collect();
    let mut desired: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_strata).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = spec.target_count - desired.iter().sum::<usize>();
    for &s in &order {
        if left == 0 {
            break;
        }
        desired[s] += 1;
        left -= 1;
    }

    // Reassign counts a stratum cannot serve to the nearest stratum with
    // spare pool capacity.
    let capacity: Vec<usize> = pool_strata.iter().map(|s| s.len()).collect();
    for s in 0..n_strata {
        while desired[s] > capacity[s] {
            let excess = desired[s] - capacity[s];
            let near = (0..n_strata)
                .filter(|&o| o != s && desired[o] < capacity[o])
                .min_by_key(|&o| (o as i64 - s as i64).unsigned_abs())
                .ok_or_else(|| BcrError::config("pool cannot serve the stratified budget"))?;
            let room = capacity[near] - desired[near];
            let moved = excess.min(room);
            eprintln!("warning: stratum {s} under-represented in pool; {moved} reassigned to {near}");
            desired[s] -= moved;
            desired[near] += moved;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut selected = Vec::with_capacity(spec.target_count);
    for (s, members) in pool_strata.iter().enumerate() {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        selected.extend(m.into_iter().take(desired[s]));
    }
    Ok(selected)
}

fn strata(pool: &CandidatePool, real: &EncodedMatrix) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    match (&real.target, &pool.target) {
        (Target::Classes(real_labels), _) => {
            let n_classes = real_labels.iter().max().map_or(1, |m| m + 1);
            let pool_labels: Vec<usize> = match &pool.target {
                Target::Classes(l) => l.clone(),
                Target::Soft(m) => (0..m.nrows())
                    .map(|i| crate::data::argmax_row(&m.row(i).to_vec()))
                    .collect(),
                Target::Values(_) => {
                    return Err(BcrError::config("classification strata need class labels"))
                }
            };
            let n_classes = n_classes.max(pool_labels.iter().max().map_or(1, |m| m + 1));
            let mut pool_strata = vec![Vec::new(); n_classes];
            for (i, &c) in pool_labels.iter().enumerate() {
                pool_strata[c].push(i);
            }
            let mut real_counts = vec![0usize; n_classes];
            for &c in real_labels {
                real_counts[c] += 1;
            }
            Ok((pool_strata, real_counts))
        }
        (Target::Values(real_vals), Target::Values(pool_vals)) => {
            // 10 equal-frequency bins on the real targets.
            let bins = 10.min(real_vals.len());
            let mut sorted = real_vals.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let edges: Vec<f64> = (1..bins)
                .map(|k| sorted[(k * sorted.len()) / bins])
                .collect();
            let bin_of = |v: f64| edges.iter().filter(|&&e| v >= e).count();
            let mut pool_strata = vec![Vec::new(); bins];
            for (i, &v) in pool_vals.iter().enumerate() {
                pool_strata[bin_of(v)].push(i);
            }
            let mut real_counts = vec![0usize; bins];
            for &v in real_vals {
                real_counts[bin_of(v)] += 1;
            }
            Ok((pool_strata, real_counts))
        }
        _ => Err(BcrError::config("stratified sampler: target kinds do not match")),
    }
}

/// Extreme-value subdata selection: per embedding dimension, take the
/// r = ceil(target / (2 d)) smallest and largest not-yet-selected rows,
/// cycling dimensions until the budget is met. Target-agnostic.
pub fn iboss_sampler(
    pool: &mut CandidatePool,
    spec: &SelectionSpec,
    rep: &RepMap,
) -> Result<Vec<usize>> {
    spec.validate(pool.len())?;
    let embeddings = pool.embed(rep)?;
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    let r = (spec.target_count + 2 * d - 1) / (2 * d);

    // Per-dimension index order, ties by index.
    let sorted_dims: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                embeddings[[a, j]]
                    .partial_cmp(&embeddings[[b, j]])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(spec.target_count);
    'outer: loop {
        for order in &sorted_dims {
            for end in [false, true] {
                let iter: Box<dyn Iterator<Item = &usize>> = if end {
                    Box::new(order.iter().rev())
                } else {
                    Box::new(order.iter())
                };
                let mut grabbed = 0;
                for &i in iter {
                    if grabbed == r {
                        break;
                    }
                    if !taken[i] {
                        taken[i] = true;
                        selected.push(i);
                        grabbed += 1;
                        if selected.len() == spec.target_count {
                            break 'outer;
                        }
                    }
                }
            }
        }
        if selected.len() == n {
            break;
        }
    }
    Ok(selected)
}

/// Radii of the k-NN hyperspheres around each real point in phi-space:
/// rho_k(r) is the distance from phi(r) to its k-th nearest neighbor in
/// phi(real) excluding r itself.
pub fn compute_hyperspheres(real_embedded: &Array2<f64>, k: usize) -> Result<Array1<f64>> {
    let n = real_embedded.nrows();
    if k >= n {
        return Err(BcrError::config(format!("k = {k} must be below |real| = {n}")));
    }
    let mut radii = Array1::zeros(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..real_embedded.ncols() {
                    let diff = real_embedded[[i, c]] - real_embedded[[j, c]];
                    acc += diff * diff;
                }
                acc.sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii[i] = dists[k - 1];
    }
    Ok(radii)
}

/// Distance from a candidate to the union of real hyperspheres: zero inside
/// any sphere, else the distance to the nearest sphere boundary.
pub fn manifold_distance(
    candidate: ndarray::ArrayView1<f64>,
    real_embedded: &Array2<f64>,
    radii: &Array1<f64>,
) -> f64 {
    let mut best = f64::INFINITY;
    for (r, row) in real_embedded.rows().into_iter().enumerate() {
        let mut acc = 0.0;
        for (a, b) in candidate.iter().zip(row.iter()) {
            let diff = a - b;
            acc += diff * diff;
        }
        let d = (acc.sqrt() - radii[r]).max(0.0);
        best = best.min(d);
        if best == 0.0 {
            break;
        }
    }
    best
}

/// Retain the candidates with smallest manifold distance, ties by index.
pub fn md_sampler(
    pool: &mut CandidatePool,
    real: &EncodedMatrix,
    spec: &SelectionSpec,
    rep: &RepMap,
) -> Result<Vec<usize>> {
    spec.validate(pool.len())?;
    let embeddings = pool.embed(rep)?.clone();
    let real_embedded = rep.map_batch(&real.values)?;
    let radii = compute_hyperspheres(&real_embedded, spec.k_neighbors)?;
    let mut scored: Vec<(usize, f64)> = (0..pool.len())
        .map(|i| (i, manifold_distance(embeddings.row(i), &real_embedded, &radii)))
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(spec.target_count).map(|(i, _)| i).collect())
}

/// HDBSCAN over the candidate pool in phi-space with min cluster size b:
/// mutual-reachability MST, condensed hierarchy, stability-selected flat
/// clusters, then clusters accumulated by density (mean inverse core
/// distance) until the budget is met.
pub fn hdbscan_sampler(
    pool: &mut CandidatePool,
    real: &EncodedMatrix,
    spec: &SelectionSpec,
    rep: &RepMap,
) -> Result<Vec<usize>> {
    spec.validate(pool.len())?;
    let n = pool.len();
    if spec.batch > n {
        return Err(BcrError::config(format!(
            "min cluster size {} exceeds pool size {n}",
            spec.batch
        )));
    }
    let embeddings = pool.embed(rep)?.clone();
    let mcs = spec.batch.max(2);

    let clusters = hdbscan_clusters(&embeddings, mcs);
    if clusters.is_empty() {
        eprintln!("warning: HDBSCAN found no cluster of size >= {mcs}; falling back to manifold-distance selection");
        return md_sampler(pool, real, spec, rep);
    }

    let core = core_distances(&embeddings, mcs);
    // Rank clusters by density: mean inverse core distance of members.
    let mut ranked: Vec<(usize, f64)> = clusters
        .iter()
        .enumerate()
        .map(|(ci, members)| {
            let density = members
                .iter()
                .map(|&i| 1.0 / core[i].max(1e-12))
                .sum::<f64>()
                / members.len() as f64;
            (ci, density)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut selected = Vec::with_capacity(spec.target_count);
    for (ci, _) in ranked {
        let mut members = clusters[ci].clone();
        let remaining = spec.target_count - selected.len();
        if members.len() > remaining {
            // Densest members first within the final cluster.
            members.sort_by(|&a, &b| core[a].partial_cmp(&core[b]).unwrap().then(a.cmp(&b)));
            members.truncate(remaining);
        }
        selected.extend(members);
        if selected.len() == spec.target_count {
            break;
        }
    }
    if selected.len() < spec.target_count {
        // Clusters exhausted (noise points remain): fill by manifold distance
        // over the unselected rest, preserving determinism.
        let real_embedded = rep.map_batch(&real.values)?;
        let k = spec.k_neighbors.min(real_embedded.nrows() - 1).max(1);
        let radii = compute_hyperspheres(&real_embedded, k)?;
        let mut chosen = vec![false; n];
        for &i in &selected {
            chosen[i] = true;
        }
        let mut rest: Vec<(usize, f64)> = (0..n)
            .filter(|&i| !chosen[i])
            .map(|i| (i, manifold_distance(embeddings.row(i), &real_embedded, &radii)))
            .collect();
        rest.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        selected.extend(
            rest.into_iter()
                .take(spec.target_count - selected.len())
                .map(|(i, _)| i),
        );
    }
    Ok(selected)
}

fn pairwise_dist(e: &Array2<f64>, a: usize, b: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..e.ncols() {
        let diff = e[[a, j]] - e[[b, j]];
        acc += diff * diff;
    }
    acc.sqrt()
}

/// Distance to the mcs-th nearest neighbor (excluding self).
fn core_distances(e: &Array2<f64>, mcs: usize) -> Vec<f64> {
    let n = e.nrows();
    let k = mcs.min(n - 1);
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| pairwise_dist(e, i, j)).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[k - 1]
        })
        .collect()
}

/// Flat HDBSCAN clusters of size >= mcs by the standard stability rule.
fn hdbscan_clusters(e: &Array2<f64>, mcs: usize) -> Vec<Vec<usize>> {
    let n = e.nrows();
    if n < mcs || n < 2 {
        return Vec::new();
    }
    let core = core_distances(e, mcs);

    // Prim MST over mutual reachability distances.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    best[0] = 0.0;
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    for _ in 0..n {
        let u = (0..n)
            .filter(|&i| !in_tree[i])
            .min_by(|&a, &b| best[a].partial_cmp(&best[b]).unwrap().then(a.cmp(&b)))
            .unwrap();
        in_tree[u] = true;
        if best[u].is_finite() && best[u] > 0.0 || (u != 0 && best[u] == 0.0) {
            edges.push((best[u], parent[u], u));
        }
        for v in 0..n {
            if !in_tree[v] {
                let mr = pairwise_dist(e, u, v).max(core[u]).max(core[v]);
                if mr < best[v] {
                    best[v] = mr;
                    parent[v] = u;
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Single-linkage dendrogram via union-find; internal nodes n..2n-2.
    let total_nodes = 2 * n - 1;
    let mut uf_parent: Vec<usize> = (0..total_nodes).collect();
    fn find(uf: &mut Vec<usize>, mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut children = vec![(0usize, 0usize); total_nodes];
    let mut height = vec![0.0f64; total_nodes];
    let mut size = vec![1usize; total_nodes];
    let mut next = n;
    for (w, a, b) in edges {
        let ra = find(&mut uf_parent, a);
        let rb = find(&mut uf_parent, b);
        if ra == rb {
            continue;
        }
        children[next] = (ra, rb);
        height[next] = w;
        size[next] = size[ra] + size[rb];
        uf_parent[ra] = next;
        uf_parent[rb] = next;
        next += 1;
    }
    let root = next - 1;

    // Condensed tree: clusters persist through small splits; a true split
    // needs both sides >= mcs.
    #[derive(Clone)]
    struct Cluster {
        birth_lambda: f64,
        stability: f64,
        members: Vec<usize>,
        cluster_children: Vec<usize>,
        selected: bool,
    }
    let mut clusters: Vec<Cluster> = Vec::new();

    // Walk each cluster starting from a dendrogram node; returns the
    // cluster id. Leaf points that fall out early contribute (lambda_out -
    // lambda_birth) to stability.
    struct Walk<'a> {
        children: &'a [(usize, usize)],
        height: &'a [f64],
        size: &'a [usize],
        n: usize,
        mcs: usize,
    }
    impl Walk<'_> {
        fn run(&self, start: usize, birth_lambda: f64, clusters: &mut Vec<Cluster>) -> usize {
            let id = clusters.len();
            clusters.push(Cluster {
                birth_lambda,
                stability: 0.0,
                members: Vec::new(),
                cluster_children: Vec::new(),
                selected: false,
            });
            let mut stack = vec![start];
            while let Some(node) = stack.pop() {
                if node < self.n {
                    // A point leaves at the lambda of the edge that attached
                    // it; approximate with the parent node height recorded on
                    // the stack path. Points reaching here stay to the end of
                    // this cluster.
                    clusters[id].members.push(node);
                    continue;
                }
                let (a, b) = self.children[node];
                let lambda = if self.height[node] > 0.0 {
                    1.0 / self.height[node]
                } else {
                    f64::INFINITY
                };
                let big_a = self.size[a] >= self.mcs;
                let big_b = self.size[b] >= self.mcs;
                if big_a && big_b {
                    // True split: spawn child clusters.
                    let ca = self.run(a, lambda, clusters);
                    let cb = self.run(b, lambda, clusters);
                    clusters[id].cluster_children.push(ca);
                    clusters[id].cluster_children.push(cb);
                    let death = lambda;
                    let birth = clusters[id].birth_lambda;
                    // Every point alive at the split contributes until it.
                    let alive = self.size[node] as f64;
                    clusters[id].stability +=
                        alive * (lambda_cap(death) - lambda_cap(birth)).max(0.0);
                } else {
                    // Points on the small side fall out at this lambda.
                    let (stay, out) = if big_a { (a, b) } else if big_b { (b, a) } else { (a, b) };
                    if !big_a && !big_b {
                        // Entire node dissolves into points of this cluster.
                        stack.push(a);
                        stack.push(b);
                        continue;
                    }
                    let birth = clusters[id].birth_lambda;
                    clusters[id].stability +=
                        self.size[out] as f64 * (lambda_cap(lambda) - lambda_cap(birth)).max(0.0);
                    collect_leaves(self.children, self.n, out, &mut clusters[id].members);
                    stack.push(stay);
                }
            }
            id
        }
    }
    fn lambda_cap(l: f64) -> f64 {
        l.min(1e12)
    }
    fn collect_leaves(children: &[(usize, usize)], n: usize, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(children[x].0);
                stack.push(children[x].1);
            }
        }
    }

    let walk = Walk { children: &children, height: &height, size: &size, n, mcs };
    let root_id = walk.run(root, 0.0, &mut clusters);

    // Leaf-first stability selection.
    fn select(clusters: &mut Vec<Cluster>, id: usize) -> f64 {
        if clusters[id].cluster_children.is_empty() {
            clusters[id].selected = true;
            return clusters[id].stability;
        }
        let kids = clusters[id].cluster_children.clone();
        let child_sum: f64 = kids.iter().map(|&c| select(clusters, c)).sum();
        if child_sum >= clusters[id].stability {
            child_sum
        } else {
            clusters[id].selected = true;
            for &c in &kids {
                deselect(clusters, c);
            }
            clusters[id].stability
        }
    }
    fn deselect(clusters: &mut Vec<Cluster>, id: usize) {
        clusters[id].selected = false;
        let kids = clusters[id].cluster_children.clone();
        for c in kids {
            deselect(clusters, c);
        }
    }
    select(&mut clusters, root_id);

    // A selected cluster's flat membership is its direct members plus every
    // descendant's members.
    fn full_members(clusters: &[Cluster], id: usize) -> Vec<usize> {
        let mut out = clusters[id].members.clone();
        for &c in &clusters[id].cluster_children {
            out.extend(full_members(clusters, c));
        }
        out
    }
    let mut flat: Vec<Vec<usize>> = clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.selected)
        .map(|(id, _)| {
            let mut m = full_members(&clusters, id);
            m.sort_unstable();
            m
        })
        .filter(|m| m.len() >= mcs)
        .collect();
    flat.sort_by_key(|m| m[0]);
    flat
}
