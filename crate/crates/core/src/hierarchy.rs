//! Label-hierarchy generation on generic embeddings, and taxonomy-level
//! tracing.
//!
//! Pseudo-labels come from k-means over embedding vectors: either one
//! clustering per superclass (fine id = C*k + c, which keeps ids of distinct
//! superclasses disjoint), one clustering over the whole dataset, or random
//! ids as a control. A rebalancing pass instead picks, per superclass, the
//! largest cluster count whose smallest cluster stays above a floor.

use crate::error::{Result, SimError};
use crate::rng;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

/// Embedding matrix with one superclass id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub base_labels: Vec<u64>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, base_labels: Vec<u64>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(SimError::config("embedding set must be non-empty"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(SimError::config("embedding vectors must be finite"));
        }
        if base_labels.len() != vectors.nrows() {
            return Err(SimError::config(format!(
                "{} labels for {} embedding rows",
                base_labels.len(),
                vectors.nrows()
            )));
        }
        Ok(EmbeddingSet { vectors, base_labels })
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    /// Row indices per superclass, keyed and iterated in label order.
    pub fn groups(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut g: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.base_labels.iter().enumerate() {
            g.entry(l).or_default().push(i);
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inertia_of(data: ArrayView2<f64>, centroids: &Array2<f64>, assign: &[usize]) -> f64 {
    data.rows()
        .into_iter()
        .zip(assign)
        .map(|(row, &c)| sq_dist(row, centroids.row(c)))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding. Runs to an assignment fixpoint
/// or `max_iters`; empty clusters are re-seeded to the farthest point.
/// Deterministic given `seed`.
pub fn lloyd_kmeans(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    let n = data.nrows();
    let dim = data.ncols();
    if k == 0 || max_iters == 0 {
        return Err(SimError::config("k and max_iters must be positive"));
    }
    if k > n {
        return Err(SimError::config(format!("k = {k} exceeds {n} points")));
    }

    let mut rng = rng::stream(seed, rng::tag::KMEANS, k as u64, n as u64);

    // k-means++ seeding: D^2-weighted draws
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a centroid; any point works
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(data.row(i), centroids.row(c)));
        }
    }

    let assign_all = |centroids: &Array2<f64>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d = sq_dist(data.row(i), centroids.row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign_all(&centroids);
    let mut inertia = inertia_of(data, &centroids, &assignments);
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        // means of assigned points
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
        }
        for c in 0..k {
            if counts[c] > 0 {
                sums.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            } else {
                // re-seed an empty cluster to the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(data.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                sums.row_mut(c).assign(&data.row(far));
            }
        }
        centroids = sums;
        let next = assign_all(&centroids);
        let next_inertia = inertia_of(data, &centroids, &next);
        debug_assert!(
            next_inertia <= inertia + 1e-9 * inertia.abs().max(1.0),
            "inertia rose from {inertia} to {next_inertia}"
        );
        let fixpoint = next == assignments;
        assignments = next;
        inertia = next_inertia;
        if fixpoint {
            break;
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    /// One clustering per superclass; fine id = C * superclass + cluster.
    PerGroup,
    /// One clustering over all rows; fine id = cluster id.
    WholeDataset,
    /// Uniform random id in [0, C) per sample.
    Random,
    /// Random cluster within the superclass: id = C * superclass + uniform.
    PerGroupRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineIdAssignment {
    pub ids: Vec<u64>,
    pub mode: AssignMode,
    pub c: usize,
    pub warnings: Vec<String>,
}

/// Assigns fine-grained ids to every row of `emb`.
pub fn assign_fine_ids(
    emb: &EmbeddingSet,
    mode: AssignMode,
    c: usize,
    seed: u64,
) -> Result<FineIdAssignment> {
    if c == 0 {
        return Err(SimError::config("cluster count C must be at least 1"));
    }
    let mut ids = vec![0u64; emb.n()];
    let mut warnings = Vec::new();
    match mode {
        AssignMode::PerGroup => {
            let results: Vec<(u64, Vec<usize>, std::result::Result<KMeansResult, String>, usize)> = emb
                .groups()
                .into_iter()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(label, rows)| {
                    let k_eff = c.min(rows.len());
                    let sub = select_rows(&emb.vectors, &rows);
                    let res = lloyd_kmeans(
                        sub.view(),
                        k_eff,
                        rng::derive_seed(seed, rng::tag::KMEANS, label, 0),
                        200,
                    )
                    .map_err(|e| e.to_string());
                    (label, rows, res, k_eff)
                })
                .collect();
            for (label, rows, res, k_eff) in results {
                let res = res.map_err(SimError::Config)?;
                if k_eff < c {
                    warnings.push(format!(
                        "superclass {label}: only {} samples, shrank C from {c} to {k_eff}",
                        rows.len()
                    ));
                }
                for (pos, &row) in rows.iter().enumerate() {
                    ids[row] = (c as u64) * label + res.assignments[pos] as u64;
                }
            }
        }
        AssignMode::WholeDataset => {
            let res = lloyd_kmeans(emb.vectors.view(), c.min(emb.n()), seed, 200)?;
            if c > emb.n() {
                warnings.push(format!("only {} samples, shrank C from {c}", emb.n()));
            }
            for (i, &a) in res.assignments.iter().enumerate() {
                ids[i] = a as u64;
            }
        }
        AssignMode::Random => {
            let mut r = rng::stream(seed, rng::tag::KMEANS, 1, 0);
            for id in ids.iter_mut() {
                *id = r.gen_range(0..c as u64);
            }
        }
        AssignMode::PerGroupRandom => {
            let mut r = rng::stream(seed, rng::tag::KMEANS, 2, 0);
            for (i, id) in ids.iter_mut().enumerate() {
                *id = (c as u64) * emb.base_labels[i] + r.gen_range(0..c as u64);
            }
        }
    }
    Ok(FineIdAssignment {
        ids,
        mode,
        c,
        warnings,
    })
}

fn select_rows(data: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), data.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&data.row(r));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupChoice {
    pub superclass: u64,
    pub chosen_c: usize,
    pub id_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rebalanced {
    pub ids: Vec<u64>,
    pub choices: Vec<GroupChoice>,
    pub min_count: usize,
}

/// For each superclass independently, picks the largest candidate cluster
/// count whose clustering keeps every cluster size strictly above
/// `min_count`; falls back to a single cluster otherwise. Ids are offset
/// cumulatively (superclasses in ascending label order) since granularities
/// now differ per group; the mapping is recorded in `choices`.
pub fn rebalance_granularity(
    emb: &EmbeddingSet,
    candidate_cs: &[usize],
    min_count: usize,
    seed: u64,
) -> Result<Rebalanced> {
    if candidate_cs.is_empty() {
        return Err(SimError::config("need at least one candidate cluster count"));
    }
    if candidate_cs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::config("candidate cluster counts must be strictly ascending"));
    }
    let groups: Vec<(u64, Vec<usize>)> = emb.groups().into_iter().collect();
    let picked: Vec<(u64, Vec<usize>, usize, Vec<usize>)> = groups
        .into_par_iter()
        .map(|(label, rows)| {
            let sub = select_rows(&emb.vectors, &rows);
            let mut chosen_c = 1usize;
            let mut chosen_assign = vec![0usize; rows.len()];
            // candidates ascending: the last one passing the floor wins
            for &cand in candidate_cs {
                if cand > rows.len() {
                    break;
                }
                let res = match lloyd_kmeans(
                    sub.view(),
                    cand,
                    rng::derive_seed(seed, rng::tag::KMEANS, label, cand as u64),
                    200,
                ) {
                    Ok(r) => r,
                    Err(_) => continue,
                };
                let mut counts = vec![0usize; cand];
                for &a in &res.assignments {
                    counts[a] += 1;
                }
                if counts.iter().all(|&n| n > min_count) {
                    chosen_c = cand;
                    chosen_assign = res.assignments;
                }
            }
            (label, rows, chosen_c, chosen_assign)
        })
        .collect();

    let mut ids = vec![0u64; emb.n()];
    let mut choices = Vec::new();
    let mut offset = 0u64;
    for (label, rows, chosen_c, assign) in picked {
        for (pos, &row) in rows.iter().enumerate() {
            ids[row] = offset + assign[pos] as u64;
        }
        choices.push(GroupChoice {
            superclass: label,
            chosen_c,
            id_offset: offset,
        });
        offset += chosen_c as u64;
    }
    Ok(Rebalanced {
        ids,
        choices,
        min_count,
    })
}

/// Rooted taxonomy given by child -> parent edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub parent: BTreeMap<String, String>,
    pub root: String,
}

impl Taxonomy {
    /// Builds from edges, finds the unique root, and rejects cycles.
    pub fn from_edges(edges: &[(String, String)]) -> Result<Taxonomy> {
        if edges.is_empty() {
            return Err(SimError::config("taxonomy needs at least one edge"));
        }
        let mut parent = BTreeMap::new();
        for (child, par) in edges {
            if parent.insert(child.clone(), par.clone()).is_some() {
                return Err(SimError::config(format!("node {child} has two parents")));
            }
        }
        let mut roots: Vec<String> = Vec::new();
        for (_, par) in edges {
            if !parent.contains_key(par) && !roots.contains(par) {
                roots.push(par.clone());
            }
        }
        if roots.len() != 1 {
            return Err(SimError::config(format!(
                "taxonomy must have exactly one root, found {roots:?}"
            )));
        }
        let root = roots.pop().unwrap();
        let tax = Taxonomy { parent, root };
        // every chain must reach the root without revisiting a node
        for node in tax.parent.keys() {
            let mut hops = 0usize;
            let mut cur = node.clone();
            while cur != tax.root {
                cur = tax
                    .parent
                    .get(&cur)
                    .cloned()
                    .ok_or_else(|| SimError::config(format!("node {cur} has no path to root")))?;
                hops += 1;
                if hops > tax.parent.len() {
                    return Err(SimError::config("taxonomy contains a cycle"));
                }
            }
        }
        Ok(tax)
    }

    /// Reads a "child<TAB>parent" edge list.
    pub fn from_edge_list<R: BufRead>(r: R) -> Result<Taxonomy> {
        let mut edges = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let child = parts
                .next()
                .ok_or_else(|| SimError::Parse("missing child".into()))?;
            let par = parts.next().ok_or_else(|| {
                SimError::Parse(format!("edge line without a tab separator: {line}"))
            })?;
            edges.push((child.trim().to_string(), par.trim().to_string()));
        }
        Taxonomy::from_edges(&edges)
    }

    pub fn contains(&self, node: &str) -> bool {
        node == self.root || self.parent.contains_key(node)
    }

    /// Number of distinct labels at level k over the given leaves.
    pub fn granularity_at(&self, leaves: &[String], k: usize) -> Result<usize> {
        let mut set = std::collections::BTreeSet::new();
        for leaf in leaves {
            set.insert(level_k_label(self, leaf, k)?.to_string());
        }
        Ok(set.len())
    }
}

/// The node k parent hops above `leaf`, clamped at the root; k = 0 is the
/// leaf itself.
pub fn level_k_label<'t>(tax: &'t Taxonomy, leaf: &'t str, k: usize) -> Result<&'t str> {
    if !tax.contains(leaf) {
        return Err(SimError::UnknownNode(leaf.to_string()));
    }
    let mut cur = leaf;
    for _ in 0..k {
        if cur == tax.root {
            break;
        }
        cur = tax.parent.get(cur).map(|s| s.as_str()).unwrap_or(&tax.root);
    }
    Ok(cur)
}

/// Embedding file: u64 n, u64 e, then n*e row-major 32-bit floats, all
/// little-endian.
pub fn read_embeddings_binary<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    let n = crate::dict::read_u64(r)? as usize;
    let e = crate::dict::read_u64(r)? as usize;
    if n == 0 || e == 0 {
        return Err(SimError::Parse("empty embedding file".into()));
    }
    let mut out = Array2::<f64>::zeros((n, e));
    let mut buf = [0u8; 4];
    for v in out.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf) as f64;
    }
    Ok(out)
}

pub fn write_embeddings_binary<W: Write>(w: &mut W, data: ArrayView2<f64>) -> Result<()> {
    w.write_all(&(data.nrows() as u64).to_le_bytes())?;
    w.write_all(&(data.ncols() as u64).to_le_bytes())?;
    for v in data.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// CSV embeddings: one row per line, comma-separated floats.
pub fn read_embeddings_csv<R: Read>(r: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SimError::Parse(e.to_string()))?;
        let row: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| SimError::Parse(e.to_string()))?);
    }
    if rows.is_empty() {
        return Err(SimError::Parse("empty embedding csv".into()));
    }
    let e = rows[0].len();
    if rows.iter().any(|r| r.len() != e) {
        return Err(SimError::Parse("ragged embedding csv".into()));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, e), flat).map_err(|e| SimError::Parse(e.to_string()))
}

/// Label file: one u64 per line.
pub fn read_labels<R: BufRead>(r: R) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<u64>()
                .map_err(|e| SimError::Parse(format!("bad label '{line}': {e}")))?,
        );
    }
    Ok(out)
}
