//! Numerical probes: initialization geometry statistics, phase-boundary
//! detection, the logarithmic growth-law fit, singleton-activation
//! measurement, hard-example audits, and Monte-Carlo checks of the two
//! Gaussian concentration bounds used as test oracles.

use crate::data::{make_eval_set, Batch, PatchTag, Sample, SampleKind, Sign};
use crate::dict::{Dictionary, FeatureId};
use crate::error::{Result, SimError};
use crate::model::{aggregate_fine_to_coarse, argmax, forward, Network};
use crate::params::{HyperParams, Variant};
use crate::rng;
use crate::sets::NeuronSets;
use crate::trainer::TrainHistory;
use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Per-feature set sizes and cross-feature balance statistics of one head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryRow {
    pub head: usize,
    pub feature: String,
    pub star_size: usize,
    pub s_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryReport {
    pub rows: Vec<GeometryRow>,
    /// max over feature pairs (within a head) of | |S*(v)|/|S*(v')| - 1 |.
    pub max_star_ratio_dev: f64,
    /// mean of the same quantity over all ordered pairs.
    pub mean_star_ratio_dev: f64,
    /// max over feature pairs of | |S*(v)|/|S(v')| - 1 |.
    pub max_star_s_ratio_dev: f64,
    /// largest |U(r)| over all neurons.
    pub max_u_len: usize,
    /// set when some |S*(v)| or |S(v)| is zero: ratios are then unreliable.
    pub geometry_failure: bool,
}

/// Balance statistics over the designated features, per head.
pub fn init_geometry_report(sets: &NeuronSets) -> GeometryReport {
    let mut rows = Vec::new();
    let mut star_by_head: Vec<Vec<f64>> = vec![Vec::new(); sets.n_heads];
    let mut s_by_head: Vec<Vec<f64>> = vec![Vec::new(); sets.n_heads];
    for head in 0..sets.n_heads {
        for (fi, feature) in sets.features.iter().enumerate() {
            let star = sets.star[fi].iter().filter(|n| n.head == head).count();
            let s = sets.s[fi].iter().filter(|n| n.head == head).count();
            rows.push(GeometryRow {
                head,
                feature: feature.label(),
                star_size: star,
                s_size: s,
            });
            star_by_head[head].push(star as f64);
            s_by_head[head].push(s as f64);
        }
    }
    let mut failure = false;
    let mut max_star = 0.0f64;
    let mut sum_star = 0.0f64;
    let mut n_pairs = 0usize;
    let mut max_star_s = 0.0f64;
    for head in 0..sets.n_heads {
        let stars = &star_by_head[head];
        let ss = &s_by_head[head];
        for i in 0..stars.len() {
            for j in 0..stars.len() {
                if i == j {
                    continue;
                }
                if stars[j] == 0.0 || ss[j] == 0.0 {
                    failure = true;
                    continue;
                }
                let dev = (stars[i] / stars[j] - 1.0).abs();
                max_star = max_star.max(dev);
                sum_star += dev;
                n_pairs += 1;
                max_star_s = max_star_s.max((stars[i] / ss[j] - 1.0).abs());
            }
        }
    }
    GeometryReport {
        rows,
        max_star_ratio_dev: max_star,
        mean_star_ratio_dev: if n_pairs > 0 { sum_star / n_pairs as f64 } else { 0.0 },
        max_star_s_ratio_dev: max_star_s,
        max_u_len: sets.max_u_len(),
        geometry_failure: failure,
    }
}

pub fn geometry_csv(report: &GeometryReport) -> String {
    let mut out = String::from("head,feature,star_size,s_size\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.head, r.feature, r.star_size, r.s_size));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Reached(u64),
    NotReached,
}

impl Boundary {
    pub fn step(&self) -> Option<u64> {
        match self {
            Boundary::Reached(t) => Some(*t),
            Boundary::NotReached => None,
        }
    }
}

/// Finds T0 (first logged step whose diagnostic true-class response reaches
/// 1/d; fine regime: first step with a softmax output reaching 1/(1.5 k_+))
/// and T11 (first step with the saturation ratio at 1 - eps_t11). The
/// saturation boundary belongs to the coarse dynamics; under the fine regime
/// it is reported as not reached (the aggregated responses of many heads
/// saturate the ratio from step 0, which says nothing about the per-head
/// loss weights).
pub fn detect_phase_boundaries(
    history: &TrainHistory,
    params: &HyperParams,
    eps_t11: f64,
    regime: Variant,
) -> (Boundary, Boundary) {
    let t0_threshold = 1.0 / params.d as f64;
    let fine_threshold = 1.0 / (1.5 * params.k_plus as f64);
    let mut t0 = Boundary::NotReached;
    let mut t11 = Boundary::NotReached;
    for rec in &history.records {
        let t0_hit = match regime {
            Variant::Coarse => rec.f_normal_max >= t0_threshold,
            Variant::Fine => rec.logit_max >= fine_threshold,
        };
        if t0 == Boundary::NotReached && t0_hit {
            t0 = Boundary::Reached(rec.step);
        }
        if regime == Variant::Coarse
            && t11 == Boundary::NotReached
            && rec.t11_ratio_max >= 1.0 - eps_t11
        {
            t11 = Boundary::Reached(rec.step);
        }
    }
    (t0, t11)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogFit {
    pub c: f64,
    pub t0: f64,
    pub r2: f64,
}

/// Least-squares fit of A(t) ~ ln(C (t - t_lo) + t0) over the window, by a
/// coarse grid over (C, t0) followed by shrinking local refinement. Requires
/// at least 10 points; a (near-)constant series is a fit failure.
pub fn fit_log_growth(series: &[(f64, f64)], window: (f64, f64)) -> Result<LogFit> {
    let (lo, hi) = window;
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= lo && *t <= hi)
        .map(|(t, a)| (t - lo, a))
        .collect();
    if pts.len() < 10 {
        return Err(SimError::contract(format!(
            "log fit needs at least 10 points in the window, got {}",
            pts.len()
        )));
    }
    let a_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let a_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if a_max - a_min < 1e-12 {
        return Err(SimError::contract("degenerate (constant) series"));
    }
    let t_max = pts.iter().map(|p| p.0).fold(0.0f64, f64::max).max(1.0);

    let sse = |c: f64, t0: f64| -> f64 {
        let mut s = 0.0;
        for &(t, a) in &pts {
            let arg = c * t + t0;
            if arg <= 0.0 {
                return f64::INFINITY;
            }
            let r = a - arg.ln();
            s += r * r;
        }
        s
    };

    // coarse log-space grid; the anchor exp(a_max) is clamped so badly
    // mis-specified (non-logarithmic) series still get a finite best effort
    let exp_max = a_max.min(500.0).exp();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let n_grid = 48;
    for i in 0..n_grid {
        // C spans "full growth happened in one step" down to "in 1e6 windows"
        let c = exp_max / t_max * 10f64.powf(-6.0 + 8.0 * i as f64 / (n_grid - 1) as f64);
        for j in 0..n_grid {
            let t0 = exp_max * 10f64.powf(-8.0 + 9.0 * j as f64 / (n_grid - 1) as f64);
            let s = sse(c, t0);
            if s < best.0 {
                best = (s, c, t0);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(SimError::contract("log fit found no feasible grid point"));
    }

    // shrinking multiplicative refinement around the best grid cell
    let (mut c, mut t0) = (best.1, best.2);
    let mut span = 3.0f64;
    for _round in 0..60 {
        let mut improved = false;
        for (dc, dt) in [
            (span, 1.0),
            (1.0 / span, 1.0),
            (1.0, span),
            (1.0, 1.0 / span),
            (span, span),
            (1.0 / span, 1.0 / span),
            (span, 1.0 / span),
            (1.0 / span, span),
        ] {
            let s = sse(c * dc, t0 * dt);
            if s < best.0 {
                best.0 = s;
                c *= dc;
                t0 *= dt;
                improved = true;
            }
        }
        if !improved {
            span = span.sqrt().max(1.0 + 1e-9);
            if span < 1.0 + 1e-8 {
                break;
            }
        }
    }

    let mean_a = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - best.0 / ss_tot } else { 0.0 };
    Ok(LogFit { c, t0, r2 })
}

/// Fraction of (neuron-in-S*, sample) pairs that are singleton-correct: the
/// neuron activates on every patch carrying its own feature and on no other
/// patch of the sample.
pub fn singleton_activation_rate(
    net: &Network,
    batch: &Batch,
    sets: &NeuronSets,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (fi, feature) in sets.features.iter().enumerate() {
        for neuron in &sets.star[fi] {
            let w = net.heads[neuron.head].weights.row(neuron.r);
            let b = net.heads[neuron.head].biases[neuron.r];
            for sample in &batch.samples {
                total += 1;
                let mut ok = true;
                for (p, tag) in sample.patch_tags.iter().enumerate() {
                    let tagged_with_feature = patch_has_feature(sample, *tag, *feature);
                    let active = w.dot(&sample.patches.row(p)) + b > 0.0;
                    if tagged_with_feature != active {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    correct += 1;
                }
            }
        }
    }
    if total == 0 {
        return f64::NAN;
    }
    correct as f64 / total as f64
}

fn patch_has_feature(sample: &Sample, tag: PatchTag, feature: FeatureId) -> bool {
    match (tag, feature) {
        (PatchTag::Common, FeatureId::CommonPlus) => sample.coarse_label == Sign::Plus,
        (PatchTag::Common, FeatureId::CommonMinus) => sample.coarse_label == Sign::Minus,
        (PatchTag::Subclass, FeatureId::SubPlus(c)) => {
            sample.coarse_label == Sign::Plus && sample.fine_label.c == c
        }
        (PatchTag::Subclass, FeatureId::SubMinus(c)) => {
            sample.coarse_label == Sign::Minus && sample.fine_label.c == c
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_f_y: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub normal: EvalStats,
    pub hard: EvalStats,
    /// None when the normal-set mean response is zero.
    pub hard_vs_normal_ratio: Option<f64>,
    pub n_eval_per_subclass: usize,
}

/// Evaluates fresh normal and hard sets; fine-variant responses are first
/// aggregated to the two coarse heads. Prediction is a deterministic argmax
/// (ties resolve to the '+' head).
pub fn hard_example_audit(
    net: &Network,
    dict: &Dictionary,
    params: &HyperParams,
    n_eval: usize,
    seed: u64,
) -> Result<AuditRecord> {
    let normal = make_eval_set(dict, params, SampleKind::Normal, n_eval, seed)?;
    let hard = make_eval_set(
        dict,
        params,
        SampleKind::Hard,
        n_eval,
        rng::derive_seed(seed, rng::tag::AUDIT, 1, 0),
    )?;
    let eval = |set: &[Sample]| -> Result<EvalStats> {
        let mut f_y = 0.0;
        let mut acc = 0.0;
        for s in set {
            let resp = forward(net, s, false)?;
            let coarse = match net.variant {
                Variant::Coarse => resp,
                Variant::Fine => aggregate_fine_to_coarse(&resp, params.k_plus, params.k_minus)?,
            };
            let y = s.coarse_label.index();
            f_y += coarse.per_class[y];
            if argmax(&coarse.per_class) == y {
                acc += 1.0;
            }
        }
        let n = set.len().max(1) as f64;
        Ok(EvalStats {
            mean_f_y: f_y / n,
            accuracy: acc / n,
        })
    };
    let normal_stats = eval(&normal)?;
    let hard_stats = eval(&hard)?;
    let ratio = (normal_stats.mean_f_y.abs() > 0.0)
        .then(|| hard_stats.mean_f_y / normal_stats.mean_f_y);
    Ok(AuditRecord {
        normal: normal_stats,
        hard: hard_stats,
        hard_vs_normal_ratio: ratio,
        n_eval_per_subclass: n_eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaKind {
    NormTail,
    InnerProduct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaOutcome {
    pub kind: LemmaKind,
    pub d: usize,
    pub trials: usize,
    pub frequency: f64,
    pub bound: f64,
    pub respects_bound: bool,
}

/// Monte-Carlo verification of the Gaussian concentration bounds:
/// norm tail   P[ ||g||^2 >= 5 sigma^2 d ] <= e^{-d},
/// inner prod  P[ |<g1,g2>| > 10 sigma1 sigma2 sqrt(d ln(1/delta)) ] <= delta
/// at delta = 0.01.
pub fn lemma_monte_carlo(
    kind: LemmaKind,
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<LemmaOutcome> {
    if trials < 100_000 {
        return Err(SimError::contract("lemma Monte-Carlo needs at least 1e5 trials"));
    }
    let mut rng = rng::stream(seed, rng::tag::LEMMA, kind as u64, d as u64);
    let (violations, bound) = match kind {
        LemmaKind::NormTail => {
            let sigma = 1.0f64; // scale-invariant event
            let threshold = 5.0 * sigma * sigma * d as f64;
            let mut hits = 0usize;
            for _ in 0..trials {
                let mut norm2 = 0.0;
                for _ in 0..d {
                    let g: f64 = rng.sample(StandardNormal);
                    norm2 += (sigma * g) * (sigma * g);
                }
                if norm2 >= threshold {
                    hits += 1;
                }
            }
            (hits, (-(d as f64)).exp())
        }
        LemmaKind::InnerProduct => {
            let delta = 0.01f64;
            let (s1, s2) = (1.0f64, 1.0f64);
            let threshold = 10.0 * s1 * s2 * ((d as f64) * (1.0 / delta).ln()).sqrt();
            let mut hits = 0usize;
            let mut g1 = Array1::<f64>::zeros(d);
            let mut g2 = Array1::<f64>::zeros(d);
            for _ in 0..trials {
                for v in g1.iter_mut() {
                    *v = s1 * rng.sample::<f64, _>(StandardNormal);
                }
                for v in g2.iter_mut() {
                    *v = s2 * rng.sample::<f64, _>(StandardNormal);
                }
                if g1.dot(&g2).abs() > threshold {
                    hits += 1;
                }
            }
            (hits, delta)
        }
    };
    let frequency = violations as f64 / trials as f64;
    Ok(LemmaOutcome {
        kind,
        d,
        trials,
        frequency,
        bound,
        respects_bound: frequency <= bound,
    })
}

/// Zero-variance variant of the inner-product lemma: with sigma1 = 0 every
/// inner product is exactly zero.
pub fn inner_product_zero_sigma(d: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = rng::stream(seed, rng::tag::LEMMA, 99, d as u64);
    let mut violations = 0usize;
    for _ in 0..trials {
        let mut dot = 0.0;
        for _ in 0..d {
            let g1 = 0.0f64;
            let g2: f64 = rng.sample(StandardNormal);
            dot += g1 * g2;
        }
        if dot.abs() > 0.0 {
            violations += 1;
        }
    }
    violations as f64 / trials as f64
}

/// Max pairwise weight distance within any S*-set holding at least two
/// members; None when every set is a singleton or empty.
pub fn star_set_max_pairwise_distance(net: &Network, sets: &NeuronSets) -> Option<f64> {
    let mut max_dist: Option<f64> = None;
    for members in &sets.star {
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                let a = net.heads[members[i].head].weights.row(members[i].r);
                let b = net.heads[members[j].head].weights.row(members[j].r);
                let d2: f64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let d = d2.sqrt();
                max_dist = Some(max_dist.map_or(d, |m: f64| m.max(d)));
            }
        }
    }
    max_dist
}

/// Fraction of (neuron outside S0(v), v-tagged patch) pairs on which the
/// neuron activates; the step-0 sets should keep absorbing the active set,
/// so this should stay near zero through the first phase.
pub fn set_nesting_violation_rate(net: &Network, batch: &Batch, sets: &NeuronSets) -> f64 {
    let mut violations = 0usize;
    let mut total = 0usize;
    for (fi, feature) in sets.features.iter().enumerate() {
        let member = |head: usize, r: usize| {
            sets.s[fi].iter().any(|n| n.head == head && n.r == r)
        };
        for sample in &batch.samples {
            for (p, tag) in sample.patch_tags.iter().enumerate() {
                if !patch_has_feature(sample, *tag, *feature) {
                    continue;
                }
                let patch = sample.patches.row(p);
                for (h, headg) in net.heads.iter().enumerate() {
                    for r in 0..headg.m() {
                        if member(h, r) {
                            continue;
                        }
                        total += 1;
                        if headg.weights.row(r).dot(&patch) + headg.biases[r] > 0.0 {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    violations as f64 / total as f64
}

/// Init-geometry Monte-Carlo: builds `n_seeds` fresh coarse networks (with
/// `m_override` neurons per head when given), classifies them, and pools the
/// balance statistics of the designated-feature star sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometrySweep {
    pub n_seeds: usize,
    pub m: usize,
    /// smallest |S*(v)| seen over all seeds, heads and designated features
    pub min_star_size: usize,
    /// per-seed mean pairwise ratio deviation, averaged over seeds
    pub mean_pairwise_ratio_dev: f64,
    /// per-seed max pairwise ratio deviation, averaged over seeds
    pub mean_max_ratio_dev: f64,
    pub seeds_with_empty_set: usize,
}

pub fn geometry_sweep(
    params: &HyperParams,
    dict: &Dictionary,
    m_override: Option<usize>,
    n_seeds: usize,
    base_seed: u64,
) -> Result<GeometrySweep> {
    use rayon::prelude::*;
    let mut p = params.clone();
    if let Some(m) = m_override {
        p.m = m;
    }
    let reports: Vec<GeometryReport> = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(base_seed, rng::tag::INIT, 7, i as u64);
            let net = crate::model::init_network(&p, Variant::Coarse, seed)?;
            let sets = crate::sets::classify_init_neurons(&net, dict, &p)?;
            Ok(init_geometry_report(&sets))
        })
        .collect::<Result<Vec<_>>>()?;
    let min_star = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.star_size))
        .min()
        .unwrap_or(0);
    let mean_pairwise = reports.iter().map(|r| r.mean_star_ratio_dev).sum::<f64>()
        / n_seeds.max(1) as f64;
    let mean_max =
        reports.iter().map(|r| r.max_star_ratio_dev).sum::<f64>() / n_seeds.max(1) as f64;
    let empties = reports.iter().filter(|r| r.geometry_failure).count();
    Ok(GeometrySweep {
        n_seeds,
        m: p.m,
        min_star_size: min_star,
        mean_pairwise_ratio_dev: mean_pairwise,
        mean_max_ratio_dev: mean_max,
        seeds_with_empty_set: empties,
    })
}

/// Everything the phase analysis of one run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub t0_detected: Option<u64>,
    pub t11_detected: Option<u64>,
    pub fit_c: Option<f64>,
    pub fit_t0: Option<f64>,
    pub fit_r2: Option<f64>,
    pub singleton_rate_phase1: Option<f64>,
    pub hard_vs_normal_ratio: Option<f64>,
}

impl PhaseReport {
    pub fn validate(&self) -> Result<()> {
        if let (Some(t0), Some(t11)) = (self.t0_detected, self.t11_detected) {
            if t0 > t11 {
                return Err(SimError::contract(format!(
                    "T0 ({t0}) exceeds T11 ({t11})"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::HistoryRecord;
    use ndarray::Array1;
    use rand::Rng;

    fn rec(step: u64, f_max: f64, ratio: f64) -> HistoryRecord {
        HistoryRecord {
            step,
            loss: 0.7,
            f_normal_plus: 0.0,
            f_normal_minus: 0.0,
            f_hard_plus: 0.0,
            f_hard_minus: 0.0,
            a_common: 0.0,
            a_sub: vec![],
            psi1_max: 0.0,
            tracer_bias: None,
            f_normal_max: f_max,
            t11_ratio_max: ratio,
            logit_max: 0.0,
        }
    }

    #[test]
    fn t0_detection_crosses_at_the_right_step() {
        let params = {
            let mut p = HyperParams::desk();
            p.d = 100; // threshold 0.01
            p
        };
        let mut h = TrainHistory::default();
        for step in 0..80u64 {
            let f = 0.00025 * step as f64; // crosses 0.01 at step 40
            h.push(rec(step, f, 0.5)).unwrap();
        }
        let (t0, t11) = detect_phase_boundaries(&h, &params, 0.1, Variant::Coarse);
        assert_eq!(t0, Boundary::Reached(40));
        assert_eq!(t11, Boundary::NotReached);
    }

    #[test]
    fn never_crossing_series_reports_not_reached() {
        let params = HyperParams::desk();
        let mut h = TrainHistory::default();
        for step in 0..10u64 {
            h.push(rec(step, 1e-6, 0.5)).unwrap();
        }
        let (t0, t11) = detect_phase_boundaries(&h, &params, 0.1, Variant::Coarse);
        assert_eq!(t0, Boundary::NotReached);
        assert_eq!(t11, Boundary::NotReached);
    }

    // With F_- = 0 the saturation ratio is 1/(exp(-F_+) + 1); inverting at
    // 1 - eps gives F_+ = ln((1-eps)/eps). The detector must fire at the
    // first logged step whose F_+ meets that closed-form level.
    #[test]
    fn t11_matches_closed_form_inversion() {
        let params = HyperParams::desk();
        let eps = 0.1f64;
        let f_crit = ((1.0 - eps) / eps).ln();
        let mut h = TrainHistory::default();
        let mut expected = None;
        for step in 0..200u64 {
            let f_plus = 0.02 * step as f64;
            let ratio = 1.0 / ((-f_plus).exp() + 1.0);
            if expected.is_none() && f_plus >= f_crit {
                expected = Some(step);
            }
            h.push(rec(step, f_plus, ratio)).unwrap();
        }
        let (_, t11) = detect_phase_boundaries(&h, &params, eps, Variant::Coarse);
        assert_eq!(t11, Boundary::Reached(expected.unwrap()));
    }

    #[test]
    fn exact_log_series_is_recovered() {
        let series: Vec<(f64, f64)> = (0..=100)
            .map(|t| (t as f64, (2.0 * t as f64 + 10.0).ln()))
            .collect();
        let fit = fit_log_growth(&series, (0.0, 100.0)).unwrap();
        assert!((fit.c - 2.0).abs() <= 1e-3, "C = {}", fit.c);
        assert!((fit.t0 - 10.0).abs() <= 1e-2, "t0 = {}", fit.t0);
        assert!(fit.r2 >= 1.0 - 1e-9, "R2 = {}", fit.r2);
    }

    #[test]
    fn noisy_log_series_still_fits_well() {
        let mut rng = crate::rng::stream(3, 1, 4, 1);
        let series: Vec<(f64, f64)> = (0..=400)
            .map(|t| {
                let noise = (rng.gen::<f64>() - 0.5) * 0.02;
                (t as f64, (0.5 * t as f64 + 25.0).ln() + noise)
            })
            .collect();
        let fit = fit_log_growth(&series, (0.0, 400.0)).unwrap();
        assert!(fit.r2 >= 0.999, "R2 = {}", fit.r2);
    }

    // A linear series over two decades of t is not log growth; the detector
    // must reject it through a poor R^2.
    #[test]
    fn linear_series_is_rejected_by_r2() {
        let series: Vec<(f64, f64)> = (1..=1000).map(|t| (t as f64, t as f64)).collect();
        let fit = fit_log_growth(&series, (1.0, 1000.0)).unwrap();
        assert!(fit.r2 < 0.9, "R2 = {}", fit.r2);
    }

    #[test]
    fn degenerate_series_is_fit_failure() {
        let series: Vec<(f64, f64)> = (0..50).map(|t| (t as f64, 1.0)).collect();
        assert!(fit_log_growth(&series, (0.0, 49.0)).is_err());
        let series: Vec<(f64, f64)> = (0..5).map(|t| (t as f64, t as f64)).collect();
        assert!(fit_log_growth(&series, (0.0, 4.0)).is_err());
    }

    #[test]
    fn geometry_report_ratios() {
        use crate::sets::{NeuronRef, NeuronSets};
        let mk = |sizes: &[usize]| -> NeuronSets {
            let features: Vec<FeatureId> =
                (0..sizes.len()).map(FeatureId::SubPlus).collect();
            let star: Vec<Vec<NeuronRef>> = sizes
                .iter()
                .map(|&n| (0..n).map(|r| NeuronRef { head: 0, r }).collect())
                .collect();
            NeuronSets {
                theta_hi: 1.0,
                theta_lo: 0.9,
                features,
                s: star.clone(),
                star,
                u: vec![],
                n_heads: 1,
                m_per_head: 64,
            }
        };
        let report = init_geometry_report(&mk(&[10, 10, 10]));
        assert_eq!(report.max_star_ratio_dev, 0.0);
        assert!(!report.geometry_failure);

        let report = init_geometry_report(&mk(&[10, 11]));
        assert!((report.max_star_ratio_dev - 0.1).abs() < 1e-12);

        let report = init_geometry_report(&mk(&[10, 0]));
        assert!(report.geometry_failure);
    }

    fn audit_params() -> HyperParams {
        let mut p = HyperParams::desk();
        p.d = 32;
        p.p = 16;
        p.s_star = 4;
        p.k_plus = 4;
        p.k_minus = 4;
        p.batch_size = 16;
        p.m = 16;
        p.m_sub = 4;
        p
    }

    // one random net can lean whole-class-wards, so chance level only shows
    // up averaged over init seeds
    #[test]
    fn untrained_network_audits_near_chance() {
        let params = audit_params();
        let dict = crate::dict::build_dictionary(&params, crate::dict::DictMode::StandardBasis, 0)
            .unwrap();
        let mut normal = 0.0;
        let mut hard = 0.0;
        let n_nets = 16;
        for seed in 0..n_nets {
            let net = crate::model::init_network(&params, Variant::Coarse, seed).unwrap();
            let audit = hard_example_audit(&net, &dict, &params, 8, seed).unwrap();
            normal += audit.normal.accuracy;
            hard += audit.hard.accuracy;
        }
        normal /= n_nets as f64;
        hard /= n_nets as f64;
        assert!((normal - 0.5).abs() <= 0.1, "mean normal acc {normal}");
        assert!((hard - 0.5).abs() <= 0.1, "mean hard acc {hard}");
    }

    // one neuron per designated feature (w = v, b = -0.5) classifies both
    // normal and hard noiseless samples perfectly: every class response
    // counts its own feature patches, halved by the bias
    #[test]
    fn per_feature_network_audits_perfectly() {
        let mut params = audit_params();
        params.sigma_zeta = 0.0;
        params.gamma = 0.0;
        let dict = crate::dict::build_dictionary(&params, crate::dict::DictMode::StandardBasis, 0)
            .unwrap();
        let build_head = |features: Vec<usize>| {
            let mut w = ndarray::Array2::<f64>::zeros((features.len(), params.d));
            for (r, f) in features.iter().enumerate() {
                w[[r, *f]] = 1.0;
            }
            crate::model::NeuronGroup {
                weights: w,
                biases: Array1::from_elem(features.len(), -0.5),
            }
        };
        let plus: Vec<usize> = std::iter::once(dict.index_common_plus)
            .chain(dict.indices_sub_plus.iter().copied())
            .collect();
        let minus: Vec<usize> = std::iter::once(dict.index_common_minus)
            .chain(dict.indices_sub_minus.iter().copied())
            .collect();
        let net = crate::model::Network {
            variant: Variant::Coarse,
            heads: vec![build_head(plus), build_head(minus)],
            head_labels: vec![
                crate::model::HeadLabel::Coarse(Sign::Plus),
                crate::model::HeadLabel::Coarse(Sign::Minus),
            ],
            params_snapshot: params.clone(),
            init_seed: 0,
        };
        let audit = hard_example_audit(&net, &dict, &params, 8, 4).unwrap();
        assert_eq!(audit.normal.accuracy, 1.0);
        assert_eq!(audit.hard.accuracy, 1.0);
    }

    #[test]
    fn singleton_rate_synthetic_cases() {
        use crate::sets::{NeuronRef, NeuronSets};
        let mut params = audit_params();
        params.sigma_zeta = 0.0;
        params.gamma = 0.0;
        params.iota = 0.0;
        let dict = crate::dict::build_dictionary(&params, crate::dict::DictMode::StandardBasis, 0)
            .unwrap();
        let batch = crate::data::make_batch(&dict, &params, 0, 77).unwrap();
        let sets_of = |star: Vec<(FeatureId, NeuronRef)>| NeuronSets {
            theta_hi: 0.9,
            theta_lo: 0.8,
            features: star.iter().map(|(f, _)| *f).collect(),
            star: star.iter().map(|(_, n)| vec![*n]).collect(),
            s: star.iter().map(|(_, n)| vec![*n]).collect(),
            u: vec![],
            n_heads: 2,
            m_per_head: 1,
        };

        // exactly aligned neuron with bias strictly inside (-1, 0): fires on
        // its feature patches only
        let mut w = ndarray::Array2::<f64>::zeros((1, params.d));
        w[[0, dict.index_common_plus]] = 1.0;
        let head = crate::model::NeuronGroup {
            weights: w,
            biases: Array1::from_elem(1, -0.5),
        };
        let net = crate::model::Network {
            variant: Variant::Coarse,
            heads: vec![head.clone(), head],
            head_labels: vec![
                crate::model::HeadLabel::Coarse(Sign::Plus),
                crate::model::HeadLabel::Coarse(Sign::Minus),
            ],
            params_snapshot: params.clone(),
            init_seed: 0,
        };
        let sets = sets_of(vec![(FeatureId::CommonPlus, NeuronRef { head: 0, r: 0 })]);
        let rate = singleton_activation_rate(&net, &batch, &sets);
        assert_eq!(rate, 1.0);

        // a neuron spread over both common features fires on both classes'
        // patches and cannot be singleton on mixed batches
        let mut w = ndarray::Array2::<f64>::zeros((1, params.d));
        w[[0, dict.index_common_plus]] = 1.0;
        w[[0, dict.index_common_minus]] = 1.0;
        let head = crate::model::NeuronGroup {
            weights: w,
            biases: Array1::from_elem(1, -0.5),
        };
        let net2 = crate::model::Network {
            heads: vec![head.clone(), head],
            ..net
        };
        let rate = singleton_activation_rate(&net2, &batch, &sets);
        assert!(rate < 1.0, "rate {rate}");
    }

    #[test]
    fn lemma_norm_tail_small_d() {
        // d = 1: P[g^2 >= 5] = 2 Phi(-sqrt(5)) ~ 0.02535, under e^{-1}
        let out = lemma_monte_carlo(LemmaKind::NormTail, 1, 200_000, 5).unwrap();
        assert!(out.respects_bound);
        assert!((out.frequency - 0.02535).abs() < 0.002, "freq {}", out.frequency);
    }

    #[test]
    fn inner_product_zero_sigma_never_violates() {
        assert_eq!(inner_product_zero_sigma(16, 150_000, 1), 0.0);
    }
}
