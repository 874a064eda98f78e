//! Consensus of K label maps: multi-label STAPLE and majority vote.
//!
//! STAPLE models each rater j by a confusion matrix `θ_j[s][s']`, the
//! probability that rater j says `s'` where the truth is `s`, and holds a
//! class prior `π` fixed. One iteration is
//!
//! * E-step: `W_i(s) ∝ π(s) · Π_j θ_j[s][d_ij]`, normalized over `s`
//! * M-step: `θ_j[s][s'] = Σ_{i: d_ij = s'} W_i(s) / Σ_i W_i(s)`
//!
//! repeated until the largest change in any `θ` entry drops below the
//! tolerance, after which a final E-step yields the posteriors and the
//! consensus `argmax_s W_i(s)` (ties to the lowest label).
//!
//! The posterior of a voxel depends only on the tuple of labels the raters
//! gave it, so voxels are grouped by tuple ("vote pattern") and the EM runs
//! over patterns weighted by their voxel counts. Patterns are kept in order
//! of first occurrence and every reduction runs in that fixed order, so the
//! result does not depend on thread count. Log-products are summed in
//! fixed point, which makes them independent of rater order.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// Label frequencies of the majority-vote consensus.
    #[default]
    VoteFrequency,
    /// Uniform over the labels any rater used.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub max_iterations: usize,
    /// Stop once max |Δθ| falls below this.
    pub tolerance: f64,
    /// Initial diagonal of every θ_j; off-diagonal mass is spread uniformly.
    pub init_diagonal: f64,
    pub prior: PriorSource,
    /// Size of the label space. Defaults to one past the largest label seen.
    pub num_labels: Option<usize>,
    /// Keep per-voxel posteriors in the result.
    pub keep_posteriors: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            max_iterations: 100,
            tolerance: 1e-7,
            init_diagonal: 0.9,
            prior: PriorSource::VoteFrequency,
            num_labels: None,
            keep_posteriors: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_diagonal > 0.5 && self.init_diagonal < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "init_diagonal {} must lie in (0.5, 1)",
                self.init_diagonal
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tolerance {} must be positive",
                self.tolerance
            )));
        }
        if self.num_labels == Some(0) {
            return Err(Error::InvalidConfig("num_labels must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic L×L matrix, row = true label, column = rater label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_labels: usize,
    data: Vec<f64>,
}

impl ConfusionMatrix {
    fn initial(num_labels: usize, diagonal: f64) -> Self {
        let off = if num_labels > 1 {
            (1.0 - diagonal) / (num_labels - 1) as f64
        } else {
            0.0
        };
        let mut data = vec![off; num_labels * num_labels];
        for s in 0..num_labels {
            data[s * num_labels + s] = if num_labels > 1 { diagonal } else { 1.0 };
        }
        ConfusionMatrix { num_labels, data }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    #[inline]
    pub fn get(&self, truth: usize, observed: usize) -> f64 {
        self.data[truth * self.num_labels + observed]
    }

    pub fn row(&self, truth: usize) -> &[f64] {
        &self.data[truth * self.num_labels..(truth + 1) * self.num_labels]
    }
}

/// Per-rater confusion matrices and the class prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterModel {
    pub confusion: Vec<ConfusionMatrix>,
    pub prior: Vec<f64>,
}

/// Posteriors stored once per vote pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    num_labels: usize,
    pattern_of: Vec<u32>,
    weights: Vec<f64>,
}

impl Posteriors {
    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// W_i for voxel `i`, length L, summing to 1.
    pub fn voxel(&self, i: usize) -> &[f64] {
        let p = self.pattern_of[i] as usize;
        &self.weights[p * self.num_labels..(p + 1) * self.num_labels]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// Observed-data log-likelihood under the θ entering this iteration.
    pub log_likelihood: f64,
    pub max_delta: f64,
    /// Largest |Σ_s W_i(s) − 1| seen in this iteration's E-step.
    pub max_normalization_error: f64,
}

#[derive(Clone, Debug)]
pub struct FusionResult {
    pub consensus: LabelGrid,
    pub posteriors: Option<Posteriors>,
    pub model: RaterModel,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationStats>,
    /// Number of distinct vote patterns the EM ran over.
    pub num_patterns: usize,
}

fn check_raters(raters: &[LabelGrid]) -> Result<()> {
    let first = raters.first().ok_or(Error::NoRaters)?;
    for r in &raters[1..] {
        first.geometry().ensure_same_lattice(r.geometry())?;
    }
    Ok(())
}

/// Most frequent label among `votes`, ties to the lowest label.
fn mode(votes: &mut [u16]) -> u16 {
    votes.sort_unstable();
    let (mut best, mut best_n) = (votes[0], 0usize);
    let mut i = 0;
    while i < votes.len() {
        let mut j = i;
        while j < votes.len() && votes[j] == votes[i] {
            j += 1;
        }
        if j - i > best_n {
            best = votes[i];
            best_n = j - i;
        }
        i = j;
    }
    best
}

/// Per-voxel modal label, ties broken toward the lowest label.
pub fn majority_vote(raters: &[LabelGrid]) -> Result<LabelGrid> {
    check_raters(raters)?;
    let n = raters[0].len();
    let mut out = vec![0u16; n];
    const CHUNK: usize = 1 << 14;
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut votes = vec![0u16; raters.len()];
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = c * CHUNK + k;
            for (v, r) in votes.iter_mut().zip(raters) {
                *v = r.data()[i];
            }
            *o = mode(&mut votes);
        }
    });
    raters[0].with_data(out)
}

/// Distinct label tuples in first-occurrence order.
struct Patterns {
    num_raters: usize,
    /// pattern p, rater j -> labels[p * K + j]
    labels: Vec<u16>,
    counts: Vec<f64>,
    pattern_of: Vec<u32>,
}

impl Patterns {
    fn len(&self) -> usize {
        self.counts.len()
    }

    fn tuple(&self, p: usize) -> &[u16] {
        &self.labels[p * self.num_raters..(p + 1) * self.num_raters]
    }

    fn build(raters: &[LabelGrid], num_labels: usize) -> Self {
        let k = raters.len();
        let bits = (usize::BITS - (num_labels.max(2) - 1).leading_zeros()) as usize;
        if k * bits <= 128 {
            Self::build_with(raters, |i| {
                raters
                    .iter()
                    .fold(0u128, |acc, r| (acc << bits) | u128::from(r.data()[i]))
            })
        } else {
            Self::build_with(raters, |i| raters.iter().map(|r| r.data()[i]).collect::<Vec<u16>>())
        }
    }

    fn build_with<K: std::hash::Hash + Eq>(raters: &[LabelGrid], key: impl Fn(usize) -> K) -> Self {
        let k = raters.len();
        let n = raters[0].len();
        let mut index: HashMap<K, u32> = HashMap::new();
        let mut labels = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut pattern_of = Vec::with_capacity(n);
        for i in 0..n {
            let next = counts.len() as u32;
            let p = *index.entry(key(i)).or_insert(next);
            if p == next {
                labels.extend(raters.iter().map(|r| r.data()[i]));
                counts.push(0.0);
            }
            counts[p as usize] += 1.0;
            pattern_of.push(p);
        }
        Patterns {
            num_raters: k,
            labels,
            counts,
            pattern_of,
        }
    }
}

// Fixed-point log domain: exact integer sums are associative, so the
// product over raters is independent of rater order.
const FIX_SCALE: f64 = (1u64 << 40) as f64;
const FIX_NEG_INF: i64 = -(1i64 << 61);
const FIX_INF_THRESHOLD: i64 = -(1i64 << 60);

fn to_fixed(p: f64) -> i64 {
    if p > 0.0 {
        (p.ln() * FIX_SCALE).round() as i64
    } else {
        FIX_NEG_INF
    }
}

struct EStep {
    weights: Vec<f64>,
    log_likelihood: f64,
    max_normalization_error: f64,
}

/// Posteriors for every pattern over the `active` labels (the rest are 0).
fn e_step(
    patterns: &Patterns,
    theta: &[ConfusionMatrix],
    log_prior: &[i64],
    active: &[usize],
    num_labels: usize,
) -> EStep {
    let log_theta: Vec<Vec<i64>> = theta
        .iter()
        .map(|m| m.data.iter().map(|&v| to_fixed(v)).collect())
        .collect();
    let mut weights = vec![0.0; patterns.len() * num_labels];
    let per_pattern: Vec<(f64, f64)> = weights
        .par_chunks_mut(num_labels)
        .enumerate()
        .map(|(p, w)| {
            let tuple = patterns.tuple(p);
            let mut best = i64::MIN;
            let mut sums = Vec::with_capacity(active.len());
            for &s in active {
                let mut acc = log_prior[s];
                for (lt, &d) in log_theta.iter().zip(tuple) {
                    acc = acc.saturating_add(lt[s * num_labels + usize::from(d)]);
                }
                best = best.max(acc);
                sums.push(acc);
            }
            let mut total = 0.0;
            for (&s, &acc) in active.iter().zip(&sums) {
                let v = if acc <= FIX_INF_THRESHOLD {
                    0.0
                } else {
                    ((acc - best) as f64 / FIX_SCALE).exp()
                };
                w[s] = v;
                total += v;
            }
            let mut check = 0.0;
            for &s in active {
                w[s] /= total;
                check += w[s];
            }
            let log_evidence = best as f64 / FIX_SCALE + total.ln();
            (log_evidence * patterns.counts[p], (check - 1.0).abs())
        })
        .collect();
    let log_likelihood = per_pattern.iter().map(|x| x.0).sum();
    let max_normalization_error = per_pattern.iter().map(|x| x.1).fold(0.0, f64::max);
    EStep {
        weights,
        log_likelihood,
        max_normalization_error,
    }
}

fn m_step(
    patterns: &Patterns,
    weights: &[f64],
    previous: &[ConfusionMatrix],
    active: &[usize],
    num_labels: usize,
) -> Vec<ConfusionMatrix> {
    (0..patterns.num_raters)
        .into_par_iter()
        .map(|j| {
            let mut acc = vec![0.0; num_labels * num_labels];
            for p in 0..patterns.len() {
                let observed = usize::from(patterns.labels[p * patterns.num_raters + j]);
                let w = &weights[p * num_labels..(p + 1) * num_labels];
                let c = patterns.counts[p];
                for &s in active {
                    acc[s * num_labels + observed] += c * w[s];
                }
            }
            let prev = &previous[j];
            for s in 0..num_labels {
                let row = &mut acc[s * num_labels..(s + 1) * num_labels];
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|v| *v /= total);
                } else {
                    row.copy_from_slice(prev.row(s));
                }
            }
            ConfusionMatrix {
                num_labels,
                data: acc,
            }
        })
        .collect()
}

/// Multi-label STAPLE over raters already in a dense label space.
pub fn staple_fuse(raters: &[LabelGrid], config: &FusionConfig) -> Result<FusionResult> {
    config.validate()?;
    check_raters(raters)?;
    let max_seen = raters.iter().map(|r| usize::from(r.max_label())).max().unwrap();
    let num_labels = match config.num_labels {
        Some(l) if max_seen >= l => {
            return Err(Error::LabelOutOfRange {
                label: max_seen as u16,
                num_labels: l,
            })
        }
        Some(l) => l,
        None => max_seen + 1,
    };

    let patterns = Patterns::build(raters, num_labels);
    let n = raters[0].len() as f64;

    let mut used = vec![false; num_labels];
    for &l in &patterns.labels {
        used[usize::from(l)] = true;
    }
    let prior: Vec<f64> = match config.prior {
        PriorSource::VoteFrequency => {
            let mut freq = vec![0.0; num_labels];
            let mut votes = vec![0u16; patterns.num_raters];
            for p in 0..patterns.len() {
                votes.copy_from_slice(patterns.tuple(p));
                freq[usize::from(mode(&mut votes))] += patterns.counts[p];
            }
            freq.iter().map(|f| f / n).collect()
        }
        PriorSource::Uniform => {
            let m = used.iter().filter(|&&u| u).count() as f64;
            used.iter().map(|&u| if u { 1.0 / m } else { 0.0 }).collect()
        }
    };
    let active: Vec<usize> = (0..num_labels).filter(|&s| prior[s] > 0.0).collect();
    let log_prior: Vec<i64> = prior.iter().map(|&p| to_fixed(p)).collect();

    let mut theta =
        vec![ConfusionMatrix::initial(num_labels, config.init_diagonal); raters.len()];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let e = e_step(&patterns, &theta, &log_prior, &active, num_labels);
        let next = m_step(&patterns, &e.weights, &theta, &active, num_labels);
        let max_delta = theta
            .iter()
            .zip(&next)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        theta = next;
        history.push(IterationStats {
            log_likelihood: e.log_likelihood,
            max_delta,
            max_normalization_error: e.max_normalization_error,
        });
        if max_delta < config.tolerance {
            converged = true;
            break;
        }
    }
    let final_e = e_step(&patterns, &theta, &log_prior, &active, num_labels);

    let winners: Vec<u16> = final_e
        .weights
        .chunks(num_labels)
        .map(|w| {
            let mut best = active[0];
            for &s in &active[1..] {
                if w[s] > w[best] {
                    best = s;
                }
            }
            best as u16
        })
        .collect();
    let consensus = raters[0].with_data(
        patterns
            .pattern_of
            .iter()
            .map(|&p| winners[p as usize])
            .collect(),
    )?;

    let num_patterns = patterns.len();
    let posteriors = config.keep_posteriors.then(|| Posteriors {
        num_labels,
        pattern_of: patterns.pattern_of,
        weights: final_e.weights,
    });
    Ok(FusionResult {
        consensus,
        posteriors,
        model: RaterModel {
            confusion: theta,
            prior,
        },
        iterations: history.len(),
        converged,
        history,
        num_patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn grid(v: &[u16]) -> LabelGrid {
        LabelGrid::new(Geometry::new([v.len(), 1, 1], [1.0; 3]).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn vote_examples() {
        let a = grid(&[1, 2, 3]);
        assert_eq!(majority_vote(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let five: Vec<_> = [2u16, 2, 3, 3, 1].iter().map(|&l| grid(&[l])).collect();
        assert_eq!(majority_vote(&five).unwrap().data(), &[2]);
        let b = grid(&[4, 0, 9]);
        assert_eq!(majority_vote(&[a, b]).unwrap().data(), &[1, 0, 3]);
    }

    #[test]
    fn errors() {
        assert!(matches!(majority_vote(&[]), Err(Error::NoRaters)));
        assert!(matches!(
            staple_fuse(&[], &FusionConfig::default()),
            Err(Error::NoRaters)
        ));
        let a = grid(&[0, 1]);
        let b = grid(&[0, 1, 2]);
        assert!(staple_fuse(&[a.clone(), b], &FusionConfig::default()).is_err());
        let cfg = FusionConfig {
            num_labels: Some(1),
            ..Default::default()
        };
        assert!(matches!(
            staple_fuse(&[a.clone()], &cfg),
            Err(Error::LabelOutOfRange { label: 1, .. })
        ));
        let bad = FusionConfig {
            init_diagonal: 0.4,
            ..Default::default()
        };
        assert!(staple_fuse(&[a], &bad).is_err());
    }

    #[test]
    fn single_rater_is_fixed_point() {
        let a = grid(&[0, 3, 3, 1, 0, 2, 2, 2]);
        let r = staple_fuse(&[a.clone()], &FusionConfig::default()).unwrap();
        assert_eq!(r.consensus, a);
    }

    #[test]
    fn identical_raters_are_fixed_point() {
        let a = grid(&[0, 3, 3, 1, 0, 2, 2, 2, 5, 5]);
        let r = staple_fuse(&vec![a.clone(); 5], &FusionConfig::default()).unwrap();
        assert_eq!(r.consensus, a);
        assert!(r.converged);
    }

    #[test]
    fn single_label_space() {
        let a = grid(&[0, 0, 0]);
        let r = staple_fuse(&[a.clone(), a.clone()], &FusionConfig::default()).unwrap();
        assert_eq!(r.consensus, a);
    }

    #[test]
    fn posteriors_normalized_and_consistent() {
        let a = grid(&[0, 1, 1, 2, 2, 0, 1]);
        let b = grid(&[0, 1, 2, 2, 1, 0, 1]);
        let c = grid(&[1, 1, 1, 2, 2, 0, 0]);
        let cfg = FusionConfig {
            keep_posteriors: true,
            ..Default::default()
        };
        let r = staple_fuse(&[a, b, c], &cfg).unwrap();
        let post = r.posteriors.as_ref().unwrap();
        for i in 0..7 {
            let w = post.voxel(i);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let arg = (0..w.len()).fold(0, |b, s| if w[s] > w[b] { s } else { b });
            assert_eq!(r.consensus.data()[i] as usize, arg);
        }
        for m in &r.model.confusion {
            for s in 0..m.num_labels() {
                assert!((m.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!((r.model.prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
