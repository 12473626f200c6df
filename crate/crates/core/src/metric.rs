//! Empirical assessment of a candidate sampling scheme.
//!
//! At a given parameter snapshot, `M` items are drawn uniformly without
//! replacement. On that subset the gradient-norm scheme `p~gn`, the
//! restricted candidate `p~` and the uniform scheme `u~ = 1/M` are built,
//! and the candidate's distance to `p~gn` is compared with the uniform
//! scheme's. Both KL and total variation are reported for every draw.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::model::Model;
use crate::prob::{gradient_norm_scheme, kl_divergence, restrict_and_renormalize, total_variation, Scheme};

pub const DEFAULT_SUBSET: usize = 32;
pub const DEFAULT_BINS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Tv,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 2] = [DivergenceKind::Kl, DivergenceKind::Tv];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Tv => "tv",
        }
    }

    pub fn eval(self, p: &Scheme, q: &Scheme) -> Result<f64> {
        match self {
            DivergenceKind::Kl => kl_divergence(p, q),
            DivergenceKind::Tv => total_variation(p, q),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DivergenceKind::Kl),
            "tv" => Ok(DivergenceKind::Tv),
            _ => Err(Error::InvalidArgument(format!("unknown divergence {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeQualityRecord {
    pub step: u64,
    pub divergence: DivergenceKind,
    /// `D(p~, p~gn)`
    pub d_p: f64,
    /// `D(u~, p~gn)`
    pub d_u: f64,
    pub m: usize,
    /// Every subset gradient norm was zero, so `p~gn` fell back to uniform.
    pub flagged: bool,
}

/// `m` distinct indices drawn uniformly from `0..n`.
pub fn select_subset<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("subset size {m} must be at least 2")));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("subset size {m} exceeds {n} items")));
    }
    Ok(index::sample(rng, n, m).into_vec())
}

/// One record per divergence from a candidate's per-item values and the
/// gradient norms of the selected items.
pub fn evaluate_subset(
    candidate: &Scheme,
    subset: &[usize],
    subset_norms: &[f64],
    step: u64,
) -> Result<[SchemeQualityRecord; 2]> {
    check_len(subset.len(), subset_norms.len())?;
    let m = subset.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("subset size {m} must be at least 2")));
    }
    let values = subset
        .iter()
        .map(|&i| {
            candidate
                .probs()
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside 0..{}", candidate.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = restrict_and_renormalize(&values)?;
    let pgn = gradient_norm_scheme(subset_norms)?;
    let u = Scheme::uniform(m)?;
    let flagged = subset_norms.iter().all(|&g| g == 0.0);
    let record = |divergence: DivergenceKind| -> Result<SchemeQualityRecord> {
        Ok(SchemeQualityRecord {
            step,
            divergence,
            d_p: divergence.eval(&p, &pgn)?,
            d_u: divergence.eval(&u, &pgn)?,
            m,
            flagged,
        })
    };
    Ok([record(DivergenceKind::Kl)?, record(DivergenceKind::Tv)?])
}

/// Draws a subset, computes its gradient norms at the model's current
/// parameters and evaluates `candidate` on it.
pub fn evaluate_step<R: Rng + ?Sized>(
    model: &Model,
    data: &Dataset,
    candidate: &Scheme,
    m: usize,
    step: u64,
    rng: &mut R,
) -> Result<[SchemeQualityRecord; 2]> {
    check_len(data.len(), candidate.len())?;
    let subset = select_subset(data.len(), m, rng)?;
    let norms = model.norms_for(data, &subset)?;
    evaluate_subset(candidate, &subset, &norms, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument("histogram of no values".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::NonFinite("histogram input".into()));
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

impl Stats {
    fn new(values: &[f64], bins: usize) -> Result<Self> {
        let (mean, std) = mean_std(values);
        Ok(Stats {
            mean,
            std,
            histogram: Histogram::new(values, bins)?,
        })
    }
}

/// Mean and population standard deviation. `(NaN, NaN)` on empty input.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub divergence: DivergenceKind,
    pub records: usize,
    pub flagged: usize,
    pub d_p: Stats,
    pub d_u: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub divergences: Vec<DivergenceSummary>,
}

impl QualitySummary {
    pub fn get(&self, kind: DivergenceKind) -> Option<&DivergenceSummary> {
        self.divergences.iter().find(|d| d.divergence == kind)
    }
}

/// Means, standard deviations and histograms of `d_p` and `d_u` for each
/// divergence present in `records`.
pub fn aggregate(records: &[SchemeQualityRecord], bins: usize) -> Result<QualitySummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no quality records to aggregate".into()));
    }
    let mut divergences = Vec::new();
    for kind in DivergenceKind::ALL {
        let sel: Vec<&SchemeQualityRecord> = records.iter().filter(|r| r.divergence == kind).collect();
        if sel.is_empty() {
            continue;
        }
        let d_p: Vec<f64> = sel.iter().map(|r| r.d_p).collect();
        let d_u: Vec<f64> = sel.iter().map(|r| r.d_u).collect();
        divergences.push(DivergenceSummary {
            divergence: kind,
            records: sel.len(),
            flagged: sel.iter().filter(|r| r.flagged).count(),
            d_p: Stats::new(&d_p, bins)?,
            d_u: Stats::new(&d_u, bins)?,
        });
    }
    Ok(QualitySummary { divergences })
}

pub const CSV_HEADER: &str = "step,divergence,d_p,d_u,m,flagged";

impl SchemeQualityRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.divergence, self.d_p, self.d_u, self.m, self.flagged
        )
    }
}

pub fn write_csv<W: Write>(mut w: W, records: &[SchemeQualityRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::Architecture;
    use crate::prob::convex_mix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn subset_is_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut s = select_subset(40, 32, &mut rng).unwrap();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 32);
            assert!(s.iter().all(|&i| i < 40));
        }
        assert!(select_subset(10, 11, &mut rng).is_err());
        assert!(select_subset(10, 1, &mut rng).is_err());
        let a = select_subset(100, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_subset(100, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pgn_candidate_has_zero_distance() {
        let norms = [0.5, 2.0, 1.0, 3.0, 0.1, 0.7];
        let pgn = gradient_norm_scheme(&norms).unwrap();
        let subset = [4, 1, 3];
        let sub: Vec<f64> = subset.iter().map(|&i| norms[i]).collect();
        for r in evaluate_subset(&pgn, &subset, &sub, 0).unwrap() {
            assert!(r.d_p < 1e-15, "{r:?}");
            assert!(r.d_u > 0.0);
        }
    }

    #[test]
    fn uniform_candidate_matches_uniform_distance() {
        let norms = [0.5, 2.0, 1.0, 3.0];
        let u = Scheme::uniform(4).unwrap();
        for r in evaluate_subset(&u, &[0, 1, 2, 3], &norms, 3).unwrap() {
            assert_eq!(r.d_p, r.d_u);
            assert_eq!((r.step, r.m, r.flagged), (3, 4, false));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Scheme::uniform(100).unwrap();
        for _ in 0..200 {
            let subset = select_subset(100, 32, &mut rng).unwrap();
            let sub: Vec<f64> = subset.iter().map(|_| rng.random_range(0.0..5.0)).collect();
            for r in evaluate_subset(&u, &subset, &sub, 0).unwrap() {
                assert_eq!(r.d_p, r.d_u);
            }
        }
    }

    #[test]
    fn midpoint_on_frozen_instance() {
        let norms = [4.0, 3.0, 2.0, 1.0];
        let pgn = gradient_norm_scheme(&norms).unwrap();
        let mid = convex_mix(&pgn, &Scheme::uniform(4).unwrap(), 0.5).unwrap();
        let [kl, tv] = evaluate_subset(&mid, &[0, 1, 2, 3], &norms, 0).unwrap();
        // mid = (.325, .275, .225, .175), pgn = (.4, .3, .2, .1)
        assert!((tv.d_p - 0.1).abs() < 1e-12);
        assert!((tv.d_u - 0.2).abs() < 1e-12);
        assert!(0.0 < kl.d_p && kl.d_p < kl.d_u);
    }

    #[test]
    fn zero_norms_are_flagged() {
        let u = Scheme::uniform(3).unwrap();
        for r in evaluate_subset(&u, &[0, 2], &[0.0, 0.0], 1).unwrap() {
            assert!(r.flagged);
            assert_eq!(r.d_u, 0.0);
        }
    }

    #[test]
    fn larger_subsets_reduce_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let norms: Vec<f64> = (0..100).map(|_| rng.random_range(0.0f64..3.0).exp()).collect();
        let u = Scheme::uniform(100).unwrap();
        let var_at = |m: usize, rng: &mut ChaCha8Rng| {
            let d: Vec<f64> = (0..200)
                .map(|_| {
                    let s = select_subset(100, m, rng).unwrap();
                    let sub: Vec<f64> = s.iter().map(|&i| norms[i]).collect();
                    evaluate_subset(&u, &s, &sub, 0).unwrap()[1].d_u
                })
                .collect();
            mean_std(&d).1.powi(2)
        };
        let v10 = var_at(10, &mut rng);
        let v50 = var_at(50, &mut rng);
        assert!(v50 <= 1.1 * v10, "{v50} vs {v10}");
    }

    #[test]
    fn evaluate_step_uses_current_parameters() {
        let data = synthetic_blobs(20, 3, 2.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(Architecture::Mlp(vec![3, 4, 2]), &mut rng).unwrap();
        let (_, norms) = model.loss_and_norms(&data).unwrap();
        let pgn = gradient_norm_scheme(&norms).unwrap();
        let recs = evaluate_step(&model, &data, &pgn, 8, 0, &mut rng).unwrap();
        assert!(recs.iter().all(|r| r.d_p < 1e-12 && r.m == 8));
        assert!(evaluate_step(&model, &data, &pgn, 21, 0, &mut rng).is_err());
        let short = Scheme::uniform(19).unwrap();
        assert!(evaluate_step(&model, &data, &short, 8, 0, &mut rng).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let rec = |d_p: f64, kind| SchemeQualityRecord {
            step: 0,
            divergence: kind,
            d_p,
            d_u: 0.5,
            m: 4,
            flagged: false,
        };
        assert!(aggregate(&[], DEFAULT_BINS).is_err());

        let one = aggregate(&[rec(0.3, DivergenceKind::Tv)], DEFAULT_BINS).unwrap();
        let tv = one.get(DivergenceKind::Tv).unwrap();
        assert_eq!((tv.d_p.mean, tv.d_p.std), (0.3, 0.0));
        assert!(one.get(DivergenceKind::Kl).is_none());

        let two = aggregate(
            &[rec(0.1, DivergenceKind::Tv), rec(0.3, DivergenceKind::Tv), rec(9.0, DivergenceKind::Kl)],
            DEFAULT_BINS,
        )
        .unwrap();
        let tv = two.get(DivergenceKind::Tv).unwrap();
        assert!((tv.d_p.mean - 0.2).abs() < 1e-15);
        assert!((tv.d_p.std - 0.1).abs() < 1e-15);
        assert_eq!(tv.d_u.std, 0.0);
        assert_eq!(tv.d_p.histogram.total(), 2);
        assert_eq!(tv.d_p.histogram.counts.len(), DEFAULT_BINS);
        assert_eq!(two.get(DivergenceKind::Kl).unwrap().records, 1);
    }

    #[test]
    fn histogram_counts_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for bins in [1, 7, 30] {
            let v: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
            let h = Histogram::new(&v, bins).unwrap();
            assert_eq!(h.total(), 500);
            assert_eq!(h.edges.len(), bins + 1);
            assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(Histogram::new(&[], 3).is_err());
        assert!(Histogram::new(&[1.0], 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = SchemeQualityRecord {
            step: 7,
            divergence: DivergenceKind::Kl,
            d_p: 0.25,
            d_u: 0.5,
            m: 32,
            flagged: false,
        };
        let mut out = Vec::new();
        write_csv(&mut out, &[r]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,divergence,d_p,d_u,m,flagged\n7,kl,0.25,0.5,32,false\n");
        assert_eq!("tv".parse::<DivergenceKind>().unwrap(), DivergenceKind::Tv);
        assert!("js".parse::<DivergenceKind>().is_err());
    }
}
