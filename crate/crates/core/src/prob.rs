//! Sampling schemes over training indices.
//!
//! A [`Scheme`] is a strictly positive probability vector over the `N`
//! training items. Constructors enforce the invariant; zero weights are
//! floored at [`PROB_FLOOR`] before the final renormalization so that
//! importance weights `1/(N p_i)` and KL divergences stay finite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Smallest probability a constructor will emit.
pub const PROB_FLOOR: f64 = 1e-12;

/// Absolute tolerance on `sum(p) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Per-coordinate slack used by [`BoxSpec::contains`].
pub const BOX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Scheme(Vec<f64>);

impl Scheme {
    /// Wraps an already-normalized probability vector, checking the invariants.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidScheme("empty probability vector".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::InvalidScheme(format!(
                "entry {i} = {p} is not strictly positive"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidScheme(format!("entries sum to {sum}")));
        }
        Ok(Scheme(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("uniform scheme over zero items".into()));
        }
        Ok(Scheme(vec![1.0 / n as f64; n]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for Scheme {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Scheme {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Scheme::from_probs(v)
    }
}

impl From<Scheme> for Vec<f64> {
    fn from(s: Scheme) -> Vec<f64> {
        s.0
    }
}

/// Normalizes nonnegative weights into a [`Scheme`].
///
/// Entries are divided by their sum, floored at [`PROB_FLOOR`] and
/// renormalized.
pub fn normalize(weights: &[f64]) -> Result<Scheme> {
    if weights.is_empty() {
        return Err(Error::InvalidScheme("no weights".into()));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::InvalidScheme(format!("weight {i} is not finite ({w})")));
        }
        if w < 0.0 {
            return Err(Error::InvalidScheme(format!("weight {i} is negative ({w})")));
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidScheme("all weights are zero".into()));
    }
    if !total.is_finite() {
        return Err(Error::InvalidScheme("weight sum overflows".into()));
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Scheme::uniform(weights.len());
    }
    let mut probs: Vec<f64> = weights
        .iter()
        .map(|w| (w / total).max(PROB_FLOOR))
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Scheme::from_probs(probs)
}

/// The scheme proportional to per-sample gradient norms.
///
/// Falls back to uniform when every norm is zero: the sampling objective is
/// then identically zero and any scheme is optimal.
pub fn gradient_norm_scheme(norms: &[f64]) -> Result<Scheme> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("no gradient norms".into()));
    }
    if norms.iter().all(|&g| g == 0.0) {
        return Scheme::uniform(norms.len());
    }
    normalize(norms)
}

/// Pointwise `t * a + (1 - t) * b`.
pub fn convex_mix(a: &Scheme, b: &Scheme, t: f64) -> Result<Scheme> {
    check_len(a.len(), b.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("mixing weight {t} outside [0, 1]")));
    }
    let probs = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| t * x + (1.0 - t) * y)
        .collect();
    Scheme::from_probs(probs)
}

/// Renormalizes the candidate's values on a subset of items.
pub fn restrict_and_renormalize(values: &[f64]) -> Result<Scheme> {
    normalize(values)
}

/// Per-coordinate interval `[min(u_i, pgn_i), max(u_i, pgn_i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSpec {
    pub fn new(u: &Scheme, pgn: &Scheme) -> Result<Self> {
        check_len(u.len(), pgn.len())?;
        let (lower, upper) = u.0.iter().zip(&pgn.0).map(|(a, b)| (a.min(*b), a.max(*b))).unzip();
        Ok(BoxSpec { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// First coordinate of `p` outside the box, if any.
    pub fn first_violation(&self, p: &Scheme) -> Result<Option<usize>> {
        check_len(self.lower.len(), p.len())?;
        Ok(p.0.iter().enumerate().position(|(i, &x)| {
            x < self.lower[i] - BOX_TOLERANCE || x > self.upper[i] + BOX_TOLERANCE
        }))
    }

    pub fn contains(&self, p: &Scheme) -> Result<bool> {
        Ok(self.first_violation(p)?.is_none())
    }
}

/// Whether every `p_i` lies between `u_i` and `pgn_i`.
pub fn in_theorem_box(p: &Scheme, pgn: &Scheme, u: &Scheme) -> Result<bool> {
    check_len(pgn.len(), p.len())?;
    BoxSpec::new(u, pgn)?.contains(p)
}

/// Draws `batch_size` i.i.d. indices from `p` (with replacement) by
/// inverse-CDF lookup.
pub fn sample_indices<R: Rng + ?Sized>(p: &Scheme, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let cdf: Vec<f64> = p
        .0
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().expect("scheme is never empty");
    let last = cdf.len() - 1;
    (0..batch_size)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

/// `sum p_i ln(p_i / q_i)`, natural log.
pub fn kl_divergence(p: &Scheme, q: &Scheme) -> Result<f64> {
    check_len(p.len(), q.len())?;
    let kl: f64 = p.0.iter().zip(&q.0).map(|(a, b)| a * (a / b).ln()).sum();
    // Rounding can leave a tiny negative value for p == q.
    Ok(kl.max(0.0))
}

/// `(1/2) sum |p_i - q_i|`.
pub fn total_variation(p: &Scheme, q: &Scheme) -> Result<f64> {
    check_len(p.len(), q.len())?;
    Ok(0.5 * p.0.iter().zip(&q.0).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[f64]) -> Scheme {
        Scheme::from_probs(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        assert_close(normalize(&[2.0; 4]).unwrap().probs(), &[0.25; 4], 1e-15);
        assert_close(normalize(&[3.0, 1.0]).unwrap().probs(), &[0.75, 0.25], 1e-15);

        let p = normalize(&[0.0, 0.0, 5.0]).unwrap();
        let expected_floor = PROB_FLOOR / (1.0 + 2.0 * PROB_FLOOR);
        assert!((p[0] - expected_floor).abs() < 1e-24);
        assert_eq!(p[0], p[1]);
        assert!((p[2] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn equal_weights_give_exact_uniform() {
        for (n, w) in [(32, 0.01), (7, 1.0 / 3.0), (100, 1e-300)] {
            let p = normalize(&vec![w; n]).unwrap();
            assert_eq!(p, Scheme::uniform(n).unwrap());
        }
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(normalize(&[0.0, 0.0]).is_err());
        assert!(normalize(&[1.0, -0.5]).is_err());
        assert!(normalize(&[1.0, f64::NAN]).is_err());
        assert!(normalize(&[1.0, f64::INFINITY]).is_err());
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(Scheme::uniform(4).unwrap().probs(), &[0.25; 4]);
        assert_eq!(Scheme::uniform(1).unwrap().probs(), &[1.0]);
        assert_eq!(Scheme::uniform(2).unwrap().probs(), &[0.5, 0.5]);
        assert!(Scheme::uniform(0).is_err());
    }

    #[test]
    fn gradient_norm_examples() {
        assert_close(gradient_norm_scheme(&[3.0, 1.0]).unwrap().probs(), &[0.75, 0.25], 1e-15);
        assert_close(
            gradient_norm_scheme(&[1.0, 2.0, 3.0, 4.0]).unwrap().probs(),
            &[0.1, 0.2, 0.3, 0.4],
            1e-15,
        );
        assert_close(gradient_norm_scheme(&[0.0; 3]).unwrap().probs(), &[1.0 / 3.0; 3], 1e-15);
        assert!(gradient_norm_scheme(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn convex_mix_examples() {
        let u = s(&[0.5, 0.5]);
        let pgn = s(&[0.75, 0.25]);
        assert_close(convex_mix(&u, &pgn, 0.5).unwrap().probs(), &[0.625, 0.375], 1e-15);
        assert_eq!(convex_mix(&u, &pgn, 0.0).unwrap(), pgn);
        assert_eq!(convex_mix(&u, &pgn, 1.0).unwrap(), u);
        assert!(convex_mix(&u, &pgn, 1.5).is_err());
        assert!(convex_mix(&u, &Scheme::uniform(3).unwrap(), 0.5).is_err());
    }

    #[test]
    fn box_examples() {
        let u = s(&[0.5, 0.5]);
        let pgn = s(&[0.75, 0.25]);
        let mid = convex_mix(&pgn, &u, 0.5).unwrap();
        assert!(in_theorem_box(&mid, &pgn, &u).unwrap());
        assert!(in_theorem_box(&u, &pgn, &u).unwrap());
        assert!(in_theorem_box(&pgn, &pgn, &u).unwrap());
        assert!(!in_theorem_box(&s(&[0.9, 0.1]), &pgn, &u).unwrap());
        assert!(in_theorem_box(&Scheme::uniform(3).unwrap(), &pgn, &u).is_err());
    }

    #[test]
    fn sampling_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_indices(&s(&[1.0]), 17, &mut rng);
        assert_eq!(idx, vec![0; 17]);
    }

    #[test]
    fn sampling_frequencies() {
        let draws = 1_000_000;
        for (p, target) in [(Scheme::uniform(2).unwrap(), 0.5), (s(&[0.75, 0.25]), 0.75)] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let idx = sample_indices(&p, draws, &mut rng);
            let freq = idx.iter().filter(|&&i| i == 0).count() as f64 / draws as f64;
            assert!((freq - target).abs() < 0.002, "freq {freq} vs {target}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = s(&[0.1, 0.2, 0.3, 0.4]);
        let a = sample_indices(&p, 50, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_indices(&p, 50, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequencies_union_bound() {
        let p = normalize(&[1.0, 5.0, 0.5, 2.0, 3.0, 0.1, 4.0]).unwrap();
        let draws = 1_000_000;
        let mut counts = vec![0usize; p.len()];
        for i in sample_indices(&p, draws, &mut ChaCha8Rng::seed_from_u64(11)) {
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            let bound = 3.0 * (p[i] * (1.0 - p[i]) / draws as f64).sqrt() + 1e-3;
            assert!((freq - p[i]).abs() < bound, "item {i}: {freq} vs {}", p[i]);
        }
    }

    #[test]
    fn kl_examples() {
        let p = s(&[0.75, 0.25]);
        let u = s(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_divergence(&p, &u).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.130812).abs() < 1e-6);
        assert!(kl_divergence(&p, &Scheme::uniform(3).unwrap()).is_err());
    }

    #[test]
    fn tv_examples() {
        let p = s(&[0.75, 0.25]);
        let u = s(&[0.5, 0.5]);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        assert!((total_variation(&p, &u).unwrap() - 0.25).abs() < 1e-15);
        assert!(total_variation(&p, &Scheme::uniform(3).unwrap()).is_err());
    }

    #[test]
    fn restrict_examples() {
        assert_close(restrict_and_renormalize(&[0.1, 0.1]).unwrap().probs(), &[0.5, 0.5], 1e-15);
        assert_close(
            restrict_and_renormalize(&[0.3, 0.1]).unwrap().probs(),
            &[0.75, 0.25],
            1e-15,
        );
        let u = Scheme::uniform(40).unwrap();
        let sub: Vec<f64> = [3, 7, 11, 20, 39].iter().map(|&i| u[i]).collect();
        assert_close(restrict_and_renormalize(&sub).unwrap().probs(), &[0.2; 5], 1e-15);
    }

    #[test]
    fn scheme_json_round_trip_validates() {
        let p = s(&[0.25, 0.75]);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, "[0.25,0.75]");
        assert_eq!(serde_json::from_str::<Scheme>(&text).unwrap(), p);
        assert!(serde_json::from_str::<Scheme>("[0.5,0.6]").is_err());
        assert!(serde_json::from_str::<Scheme>("[1.0,0.0]").is_err());
    }

    fn weights(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..10.0, 1..max_len)
    }

    fn scheme_pair() -> impl Strategy<Value = (Scheme, Scheme)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(1e-3f64..10.0, n),
                prop::collection::vec(1e-3f64..10.0, n),
            )
                .prop_map(|(a, b)| (normalize(&a).unwrap(), normalize(&b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn constructors_satisfy_invariants(w in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let p = if w.iter().all(|&x| x == 0.0) {
                gradient_norm_scheme(&w).unwrap()
            } else {
                normalize(&w).unwrap()
            };
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(p.probs().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn gradient_norm_scheme_is_scale_invariant(g in weights(20), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = g.iter().map(|x| c * x).collect();
            let a = gradient_norm_scheme(&g).unwrap();
            let b = gradient_norm_scheme(&scaled).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn mix_is_valid_and_in_box((pgn, _) in scheme_pair(), t in 0.0f64..=1.0) {
            let u = Scheme::uniform(pgn.len()).unwrap();
            let m = convex_mix(&pgn, &u, t).unwrap();
            prop_assert!(in_theorem_box(&m, &pgn, &u).unwrap());
        }

        #[test]
        fn kl_nonnegative_and_zero_on_diagonal((p, q) in scheme_pair()) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() < 1e-15);
        }

        #[test]
        fn tv_is_a_bounded_metric((p, q) in scheme_pair(), w in prop::collection::vec(1e-3f64..10.0, 12)) {
            let r = normalize(&w[..p.len()]).unwrap();
            let pq = total_variation(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(pq, total_variation(&q, &p).unwrap());
            let pr = total_variation(&p, &r).unwrap();
            let rq = total_variation(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-15);
        }
    }

    #[test]
    fn mix_box_membership_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(1..15);
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let pgn = gradient_norm_scheme(&w).unwrap();
            let u = Scheme::uniform(n).unwrap();
            let t = rng.random::<f64>();
            let m = convex_mix(&pgn, &u, t).unwrap();
            assert!(in_theorem_box(&m, &pgn, &u).unwrap());
        }
    }
}
