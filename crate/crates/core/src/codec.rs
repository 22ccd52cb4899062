//! Two-points age representation.
//!
//! An age `y` is written as the convex combination of the two grid bins
//! that bracket it, `y = λ₁·z¹ + λ₂·z²` with `z¹ = ⌊y/K⌋·K`, `z² = ⌈y/K⌉·K`,
//! `λ₁ = 1 − (y − z¹)/K` and `λ₂ = 1 − (z² − y)/K`. Ages on a bin get all
//! of their mass on that bin.

use crate::error::{Error, Result};

/// Uniform set of age anchors spaced `k` years apart.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    k: f64,
    bins: Vec<f64>,
}

impl BinGrid {
    /// The 12-bin grid {0, 10, …, 110} whose width matches the `Feat` layer.
    pub fn default_training() -> Self {
        make_bins(0.0, 110.0, 10.0).expect("static grid is valid")
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn first(&self) -> f64 {
        self.bins[0]
    }

    pub fn last(&self) -> f64 {
        self.bins[self.bins.len() - 1]
    }

    pub fn contains(&self, age: f64) -> bool {
        age >= self.first() && age <= self.last()
    }

    fn index_of(&self, z: f64) -> usize {
        ((z - self.first()) / self.k).round() as usize
    }
}

/// Grid `{⌊min/K⌋·K, …, ⌈max/K⌉·K}`.
pub fn make_bins(age_min: f64, age_max: f64, k: f64) -> Result<BinGrid> {
    if !(age_min.is_finite() && age_max.is_finite() && k.is_finite()) {
        return Err(Error::invalid("bin grid bounds must be finite"));
    }
    if age_min >= age_max {
        return Err(Error::invalid(format!(
            "bin grid needs age_min < age_max, got [{age_min}, {age_max}]"
        )));
    }
    if k <= 0.0 {
        return Err(Error::invalid(format!("bin interval must be positive, got {k}")));
    }
    let lo = (age_min / k).floor();
    let hi = (age_max / k).ceil();
    let n = (hi - lo).round() as usize + 1;
    let bins = (0..n).map(|i| (lo + i as f64) * k).collect();
    Ok(BinGrid { k, bins })
}

/// Sparse distribution over a [`BinGrid`] for one age.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointLabel {
    pub weights: Vec<f64>,
    pub source_age: f64,
}

impl TwoPointLabel {
    /// Indices holding nonzero mass (one or two, adjacent).
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn encode(age: f64, grid: &BinGrid) -> Result<TwoPointLabel> {
    if !age.is_finite() || !grid.contains(age) {
        return Err(Error::invalid(format!(
            "age {age} outside grid range [{}, {}]",
            grid.first(),
            grid.last()
        )));
    }
    let k = grid.k;
    let lower = (age / k).floor() * k;
    let upper = (age / k).ceil() * k;
    let mut weights = vec![0.0; grid.n_bins()];
    if lower == upper {
        weights[grid.index_of(lower)] = 1.0;
    } else {
        weights[grid.index_of(lower)] = 1.0 - (age - lower) / k;
        weights[grid.index_of(upper)] = 1.0 - (upper - age) / k;
    }
    Ok(TwoPointLabel {
        weights,
        source_age: age,
    })
}

/// Expected age under `weights`: the inner product with the bin values.
pub fn decode(weights: &[f64], grid: &BinGrid) -> Result<f64> {
    if weights.len() != grid.n_bins() {
        return Err(Error::shape(format!(
            "decode: {} weights for a {}-bin grid",
            weights.len(),
            grid.n_bins()
        )));
    }
    Ok(weights.iter().zip(&grid.bins).map(|(w, z)| w * z).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = make_bins(16.0, 77.0, 10.0).unwrap();
        assert_eq!(g.bins(), &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]);
        let g = make_bins(0.0, 110.0, 10.0).unwrap();
        assert_eq!(g.n_bins(), 12);
        assert_eq!(g.bins()[11], 110.0);
        let g = make_bins(0.0, 10.0, 10.0).unwrap();
        assert_eq!(g.bins(), &[0.0, 10.0]);
    }

    #[test]
    fn grid_rejects_bad_intervals() {
        assert!(make_bins(10.0, 10.0, 10.0).is_err());
        assert!(make_bins(20.0, 10.0, 10.0).is_err());
        assert!(make_bins(0.0, 10.0, 0.0).is_err());
        assert!(make_bins(0.0, 10.0, -1.0).is_err());
    }

    #[test]
    fn encode_sixty_eight() {
        let g = make_bins(10.0, 80.0, 10.0).unwrap();
        let label = encode(68.0, &g).unwrap();
        let expected = [0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.8, 0.0];
        for (a, e) in label.weights.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{:?}", label.weights);
        }
        assert_eq!(label.support(), vec![5, 6]);
    }

    #[test]
    fn encode_on_grid_is_one_hot() {
        let g = make_bins(10.0, 80.0, 10.0).unwrap();
        let label = encode(70.0, &g).unwrap();
        assert_eq!(label.weights, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_with_wider_interval() {
        let g = make_bins(0.0, 80.0, 20.0).unwrap();
        assert_eq!(g.bins(), &[0.0, 20.0, 40.0, 60.0, 80.0]);
        let label = encode(74.0, &g).unwrap();
        assert!((label.weights[3] - 0.3).abs() < 1e-12);
        assert!((label.weights[4] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let g = make_bins(10.0, 80.0, 10.0).unwrap();
        assert!(encode(9.99, &g).is_err());
        assert!(encode(80.01, &g).is_err());
        assert!(encode(f64::NAN, &g).is_err());
    }

    #[test]
    fn decode_examples() {
        let g = make_bins(10.0, 80.0, 10.0).unwrap();
        let label = encode(68.0, &g).unwrap();
        assert!((decode(&label.weights, &g).unwrap() - 68.0).abs() < 1e-9);
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert_eq!(decode(&one_hot, &g).unwrap(), 40.0);
        let uniform = vec![1.0 / 8.0; 8];
        assert!((decode(&uniform, &g).unwrap() - 45.0).abs() < 1e-12);
        assert!(decode(&[1.0], &g).is_err());
    }

    #[test]
    fn round_trip_at_centiyear_resolution() {
        let g = BinGrid::default_training();
        for i in 0..=11_000 {
            let y = i as f64 * 0.01;
            let label = encode(y, &g).unwrap();
            assert!((decode(&label.weights, &g).unwrap() - y).abs() < 1e-9, "{y}");
        }
    }

    proptest! {
        #[test]
        fn encode_is_sparse_convex_and_invertible(y in 0.0f64..=110.0, k in prop::sample::select(vec![5.0, 10.0, 20.0])) {
            let g = make_bins(0.0, 110.0, k).unwrap();
            let label = encode(y, &g).unwrap();
            let support = label.support();
            prop_assert!(!support.is_empty() && support.len() <= 2);
            if support.len() == 2 {
                prop_assert_eq!(support[1], support[0] + 1);
            }
            prop_assert!(label.weights.iter().all(|&w| w >= 0.0));
            let mass: f64 = label.weights.iter().sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
            prop_assert!((decode(&label.weights, &g).unwrap() - y).abs() < 1e-9);
        }

        #[test]
        fn shifting_mass_upwards_never_lowers_the_age(
            raw in prop::collection::vec(0.0f64..1.0, 12),
            from in 0usize..11,
            frac in 0.0f64..=1.0,
        ) {
            let g = BinGrid::default_training();
            let sum: f64 = raw.iter().sum::<f64>() + 1e-9;
            let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let before = decode(&w, &g).unwrap();
            let mut shifted = w.clone();
            let moved = shifted[from] * frac;
            shifted[from] -= moved;
            shifted[from + 1] += moved;
            prop_assert!(decode(&shifted, &g).unwrap() >= before - 1e-12);
        }
    }
}
