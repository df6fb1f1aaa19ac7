use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Language → sampling probability, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingTable {
    entries: IndexMap<String, f64>,
    dist: WeightedIndex<f64>,
}

impl SamplingTable {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let mut map = IndexMap::new();
        for (lang, p) in entries {
            let lang = lang.into();
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Config(format!("probability for {lang} must be >= 0, got {p}")));
            }
            if map.insert(lang.clone(), p).is_some() {
                return Err(Error::Config(format!("language {lang} listed twice")));
            }
        }
        let total: f64 = map.values().sum();
        if map.is_empty() || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("sampling probabilities sum to {total}, expected 1")));
        }
        let dist = WeightedIndex::new(map.values().copied())
            .map_err(|e| Error::Config(format!("sampling table: {e}")))?;
        Ok(Self { entries: map, dist })
    }

    /// Single-language table.
    pub fn only(lang: &str) -> Self {
        Self::new([(lang, 1.0)]).expect("valid degenerate table")
    }

    /// The 13-language pretraining mixture of the reference multilingual model.
    pub fn reference_mixture() -> Self {
        Self::new([
            ("Indonesian", 0.0554),
            ("Basque", 0.0184),
            ("Vietnamese", 0.0684),
            ("Chinese", 0.1339),
            ("Urdu", 0.0267),
            ("Spanish", 0.1118),
            ("Catalan", 0.0395),
            ("Portuguese", 0.0867),
            ("French", 0.1110),
            ("English", 0.2107),
            ("Hindi", 0.0398),
            ("Arabic", 0.0638),
            ("Bengali", 0.0339),
        ])
        .expect("mixture sums to one")
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn probability(&self, lang: &str) -> Option<f64> {
        self.entries.get(lang).copied()
    }

    pub fn entries(&self) -> &IndexMap<String, f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of a drawn language.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        self.entries.get_index(self.sample_index(rng)).unwrap().0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixture_sums_to_one() {
        let t = SamplingTable::reference_mixture();
        // in units of 1e-4 the sum is an exact integer
        let units: i64 = t.entries().values().map(|p| (p * 10_000.0).round() as i64).sum();
        assert_eq!(units, 10_000);
        assert_eq!(t.len(), 13);
    }

    #[test]
    fn frequencies_pass_chi_square() {
        let t = SamplingTable::reference_mixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = vec![0usize; t.len()];
        for _ in 0..n {
            counts[t.sample_index(&mut rng)] += 1;
        }
        let chi2: f64 = t
            .entries()
            .values()
            .zip(&counts)
            .map(|(&p, &c)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // upper 0.001 quantile of χ² with 12 degrees of freedom
        assert!(chi2 < 32.909, "chi2 = {chi2}");
    }

    #[test]
    fn degenerate_and_invalid_tables() {
        let t = SamplingTable::only("x");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| t.sample(&mut rng) == "x"));
        assert!(SamplingTable::new([("a", 0.5), ("b", 0.4)]).is_err());
        assert!(SamplingTable::new([("a", 1.5), ("b", -0.5)]).is_err());
        assert!(SamplingTable::new(Vec::<(String, f64)>::new()).is_err());
    }
}
