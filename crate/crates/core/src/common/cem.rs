use rand_distr::{Distribution, StandardNormal};

use super::RandomSource;

/// Diagonal Gaussian sampling distribution refit to elite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSearch {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Lower bound on every standard deviation after a refit.
    pub std_floor: f64,
}

impl GaussianSearch {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, std_floor: f64) -> Self {
        debug_assert_eq!(mean.len(), std.len());
        Self { mean, std, std_floor }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RandomSource) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }

    /// Refits to `elites` with population statistics.
    pub fn refit(&mut self, elites: &[&[f64]]) {
        if elites.is_empty() {
            return;
        }
        let n = elites.len() as f64;
        for i in 0..self.dim() {
            let m = elites.iter().map(|e| e[i]).sum::<f64>() / n;
            let var = elites.iter().map(|e| (e[i] - m).powi(2)).sum::<f64>() / n;
            self.mean[i] = m;
            self.std[i] = var.sqrt().max(self.std_floor);
        }
    }
}

/// Elite count for a population, at least one.
pub fn elite_count(population: usize, fraction: f64) -> usize {
    ((population as f64 * fraction).round() as usize).clamp(1, population.max(1))
}

/// Indices of the `k` smallest scores, stable on ties.
pub fn best_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b)));
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refit_uses_population_moments() {
        let mut g = GaussianSearch::new(vec![0.0, 0.0], vec![1.0, 1.0], 0.1);
        let a = [1.0, 2.0];
        let b = [3.0, 2.0];
        g.refit(&[&a, &b]);
        assert_eq!(g.mean, vec![2.0, 2.0]);
        assert_eq!(g.std, vec![1.0, 0.1]);
    }

    #[test]
    fn ranking_is_stable() {
        assert_eq!(best_indices(&[3.0, 1.0, 1.0, 0.5], 3), vec![3, 1, 2]);
        assert_eq!(elite_count(64, 0.125), 8);
        assert_eq!(elite_count(5, 0.01), 1);
    }
}
