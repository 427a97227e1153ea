//! Error-coverage curves against a brute-force recount.

use blrnet_core::metrics::{default_grid, error_coverage};
use blrnet_core::RngStream;

use super::Outcome;

/// For coverage `j / steps`: the `ceil(j N / steps)` highest scores (ties
/// broken by position) and the fraction of them that are wrong, found by
/// repeated selection of the best remaining sample.
pub fn recount(scores: &[f64], correct: &[bool], steps: usize) -> Vec<(f64, f64)> {
    let n = scores.len();
    (1..=steps)
        .rev()
        .map(|j| {
            let keep = (j * n).div_ceil(steps).max(1);
            let mut taken = vec![false; n];
            let mut wrong = 0;
            for _ in 0..keep {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                        best = Some(i);
                    }
                }
                let b = best.unwrap();
                taken[b] = true;
                wrong += usize::from(!correct[b]);
            }
            (j as f64 / steps as f64, wrong as f64 / keep as f64)
        })
        .collect()
}

/// `instances` random score sets, the first 15 of 1000 samples, some with
/// coarse scores so that ties occur.
pub fn random_instances(instances: usize, seed: u64) -> Outcome {
    let mut rng = RngStream::new(seed);
    let mut points = 0;
    for instance in 0..instances {
        let n = if instance < 15 { 1000 } else { 1 + rng.below(999) };
        let levels = [0, 5, 50][instance % 3];
        let scores: Vec<f64> = (0..n)
            .map(|_| match levels {
                0 => rng.normal(),
                l => rng.below(l) as f64 / l as f64,
            })
            .collect();
        let correct: Vec<bool> = scores.iter().map(|&s| rng.bernoulli(0.5 + 0.4 * s.clamp(-1.0, 1.0).abs())).collect();
        let steps = [100, 7, 1000][instance % 3];
        let curve = error_coverage(&scores, &correct, &default_grid(steps)).map_err(|e| e.to_string())?;
        let oracle = recount(&scores, &correct, steps);
        if curve.points.len() != oracle.len() {
            return Err(format!("instance {instance}: {} points vs {}", curve.points.len(), oracle.len()));
        }
        for (got, want) in curve.points.iter().zip(&oracle) {
            if got != want {
                return Err(format!("instance {instance}: {got:?} vs {want:?}"));
            }
        }
        points += oracle.len();
    }
    Ok(format!("{instances} instances, {points} points exact"))
}
