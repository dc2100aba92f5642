//! Real-coded genetic algorithm for global search over a box.
//!
//! Tournament selection, blend (BLX-α) crossover, Gaussian mutation and
//! elitism. Fitness evaluations within a generation run in parallel but
//! the result depends only on the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nelder_mead::{nelder_mead, NelderMeadOptions};
use crate::numeric::{open_unit, std_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneticOptions {
    pub population: usize,
    pub tournament: usize,
    pub blend_alpha: f64,
    /// Mutation standard deviation as a fraction of each box width.
    pub mutation_scale: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
    pub generations: usize,
    /// Finish with a Nelder–Mead polish of the best individual.
    pub polish: bool,
}

impl Default for GeneticOptions {
    fn default() -> Self {
        Self {
            population: 50,
            tournament: 3,
            blend_alpha: 0.5,
            mutation_scale: 0.1,
            mutation_rate: 0.2,
            elitism: 2,
            generations: 200,
            polish: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneticResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_evals: usize,
    /// Best objective after each generation (index 0 is the initial population).
    pub history: Vec<f64>,
}

/// Minimizes `f` over the box `[lower, upper]`. NaN counts as `+∞`.
pub fn genetic_search<F>(
    f: F,
    lower: &[f64],
    upper: &[f64],
    opts: &GeneticOptions,
    rng: &mut ChaCha8Rng,
) -> GeneticResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = lower.len();
    assert_eq!(dim, upper.len(), "box bounds differ in length");
    let pop_size = opts.population.max(2);
    let width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let score = |x: &Vec<f64>| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pop: Vec<Vec<f64>> = (0..pop_size)
        .map(|_| (0..dim).map(|i| lower[i] + width[i] * open_unit(rng)).collect())
        .collect();
    let mut fit: Vec<f64> = pop.par_iter().map(score).collect();
    let mut n_evals = pop_size;
    let mut history = Vec::with_capacity(opts.generations + 1);

    let ranked = |fit: &[f64]| {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.sort_by(|&i, &j| fit[i].total_cmp(&fit[j]).then(i.cmp(&j)));
        order
    };

    let mut order = ranked(&fit);
    history.push(fit[order[0]]);
    for _ in 0..opts.generations {
        let mut next: Vec<Vec<f64>> = order
            .iter()
            .take(opts.elitism.min(pop_size))
            .map(|&i| pop[i].clone())
            .collect();
        let n_elite = next.len();
        while next.len() < pop_size {
            let p1 = &pop[tournament(&fit, opts.tournament, rng)];
            let p2 = &pop[tournament(&fit, opts.tournament, rng)];
            let (mut c1, mut c2) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
            for i in 0..dim {
                let (lo, hi) = (p1[i].min(p2[i]), p1[i].max(p2[i]));
                let span = hi - lo;
                let (a, b) = (lo - opts.blend_alpha * span, hi + opts.blend_alpha * span);
                c1.push(a + (b - a) * open_unit(rng));
                c2.push(a + (b - a) * open_unit(rng));
            }
            for child in [c1, c2] {
                if next.len() == pop_size {
                    break;
                }
                let mut child = child;
                for i in 0..dim {
                    if rng.random::<f64>() < opts.mutation_rate {
                        child[i] += opts.mutation_scale * width[i] * std_normal(rng);
                    }
                    child[i] = child[i].clamp(lower[i], upper[i]);
                }
                next.push(child);
            }
        }
        let fresh: Vec<f64> = next[n_elite..].par_iter().map(score).collect();
        n_evals += fresh.len();
        fit = order.iter().take(n_elite).map(|&i| fit[i]).chain(fresh).collect();
        pop = next;
        order = ranked(&fit);
        history.push(fit[order[0]]);
    }

    let mut x = pop[order[0]].clone();
    let mut fx = fit[order[0]];
    if opts.polish && fx.is_finite() {
        let nm = nelder_mead(|z| score(&z.to_vec()), &x, lower, upper, &NelderMeadOptions::default());
        n_evals += nm.n_evals;
        if nm.f < fx {
            x = nm.x;
            fx = nm.f;
        }
    }
    GeneticResult {
        x,
        f: fx,
        n_evals,
        history,
    }
}

fn tournament(fit: &[f64], size: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut best = rng.random_range(0..fit.len());
    for _ in 1..size.max(1) {
        let c = rng.random_range(0..fit.len());
        if fit[c] < fit[best] || (fit[c] == fit[best] && c < best) {
            best = c;
        }
    }
    best
}
