//! Gradient-boosted depth-limited regression trees with squared-error loss.

use serde::{Deserialize, Serialize};

use super::features::FeatureSpec;
use super::{FitDiagnostics, Predictor};
use crate::numeric::{NeumaierSum, Rows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 2,
            learning_rate: 0.1,
            min_leaf: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    fn eval(&self, z: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if z[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedTrees {
    pub features: FeatureSpec,
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Clamp predictions to `[0, 1]` (propensity use). Clamping keeps
    /// exact 0 and 1; nothing is trimmed away from the endpoints.
    pub clamp_unit: bool,
}

impl BoostedTrees {
    fn eval(&self, z: &[f64]) -> f64 {
        let mut acc = self.base;
        for t in &self.trees {
            acc += self.learning_rate * t.eval(z);
        }
        if self.clamp_unit {
            acc.clamp(0.0, 1.0)
        } else {
            acc
        }
    }
}

impl Predictor for BoostedTrees {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut z = Vec::new();
        self.features.build(row, &mut z);
        self.eval(&z)
    }

    fn predict_rows(&self, rows: &Rows) -> Vec<f64> {
        let mut z = Vec::new();
        rows.iter()
            .map(|r| {
                self.features.build(r, &mut z);
                self.eval(&z)
            })
            .collect()
    }
}

struct Grower<'a> {
    cols: &'a [Vec<f64>],
    order: &'a [Vec<usize>],
    params: BoostParams,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn best_split(&self, members: &[bool], resid: &[f64], count: usize, total: f64, ss: f64) -> Option<BestSplit> {
        let min_leaf = self.params.min_leaf.max(1);
        if count < 2 * min_leaf || ss <= 0.0 {
            return None;
        }
        let parent = total * total / count as f64;
        let mut best: Option<BestSplit> = None;
        let mut vals: Vec<(f64, f64)> = Vec::with_capacity(count);
        for (j, ord) in self.order.iter().enumerate() {
            vals.clear();
            vals.extend(
                ord.iter()
                    .filter(|&&i| members[i])
                    .map(|&i| (self.cols[j][i], resid[i])),
            );
            let mut left_sum = 0.0;
            for k in 0..count - 1 {
                left_sum += vals[k].1;
                let n_left = k + 1;
                let n_right = count - n_left;
                if n_left < min_leaf {
                    continue;
                }
                if n_right < min_leaf {
                    break;
                }
                if !(vals[k].0 < vals[k + 1].0) {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - parent;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: j,
                        threshold: 0.5 * (vals[k].0 + vals[k + 1].0),
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > 1e-12 * ss)
    }

    /// Grows one tree on `resid`, writing each sample's leaf value to `leaf_out`.
    fn grow(&self, resid: &[f64], leaf_out: &mut [f64]) -> RegressionTree {
        let n = resid.len();
        let mut nodes = Vec::new();
        // (node index, depth, member mask)
        let mut stack = vec![(0usize, 0usize, vec![true; n])];
        nodes.push(Node::Leaf(0.0));
        while let Some((at, depth, members)) = stack.pop() {
            let (mut count, mut total, mut ss) = (0usize, NeumaierSum::new(), NeumaierSum::new());
            for i in 0..n {
                if members[i] {
                    count += 1;
                    total.add(resid[i]);
                    ss.add(resid[i] * resid[i]);
                }
            }
            let total = total.value();
            let split = if depth < self.params.max_depth {
                let centered = ss.value() - total * total / count.max(1) as f64;
                self.best_split(&members, resid, count, total, centered)
            } else {
                None
            };
            match split {
                Some(s) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[at] = Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left,
                        right: left + 1,
                    };
                    let col = &self.cols[s.feature];
                    let lm: Vec<bool> = (0..n).map(|i| members[i] && col[i] <= s.threshold).collect();
                    let rm: Vec<bool> = (0..n).map(|i| members[i] && col[i] > s.threshold).collect();
                    stack.push((left + 1, depth + 1, rm));
                    stack.push((left, depth + 1, lm));
                }
                None => {
                    let v = if count > 0 { total / count as f64 } else { 0.0 };
                    nodes[at] = Node::Leaf(v);
                    for i in 0..n {
                        if members[i] {
                            leaf_out[i] = v;
                        }
                    }
                }
            }
        }
        RegressionTree { nodes }
    }
}

/// Fits `target` by boosting from its mean.
pub fn fit_boosted(
    rows: &Rows,
    target: &[f64],
    features: &FeatureSpec,
    params: BoostParams,
    clamp_unit: bool,
) -> (BoostedTrees, FitDiagnostics) {
    let n = rows.len();
    let k = features.n_features(rows.width());
    let mut cols = vec![Vec::with_capacity(n); k];
    let mut z = Vec::with_capacity(k);
    for r in rows.iter() {
        features.build(r, &mut z);
        for (j, v) in z.iter().enumerate() {
            cols[j].push(*v);
        }
    }
    let order: Vec<Vec<usize>> = cols
        .iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let base = target.iter().copied().collect::<NeumaierSum>().value() / n as f64;
    let mut fitted = vec![base; n];
    let mut resid = vec![0.0; n];
    let mut leaf = vec![0.0; n];
    let grower = Grower {
        cols: &cols,
        order: &order,
        params,
    };
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for i in 0..n {
            resid[i] = target[i] - fitted[i];
        }
        trees.push(grower.grow(&resid, &mut leaf));
        for i in 0..n {
            fitted[i] += params.learning_rate * leaf[i];
        }
    }
    let model = BoostedTrees {
        features: features.clone(),
        base,
        learning_rate: params.learning_rate,
        trees,
        clamp_unit,
    };
    let mse = fitted
        .iter()
        .zip(target)
        .map(|(f, t)| {
            let f = if clamp_unit { f.clamp(0.0, 1.0) } else { *f };
            (f - t) * (f - t)
        })
        .collect::<NeumaierSum>()
        .value()
        / n as f64;
    (
        model,
        FitDiagnostics {
            model: "boosted_trees".into(),
            n_train: n,
            loss: mse,
            iterations: params.n_trees,
            converged: true,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_gives_constant_model() {
        let rows = Rows::new((0..50).map(|i| i as f64).collect(), 1);
        let (m, _) = fit_boosted(&rows, &[1.0; 50], &FeatureSpec::all(), BoostParams::default(), true);
        for x in [-5.0, 0.0, 25.5, 100.0] {
            assert_eq!(m.predict(&[x]), 1.0);
        }
    }

    #[test]
    fn step_function_is_learned() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let y: Vec<f64> = xs.iter().map(|&x| if x < 0.5 { 0.0 } else { 10.0 }).collect();
        let (m, diag) = fit_boosted(
            &Rows::new(xs, 1),
            &y,
            &FeatureSpec::all(),
            BoostParams::default(),
            false,
        );
        assert!(diag.loss < 1e-6, "{}", diag.loss);
        assert!((m.predict(&[0.1]) - 0.0).abs() < 1e-3);
        assert!((m.predict(&[0.9]) - 10.0).abs() < 1e-3);
    }

    #[test]
    fn respects_min_leaf_and_depth() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let y: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let params = BoostParams {
            n_trees: 3,
            max_depth: 2,
            learning_rate: 0.5,
            min_leaf: 10,
        };
        let (m, _) = fit_boosted(&Rows::new(xs, 1), &y, &FeatureSpec::all(), params, false);
        for t in &m.trees {
            assert!(t.n_leaves() <= 3, "30 rows with min_leaf 10 admit at most 3 leaves");
        }
    }

    #[test]
    fn clamped_output_stays_in_unit_interval() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let a: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i % 7 == 0 || i > 80))).collect();
        let (m, _) = fit_boosted(&Rows::new(xs, 1), &a, &FeatureSpec::all(), BoostParams::default(), true);
        for x in -10..120 {
            let p = m.predict(&[f64::from(x)]);
            assert!((0.0..=1.0).contains(&p));
        }
    }
}
