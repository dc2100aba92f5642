//! Box-clipped Nelder–Mead simplex search, used to polish genetic results.

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Initial simplex edge as a fraction of each box width.
    pub initial_step: f64,
    pub max_evals: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            max_evals: 2000,
            f_tol: 1e-12,
            x_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_evals: usize,
}

pub fn nelder_mead<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let clip = |x: &mut Vec<f64>| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut evals = 0usize;
    let mut call = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clip(&mut start);
    pts.push(start.clone());
    for i in 0..n {
        let mut p = start.clone();
        let h = opts.initial_step * (upper[i] - lower[i]).max(1e-8);
        p[i] = if p[i] + h <= upper[i] { p[i] + h } else { p[i] - h };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| call(p, &mut evals)).collect();

    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let size = (1..=n)
            .map(|j| {
                pts[j]
                    .iter()
                    .zip(&pts[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol * (1.0 + vals[0].abs())) || size <= opts.x_tol {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|i| pts[..n].iter().map(|p| p[i]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = (0..n).map(|i| centroid[i] + t * (pts[n][i] - centroid[i])).collect();
            clip(&mut x);
            x
        };

        let xr = toward(-1.0);
        let fr = call(&xr, &mut evals);
        if fr < vals[0] {
            let xe = toward(-2.0);
            let fe = call(&xe, &mut evals);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        // Outside contraction when the reflection helped a little, inside otherwise.
        let xc = toward(if fr < vals[n] { -0.5 } else { 0.5 });
        let fc = call(&xc, &mut evals);
        if fc < vals[n].min(fr) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for j in 1..=n {
            let mut x: Vec<f64> = (0..n).map(|i| pts[0][i] + 0.5 * (pts[j][i] - pts[0][i])).collect();
            clip(&mut x);
            vals[j] = call(&x, &mut evals);
            pts[j] = x;
        }
    }
    let best = (0..=n)
        .min_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)))
        .unwrap_or(0);
    NelderMeadResult {
        x: pts[best].clone(),
        f: vals[best],
        n_evals: evals,
    }
}
