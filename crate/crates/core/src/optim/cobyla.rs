//! Constrained derivative-free minimization by linear approximations.
//!
//! A simplex of `n + 1` evaluated points defines linear interpolation
//! models of the objective and of every constraint. Each iteration
//! minimizes the linear objective model subject to the linearized
//! constraints inside a ball of radius `ρ`, then accepts or rejects the
//! trial point through the merit `f + σ·max(0, maxₖ cₖ)`. `ρ` shrinks from
//! `rho_start` to `rho_end` when steps stop making progress.
//!
//! The trust-region linear program is small (`n` is the policy dimension),
//! so it is solved exactly by enumerating active sets. When the linearized
//! constraints cannot all be met inside the ball, the least uniform
//! relaxation that can is found first and the objective is minimized
//! subject to it.
//!
//! Box bounds enter as ordinary linear constraints `lᵢ − xᵢ ≤ 0`,
//! `xᵢ − uᵢ ≤ 0`; geometry-repair points may leave the box by at most `ρ`,
//! but the returned point is chosen among box-feasible evaluations
//! whenever one exists.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CobylaOptions {
    pub rho_start: f64,
    pub rho_end: f64,
    pub max_evals: usize,
    /// Largest constraint value still counted as feasible.
    pub feas_tol: f64,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

impl Default for CobylaOptions {
    fn default() -> Self {
        Self {
            rho_start: 0.5,
            rho_end: 1e-6,
            max_evals: 5000,
            feas_tol: 1e-6,
            lower: None,
            upper: None,
        }
    }
}

impl CobylaOptions {
    pub fn with_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }
}

/// A constraint `g(x) ≤ 0`.
pub type ConstraintFn<'a> = Box<dyn FnMut(&[f64]) -> f64 + 'a>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub eval: usize,
    pub objective: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CobylaResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// User constraint values at `x` (box excluded).
    pub constraints: Vec<f64>,
    /// Largest violation at `x`, box included.
    pub max_violation: f64,
    pub feasible: bool,
    pub n_evals: usize,
    /// `ρ` reached `rho_end` before the evaluation budget ran out.
    pub converged: bool,
    /// Every improvement of the best feasible point, in evaluation order.
    pub trace: Vec<TracePoint>,
}

/// Minimizes `objective` subject to `c(x) ≤ 0` for every constraint.
pub fn cobyla_solve<'a, F>(
    mut objective: F,
    mut constraints: Vec<ConstraintFn<'a>>,
    x0: &[f64],
    opts: &CobylaOptions,
) -> CobylaResult
where
    F: FnMut(&[f64]) -> f64,
{
    let m = constraints.len();
    minimize(
        |x, c| {
            for (ck, g) in c.iter_mut().zip(constraints.iter_mut()) {
                *ck = g(x);
            }
            objective(x)
        },
        m,
        x0,
        opts,
    )
}

/// Core entry point: `eval(x, c)` returns the objective and fills the `m`
/// constraint values, which lets callers share work between them.
pub fn minimize<F>(mut eval: F, m: usize, x0: &[f64], opts: &CobylaOptions) -> CobylaResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let bounds = Bounds::new(n, opts);
    let mut run = Run {
        n,
        m,
        mt: m + bounds.count(),
        bounds,
        feas_tol: opts.feas_tol,
        n_evals: 0,
        best: None,
        trace: Vec::new(),
        scratch: vec![0.0; m],
        history: Vec::new(),
    };
    if n == 0 {
        run.evaluate(&mut eval, x0);
        return run.finish(true, 0.0);
    }

    let mut rho = opts.rho_start.max(opts.rho_end);
    let rho_end = opts.rho_end;
    let mut sigma = 0.0f64;

    let mut sim = Simplex::default();
    let p0 = run.evaluate(&mut eval, x0);
    sim.push(p0);
    for j in 0..n {
        if run.n_evals >= opts.max_evals {
            return run.finish(false, sigma);
        }
        let mut x = x0.to_vec();
        x[j] += rho;
        let p = run.evaluate(&mut eval, &x);
        sim.push(p);
    }

    let mut repair_pending = false;
    loop {
        if run.n_evals >= opts.max_evals {
            return run.finish(false, sigma);
        }
        sim.select_best(sigma);
        let Some(geo) = sim.geometry(n) else {
            // Degenerate simplex: re-span it around the best vertex.
            let base = sim.pts[0].x.clone();
            sim.pts.truncate(1);
            for j in 0..n {
                if run.n_evals >= opts.max_evals {
                    return run.finish(false, sigma);
                }
                let mut x = base.clone();
                x[j] += rho;
                let p = run.evaluate(&mut eval, &x);
                sim.push(p);
            }
            continue;
        };
        let geometry_ok = geo.veta.iter().all(|&v| v <= 2.0 * rho) && geo.vsig.iter().all(|&v| v >= 0.25 * rho);
        let (g, a) = sim.models(&geo, run.mt);
        let c0 = &sim.pts[0].c;

        if repair_pending && !geometry_ok {
            repair_pending = false;
            run.repair(&mut eval, &mut sim, &geo, &g, &a, sigma, rho);
            continue;
        }
        repair_pending = false;

        let s = trust_region_step(&g, &a, c0, rho);
        let snorm = norm(&s);
        if snorm < 0.5 * rho {
            if !geometry_ok {
                run.repair(&mut eval, &mut sim, &geo, &g, &a, sigma, rho);
                continue;
            }
            if rho <= rho_end {
                return run.finish(true, sigma);
            }
            rho = shrink(rho, rho_end);
            continue;
        }

        let v0 = sim.pts[0].v;
        let v_pred = max_violation((0..run.mt).map(|k| c0[k] + dot(&a[k], &s)));
        let df_pred = dot(&g, &s);
        if v_pred < v0 {
            let barmu = df_pred.max(0.0) / (v0 - v_pred);
            if sigma < 1.5 * barmu {
                sigma = 2.0 * barmu;
                if sim.best_index(sigma) != 0 {
                    continue;
                }
            }
        }
        let prerem = sigma * (v0 - v_pred) - df_pred;
        if !(prerem > 0.0) {
            if !geometry_ok {
                run.repair(&mut eval, &mut sim, &geo, &g, &a, sigma, rho);
                continue;
            }
            if rho <= rho_end {
                return run.finish(true, sigma);
            }
            rho = shrink(rho, rho_end);
            continue;
        }

        let xnew: Vec<f64> = sim.pts[0].x.iter().zip(&s).map(|(xi, si)| xi + si).collect();
        let pnew = run.evaluate(&mut eval, &xnew);
        let actrem = sim.pts[0].merit(sigma) - pnew.merit(sigma);
        let ratio = actrem / prerem;

        // Drop the vertex whose replacement keeps the simplex best
        // conditioned, favouring vertices far from the new point.
        let mut jdrop = 0;
        let mut best_score = -1.0;
        for j in 0..n {
            let lam = dot(&s, &geo.w[j]).abs();
            let dist = norm_diff(&sim.pts[j + 1].x, &xnew) / rho;
            let score = lam * dist.max(1.0).powi(2);
            if score > best_score {
                best_score = score;
                jdrop = j + 1;
            }
        }
        sim.pts[jdrop] = pnew;

        if ratio < 0.1 {
            if geometry_ok {
                if rho <= rho_end {
                    return run.finish(true, sigma);
                }
                rho = shrink(rho, rho_end);
            } else {
                repair_pending = true;
            }
        }
    }
}

fn shrink(rho: f64, rho_end: f64) -> f64 {
    let r = 0.5 * rho;
    if r <= 1.5 * rho_end {
        rho_end
    } else {
        r
    }
}

#[derive(Debug, Clone)]
struct Bounds {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

impl Bounds {
    fn new(n: usize, opts: &CobylaOptions) -> Self {
        let pick = |v: &Option<Vec<f64>>| -> Vec<Option<f64>> {
            (0..n)
                .map(|i| v.as_ref().and_then(|b| b.get(i).copied()).filter(|x| x.is_finite()))
                .collect()
        };
        Self {
            lower: pick(&opts.lower),
            upper: pick(&opts.upper),
        }
    }

    fn count(&self) -> usize {
        self.lower.iter().chain(&self.upper).filter(|b| b.is_some()).count()
    }

    fn fill(&self, x: &[f64], out: &mut Vec<f64>) {
        for (i, l) in self.lower.iter().enumerate() {
            if let Some(l) = l {
                out.push(l - x[i]);
            }
        }
        for (i, u) in self.upper.iter().enumerate() {
            if let Some(u) = u {
                out.push(x[i] - u);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Point {
    x: Vec<f64>,
    f: f64,
    /// User constraints followed by box constraints.
    c: Vec<f64>,
    v: f64,
}

impl Point {
    fn merit(&self, sigma: f64) -> f64 {
        self.f + sigma * self.v
    }
}

struct Run {
    n: usize,
    m: usize,
    mt: usize,
    bounds: Bounds,
    feas_tol: f64,
    n_evals: usize,
    best: Option<Point>,
    trace: Vec<TracePoint>,
    scratch: Vec<f64>,
    history: Vec<Point>,
}

impl Run {
    fn evaluate<F>(&mut self, eval: &mut F, x: &[f64]) -> Point
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        self.n_evals += 1;
        self.scratch.iter_mut().for_each(|c| *c = 0.0);
        let f = sanitize(eval(x, &mut self.scratch));
        let mut c: Vec<f64> = self.scratch.iter().map(|&v| sanitize(v)).collect();
        self.bounds.fill(x, &mut c);
        let v = max_violation(c.iter().copied());
        let p = Point { x: x.to_vec(), f, c, v };
        self.offer(&p);
        self.history.push(p.clone());
        p
    }

    fn offer(&mut self, p: &Point) {
        let tol = self.feas_tol;
        let better = match &self.best {
            None => true,
            Some(b) => {
                let (pf, bf) = (p.v <= tol, b.v <= tol);
                match (pf, bf) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => p.f < b.f,
                    (false, false) => p.v < b.v || (p.v == b.v && p.f < b.f),
                }
            }
        };
        if better {
            if p.v <= tol {
                self.trace.push(TracePoint {
                    eval: self.n_evals,
                    objective: p.f,
                    violation: p.v,
                });
            }
            self.best = Some(p.clone());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn repair<F>(
        &mut self,
        eval: &mut F,
        sim: &mut Simplex,
        geo: &Geometry,
        g: &[f64],
        a: &[Vec<f64>],
        sigma: f64,
        rho: f64,
    ) where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let far = (0..self.n)
            .filter(|&j| geo.veta[j] > 2.0 * rho)
            .max_by(|&i, &j| geo.veta[i].total_cmp(&geo.veta[j]));
        let j = far.unwrap_or_else(|| {
            (0..self.n)
                .min_by(|&i, &j| geo.vsig[i].total_cmp(&geo.vsig[j]))
                .unwrap_or(0)
        });
        let wn = norm(&geo.w[j]);
        let dir: Vec<f64> = geo.w[j].iter().map(|v| rho * v / wn).collect();
        let c0 = &sim.pts[0].c;
        let lin_merit = |sign: f64| {
            let df = sign * dot(g, &dir);
            let v = max_violation((0..a.len()).map(|k| c0[k] + sign * dot(&a[k], &dir)));
            df + sigma * v
        };
        let sign = if lin_merit(-1.0) < lin_merit(1.0) { -1.0 } else { 1.0 };
        let x: Vec<f64> = sim.pts[0].x.iter().zip(&dir).map(|(xi, di)| xi + sign * di).collect();
        sim.pts[j + 1] = self.evaluate(eval, &x);
    }

    /// Among feasible evaluations the final pick minimizes the merit rather
    /// than `f`, so points that buy objective with violation inside the
    /// tolerance do not win.
    fn finish(self, converged: bool, sigma: f64) -> CobylaResult {
        let tol = self.feas_tol;
        let best = self
            .history
            .into_iter()
            .filter(|p| p.v <= tol)
            .min_by(|p, q| p.merit(sigma).total_cmp(&q.merit(sigma)).then(p.v.total_cmp(&q.v)))
            .or(self.best)
            .expect("at least one evaluation");
        CobylaResult {
            constraints: best.c[..self.m].to_vec(),
            max_violation: best.v,
            feasible: best.v <= self.feas_tol,
            x: best.x,
            f: best.f,
            n_evals: self.n_evals,
            converged,
            trace: self.trace,
        }
    }
}

/// Non-finite values would poison the interpolation models.
fn sanitize(v: f64) -> f64 {
    const BIG: f64 = 1e150;
    if v.is_nan() {
        BIG
    } else {
        v.clamp(-BIG, BIG)
    }
}

fn max_violation(c: impl Iterator<Item = f64>) -> f64 {
    c.fold(0.0, f64::max)
}

#[derive(Default)]
struct Simplex {
    pts: Vec<Point>,
}

struct Geometry {
    /// Columns of the inverse displacement matrix: `dᵢ·wⱼ = δᵢⱼ`.
    w: Vec<Vec<f64>>,
    /// Distance of vertex `j` from the best vertex.
    veta: Vec<f64>,
    /// Distance of vertex `j` from the face spanned by the others.
    vsig: Vec<f64>,
}

impl Simplex {
    fn push(&mut self, p: Point) {
        self.pts.push(p);
    }

    fn best_index(&self, sigma: f64) -> usize {
        let mut best = 0;
        for j in 1..self.pts.len() {
            let (pj, pb) = (&self.pts[j], &self.pts[best]);
            let (mj, mb) = (pj.merit(sigma), pb.merit(sigma));
            if mj < mb || (mj == mb && pj.v < pb.v) {
                best = j;
            }
        }
        best
    }

    fn select_best(&mut self, sigma: f64) {
        let b = self.best_index(sigma);
        self.pts.swap(0, b);
    }

    fn geometry(&self, n: usize) -> Option<Geometry> {
        let x0 = &self.pts[0].x;
        let d = DMatrix::from_fn(n, n, |i, k| self.pts[i + 1].x[k] - x0[k]);
        let inv = d.clone().try_inverse()?;
        let w: Vec<Vec<f64>> = (0..n).map(|j| inv.column(j).iter().copied().collect()).collect();
        let veta: Vec<f64> = (0..n).map(|j| d.row(j).norm()).collect();
        let vsig: Vec<f64> = w.iter().map(|wj| 1.0 / norm(wj)).collect();
        let scale = veta.iter().copied().fold(0.0, f64::max);
        if vsig.iter().any(|&s| !(s > 1e-13 * scale)) {
            return None;
        }
        Some(Geometry { w, veta, vsig })
    }

    fn models(&self, geo: &Geometry, mt: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = geo.w.len();
        let p0 = &self.pts[0];
        let mut g = vec![0.0; n];
        let mut a = vec![vec![0.0; n]; mt];
        for j in 0..n {
            let pj = &self.pts[j + 1];
            let df = pj.f - p0.f;
            for (gi, wi) in g.iter_mut().zip(&geo.w[j]) {
                *gi += df * wi;
            }
            for k in 0..mt {
                let dc = pj.c[k] - p0.c[k];
                for (ai, wi) in a[k].iter_mut().zip(&geo.w[j]) {
                    *ai += dc * wi;
                }
            }
        }
        (g, a)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Step `s` minimizing `g·s` subject to `cₖ + aₖ·s ≤ t*` and `‖s‖ ≤ ρ`,
/// where `t* ≥ 0` is the smallest relaxation that admits a solution.
pub(crate) fn trust_region_step(g: &[f64], a: &[Vec<f64>], c: &[f64], rho: f64) -> Vec<f64> {
    let n = g.len();
    let b_at = |t: f64| -> Vec<f64> { c.iter().map(|ck| t - ck).collect() };
    let cmax = c.iter().copied().fold(0.0, f64::max);
    let mut t = 0.0;
    if cmax > 0.0 && min_norm_feasible(a, &b_at(0.0), rho).is_none_or(|r| r > rho) {
        let (mut lo, mut hi) = (0.0, cmax);
        for _ in 0..100 {
            if hi - lo <= 1e-14 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if min_norm_feasible(a, &b_at(mid), rho).is_some_and(|r| r <= rho) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        t = hi;
    }
    let b = b_at(t);
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for_each_active_set(a, &b, g, rho, |sp, pg| {
        let spn = norm(sp);
        let mut cands = vec![sp.to_vec()];
        let pgn = norm(pg);
        if pgn > 1e-12 * (1.0 + norm(g)) && spn < rho {
            let tau = (rho * rho - spn * spn).max(0.0).sqrt();
            cands.push(sp.iter().zip(pg).map(|(s, p)| s - tau * p / pgn).collect());
        }
        for s in cands {
            if norm(&s) > rho * (1.0 + 1e-12) || !feasible(a, &b, &s, rho) {
                continue;
            }
            let val = dot(g, &s);
            let sn = norm(&s);
            let better = match &best {
                None => true,
                Some((bv, bn, _)) => val < *bv - 1e-15 * val.abs().max(1.0) || (val <= *bv && sn < *bn),
            };
            if better {
                best = Some((val, sn, s));
            }
        }
    });
    best.map(|(_, _, s)| s).unwrap_or_else(|| vec![0.0; n])
}

fn feasible(a: &[Vec<f64>], b: &[f64], s: &[f64], rho: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(ak, &bk)| dot(ak, s) <= bk + 1e-10 * (1.0 + bk.abs() + norm(ak) * rho))
}

/// Norm of the smallest point of `{s : A s ≤ b}` that lies within the
/// ball, if any.
fn min_norm_feasible(a: &[Vec<f64>], b: &[f64], rho: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let zero = vec![0.0; a.first().map_or(0, Vec::len)];
    for_each_active_set(a, b, &zero, rho, |sp, _| {
        let r = norm(sp);
        if feasible(a, b, sp, rho) && best.is_none_or(|bv| r < bv) {
            best = Some(r);
        }
    });
    best
}

/// Calls `visit(s_p, P g)` for every active set of constraints that can
/// bind inside the ball: `s_p` is the min-norm point of the active
/// equalities and `P g` the gradient projected onto their null space.
fn for_each_active_set<V>(a: &[Vec<f64>], b: &[f64], grad: &[f64], rho: f64, mut visit: V)
where
    V: FnMut(&[f64], &[f64]),
{
    const MAX_CANDIDATES: usize = 16;
    let mut cand: Vec<(f64, usize)> = a
        .iter()
        .zip(b)
        .enumerate()
        .filter_map(|(k, (ak, &bk))| {
            let an = norm(ak);
            (an > 0.0 && bk < rho * an * (1.0 + 1e-12)).then_some((bk / an, k))
        })
        .collect();
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    cand.truncate(MAX_CANDIDATES);
    let idx: Vec<usize> = cand.into_iter().map(|(_, k)| k).collect();
    let max_size = idx.len().min(grad.len());
    let mut subset = Vec::with_capacity(max_size);
    recurse(a, b, &idx, 0, max_size, &mut subset, grad, &mut visit);
}

#[allow(clippy::too_many_arguments)]
fn recurse<V>(
    a: &[Vec<f64>],
    b: &[f64],
    idx: &[usize],
    start: usize,
    max_size: usize,
    subset: &mut Vec<usize>,
    grad: &[f64],
    visit: &mut V,
) where
    V: FnMut(&[f64], &[f64]),
{
    if let Some((sp, pg)) = project(a, b, subset, grad) {
        visit(&sp, &pg);
    } else {
        // A rank-deficient set has no supersets worth visiting.
        return;
    }
    if subset.len() == max_size {
        return;
    }
    for i in start..idx.len() {
        subset.push(idx[i]);
        recurse(a, b, idx, i + 1, max_size, subset, grad, visit);
        subset.pop();
    }
}

fn project(a: &[Vec<f64>], b: &[f64], set: &[usize], grad: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = grad.len();
    let g = DVector::from_column_slice(grad);
    if set.is_empty() {
        return Some((vec![0.0; n], g.iter().copied().collect()));
    }
    let r = set.len();
    let am = DMatrix::from_fn(r, n, |i, j| a[set[i]][j]);
    let gram = &am * am.transpose();
    let scale = (0..r).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let chol = gram.cholesky()?;
    let l = chol.l();
    let min_piv = (0..r).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_piv > 1e-12 * scale) {
        return None;
    }
    let bs = DVector::from_fn(r, |i, _| b[set[i]]);
    let sp = am.transpose() * chol.solve(&bs);
    let pg = &g - am.transpose() * chol.solve(&(&am * &g));
    Some((sp.iter().copied().collect(), pg.iter().copied().collect()))
}
