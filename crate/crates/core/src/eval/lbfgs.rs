//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once the gradient's L2 norm falls to this value.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone)]
struct Point {
    alpha: f64,
    f: f64,
    d: f64,
    g: Vec<f64>,
}

struct Search<'a, F> {
    obj: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    d0: f64,
    c1: f64,
    c2: f64,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Search<'_, F> {
    fn eval(&mut self, alpha: f64) -> Point {
        let xt: Vec<f64> = self.x.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let (f, g) = (self.obj)(&xt);
        let d = dot(&g, self.dir);
        Point { alpha, f, d, g }
    }

    fn armijo_fails(&self, p: &Point) -> bool {
        !p.f.is_finite() || p.f > self.f0 + self.c1 * p.alpha * self.d0
    }

    fn curvature_holds(&self, p: &Point) -> bool {
        p.d.abs() <= -self.c2 * self.d0
    }

    fn run(&mut self, g0: &[f64], mut alpha: f64) -> Option<Point> {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            d: self.d0,
            g: g0.to_vec(),
        };
        for i in 0..30 {
            let cur = self.eval(alpha);
            if self.armijo_fails(&cur) || (i > 0 && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature_holds(&cur) {
                return Some(cur);
            }
            if cur.d >= 0.0 {
                return self.zoom(cur, prev);
            }
            prev = cur;
            alpha *= 2.0;
        }
        (prev.alpha > 0.0).then_some(prev)
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Option<Point> {
        for _ in 0..40 {
            let alpha = interpolate(&lo, &hi);
            let cur = self.eval(alpha);
            if self.armijo_fails(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature_holds(&cur) {
                    return Some(cur);
                }
                if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
        }
        (lo.alpha > 0.0).then_some(lo)
    }
}

/// Minimiser of the cubic through two bracket points, kept at least 10% of
/// the interval away from either end; bisection when the cubic is unusable.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    if !disc.is_finite() || disc < 0.0 || !hi.f.is_finite() {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    let (min, max) = (a.min(b), a.max(b));
    let margin = 0.1 * (max - min);
    if t.is_finite() && t > min + margin && t < max - margin {
        t
    } else {
        mid
    }
}

/// Minimises `obj`, which returns the value and gradient at a point.
pub fn lbfgs<F>(mut obj: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut f, mut g) = obj(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut converged = norm(&g) <= opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        // Two-loop recursion for d = −H·g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut d0 = dot(&g, &dir);
        if !(d0 < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            d0 = -dot(&g, &g);
        }
        let init = if hist.is_empty() { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        let mut search = Search {
            obj: &mut obj,
            x: &x,
            dir: &dir,
            f0: f,
            d0,
            c1: opts.c1,
            c2: opts.c2,
        };
        let Some(p) = search.run(&g, init) else {
            break;
        };
        let s: Vec<f64> = dir.iter().map(|d| p.alpha * d).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let improvement = f - p.f;
        f = p.f;
        g = p.g;
        iterations += 1;
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        converged = norm(&g) <= opts.grad_tol;
        if improvement.abs() <= 1e-16 * f.abs().max(1.0) {
            break;
        }
    }
    LbfgsResult {
        grad_norm: norm(&g),
        x,
        f,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let r = lbfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ];
                (f, g)
            },
            vec![-1.2, 1.0],
            &LbfgsOptions::default(),
        );
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_in_few_steps() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let r = lbfgs(
            |x| {
                let f = x.iter().zip(&diag).map(|(v, d)| 0.5 * d * v * v).sum();
                (f, x.iter().zip(&diag).map(|(v, d)| d * v).collect())
            },
            vec![1.0; 4],
            &LbfgsOptions::default(),
        );
        assert!(r.converged && r.iterations < 30, "{r:?}");
    }
}
