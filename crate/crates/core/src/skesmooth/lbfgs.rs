//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once `‖g‖ ≤ tol · (1 + |f|)`.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Smallest step tried before giving up.
    pub min_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 5,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            armijo: 1e-4,
            min_step: 1e-20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion: `-H · g` from the stored `(s, y, 1/yᵀs)` pairs.
fn direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `eval`, which returns the objective and its gradient.
pub fn minimize<F>(x0: Vec<f64>, opts: &LbfgsOptions, mut eval: F) -> LbfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut f, mut g) = eval(&x);
    let mut trace = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let outcome = |x, f, trace, iterations, converged, diagnostic| LbfgsOutcome {
        x,
        f,
        trace,
        iterations,
        converged,
        diagnostic,
    };
    if !f.is_finite() {
        return outcome(x, f, trace, 0, false, Some("objective is not finite at the start".into()));
    }

    for iter in 0..opts.max_iterations {
        if norm(&g) <= opts.gradient_tolerance * (1.0 + f.abs()) {
            return outcome(x, f, trace, iter, true, None);
        }
        let mut d = direction(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if pairs.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if trial == x {
                break None;
            }
            let (ft, gt) = eval(&trial);
            if ft.is_finite() && ft <= f + opts.armijo * step * slope {
                break Some((trial, ft, gt));
            }
            step *= 0.5;
            if step < opts.min_step {
                break None;
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            let msg = format!("line search step fell below {:e} at iteration {iter}", opts.min_step);
            return outcome(x, f, trace, iter, false, Some(msg));
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && opts.memory > 0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
    }
    let converged = norm(&g) <= opts.gradient_tolerance * (1.0 + f.abs());
    let diagnostic = (!converged).then(|| format!("stopped after {} iterations", opts.max_iterations));
    outcome(x, f, trace, opts.max_iterations, converged, diagnostic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(vec![-1.2, 1.0], &LbfgsOptions::default(), rosenbrock);
        assert!(out.converged, "{:?}", out.diagnostic);
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_few_steps() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let out = minimize(vec![1.0; 4], &LbfgsOptions::default(), |x| {
            let f = 0.5 * x.iter().zip(&diag).map(|(v, d)| d * v * v).sum::<f64>();
            (f, x.iter().zip(&diag).map(|(v, d)| d * v).collect())
        });
        assert!(out.converged);
        assert!(out.iterations < 30, "{}", out.iterations);
    }

    #[test]
    fn non_finite_region_halves_the_step() {
        // log barrier at x < 0; the first full step lands outside it
        let out = minimize(vec![4.0], &LbfgsOptions::default(), |x| {
            if x[0] <= 0.0 {
                (f64::NAN, vec![f64::NAN])
            } else {
                (x[0] - 2.0 * x[0].ln(), vec![1.0 - 2.0 / x[0]])
            }
        });
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn unusable_objective_reports_failure() {
        let out = minimize(vec![1.0], &LbfgsOptions::default(), |x| {
            if x[0] == 1.0 {
                (1.0, vec![1.0])
            } else {
                (f64::INFINITY, vec![0.0])
            }
        });
        assert!(!out.converged);
        assert!(out.diagnostic.unwrap().contains("line search"));
        assert_eq!(out.x, vec![1.0]);
    }
}
