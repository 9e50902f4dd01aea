//! Box-constrained L-BFGS used for kernel hyperparameters.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub(crate) struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

pub(crate) struct Settings {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub memory: usize,
}

/// Minimizes `value` inside `bounds`. `value` returns `None` where the
/// objective is undefined; `value_grad` must succeed at `x0`.
pub(crate) fn minimize<F, G>(
    mut value: F,
    mut value_grad: G,
    x0: &[f64],
    bounds: &Bounds,
    settings: &Settings,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<f64>,
    G: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let (mut f, mut g) = value_grad(&x)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        iterations += 1;
        // Variables pinned at a bound with the gradient pushing outward stay put.
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_hi = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let gm: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let gnorm = gm.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm < 1e-10 {
            break;
        }
        let mut p = two_loop(&gm, &history);
        for i in 0..n {
            if !free[i] {
                p[i] = 0.0;
            }
        }
        let mut slope = dot(&p, &gm);
        if slope >= 0.0 {
            history.clear();
            p = gm.iter().map(|v| -v).collect();
            slope = -dot(&gm, &gm);
        }
        let mut t = if history.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            bounds.clamp(&mut xn);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            if let Some(fn_) = value(&xn) {
                let decrease = dot(&g, &step).min(slope * t);
                if fn_.is_finite() && fn_ <= f + 1e-4 * decrease.min(0.0) {
                    accepted = Some(xn);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(xn) = accepted else { break };
        let Some((fn_, gn)) = value_grad(&xn) else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let delta = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        if delta.abs() < settings.tolerance {
            break;
        }
    }
    Some(Minimum {
        x,
        value: f,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}
