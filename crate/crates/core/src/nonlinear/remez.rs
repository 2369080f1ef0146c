//! Minimax fitting of odd polynomials to the constant 1 on `[a, b]`, and
//! composition of such stages into a sign approximation on `[-1, 1]`.

use nalgebra::{DMatrix, DVector};

/// Odd polynomial `sum_k c[k] * x^(2k+1)`.
pub fn eval_odd(coeffs: &[f64], x: f64) -> f64 {
    let x2 = x * x;
    let mut acc = 0.0;
    for c in coeffs.iter().rev() {
        acc = acc * x2 + c;
    }
    acc * x
}

pub fn eval_composite(stages: &[Vec<f64>], x: f64) -> f64 {
    stages.iter().fold(x, |t, c| eval_odd(c, t))
}

fn cheb_grid(a: f64, b: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / (len - 1) as f64;
            0.5 * (a + b) - 0.5 * (b - a) * theta.cos()
        })
        .collect()
}

/// Alternating extrema of `err` over `grid`: one per run of constant sign.
fn alternating_extrema(grid: &[f64], err: &[f64]) -> Vec<usize> {
    let mut picks: Vec<usize> = Vec::new();
    for (i, &e) in err.iter().enumerate() {
        match picks.last_mut() {
            Some(last) if err[*last].signum() == e.signum() || e == 0.0 => {
                if e.abs() > err[*last].abs() {
                    *last = i;
                }
            }
            _ => picks.push(i),
        }
    }
    debug_assert!(picks.iter().all(|&i| i < grid.len()));
    picks
}

/// Minimax odd polynomial of degree `degree` approximating 1 on `[a, b]`,
/// `0 < a < b`. Returns the coefficients and the achieved max error.
pub fn remez_odd_unit(degree: usize, a: f64, b: f64) -> (Vec<f64>, f64) {
    assert!(degree % 2 == 1, "degree must be odd");
    assert!(0.0 < a && a < b, "interval must satisfy 0 < a < b");
    let k = degree.div_ceil(2);
    // Work in u = x / b so the basis stays well conditioned.
    let (ua, scale) = (a / b, b);
    let grid = cheb_grid(ua, 1.0, 4000);
    let mut refs = cheb_grid(ua, 1.0, k + 1);
    let mut best: Option<(Vec<f64>, f64)> = None;

    for _ in 0..60 {
        let mut m = DMatrix::<f64>::zeros(k + 1, k + 1);
        for (i, &x) in refs.iter().enumerate() {
            for j in 0..k {
                m[(i, j)] = x.powi(2 * j as i32 + 1);
            }
            m[(i, k)] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let rhs = DVector::from_element(k + 1, 1.0);
        let Some(sol) = m.lu().solve(&rhs) else {
            break;
        };
        let coeffs: Vec<f64> = sol.iter().take(k).copied().collect();
        let err: Vec<f64> = grid.iter().map(|&x| eval_odd(&coeffs, x) - 1.0).collect();
        let max_err = err.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        if best.as_ref().is_none_or(|(_, e)| max_err < *e) {
            best = Some((coeffs.clone(), max_err));
        }
        let level = sol[k].abs();
        if max_err - level <= 1e-9 * max_err.max(1e-300) {
            break;
        }
        let mut ext = alternating_extrema(&grid, &err);
        if ext.len() < k + 1 {
            break;
        }
        while ext.len() > k + 1 {
            let first = err[ext[0]].abs();
            let last = err[*ext.last().unwrap()].abs();
            if first < last {
                ext.remove(0);
            } else {
                ext.pop();
            }
        }
        refs = ext.into_iter().map(|i| grid[i]).collect();
    }
    let (u_coeffs, err) = best.unwrap_or_else(|| (vec![2.0 / (1.0 + ua)], (1.0 - ua) / (1.0 + ua)));
    let coeffs = u_coeffs
        .iter()
        .enumerate()
        .map(|(j, c)| c / scale.powi(2 * j as i32 + 1))
        .collect();
    (coeffs, err)
}

/// Composite sign approximation tuned for `t * (1 + sgn(t)) / 2` on `[-1, 1]`.
///
/// Each stage is fitted to 1 on the image interval of the previous stage,
/// starting from `[eps, 1]`; `eps` is chosen to minimize the worst relu
/// error `t * |1 - P(t)| / 2` on a coarse grid.
pub fn fit_sign_composite(degrees: &[usize]) -> Vec<Vec<f64>> {
    let coarse: Vec<f64> = (0..=4096).map(|i| i as f64 / 4096.0).collect();
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for step in 0..48 {
        let eps = 2f64.powf(-12.0 + step as f64 * 0.25);
        if eps >= 0.9 {
            break;
        }
        let stages = fit_stages(degrees, eps);
        let err = coarse
            .iter()
            .map(|&t| 0.5 * t * (1.0 - eval_composite(&stages, t)).abs())
            .fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(_, e)| err < *e) {
            best = Some((stages, err));
        }
    }
    best.map(|(s, _)| s).unwrap_or_default()
}

fn fit_stages(degrees: &[usize], eps: f64) -> Vec<Vec<f64>> {
    let mut lo = eps;
    let mut hi = 1.0;
    let mut stages = Vec::with_capacity(degrees.len());
    for &d in degrees {
        let (c, _) = remez_odd_unit(d, lo, hi);
        let probe = cheb_grid(lo, hi, 2000);
        let (mut nlo, mut nhi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in &probe {
            let v = eval_odd(&c, x);
            nlo = nlo.min(v);
            nhi = nhi.max(v);
        }
        stages.push(c);
        if nlo.is_nan() || nlo <= 0.0 || nhi - nlo < 1e-12 {
            break;
        }
        lo = nlo;
        hi = nhi;
    }
    stages
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remez_beats_taylor_like_fit() {
        let (c, err) = remez_odd_unit(7, 0.1, 1.0);
        assert_eq!(c.len(), 4);
        // Equioscillation: error is bounded on a dense probe and strictly below 1.
        let probe_max = (0..=10_000)
            .map(|i| 0.1 + 0.9 * i as f64 / 10_000.0)
            .map(|x| (eval_odd(&c, x) - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.5, "err {err}");
        assert!((probe_max - err).abs() < 1e-3 * err.max(1e-6) + 1e-9);
    }

    #[test]
    fn composite_is_odd_and_close_to_sign() {
        let stages = fit_sign_composite(&[7, 7, 7]);
        assert_eq!(stages.len(), 3);
        for &t in &[0.2, 0.5, 0.9, 1.0] {
            let v = eval_composite(&stages, t);
            assert!((v - 1.0).abs() < 1e-2, "P({t}) = {v}");
            assert!((eval_composite(&stages, -t) + v).abs() < 1e-12);
        }
    }
}
