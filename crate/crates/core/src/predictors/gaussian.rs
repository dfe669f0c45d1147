use super::{Backend, Prediction, Predictors};
use crate::schedule::sb_sigma;
use crate::toy::{cholesky, GaussianMixture};
use crate::{Error, Result};

/// Closed-form predictors when both endpoints are Gaussian mixtures and the
/// coupling is their product.
///
/// For a component pair `(a, b)` the bridge state is Gaussian with mean
/// `(1 - t) m_a + t m_b` and covariance
/// `C = (1 - t)^2 S_a + t^2 S_b + sigma_t^2 I`; the posterior means follow
/// from jointly Gaussian conditioning and are mixed with responsibilities
/// `w_a w_b N(x_t; mean, C)`.
#[derive(Debug, Clone)]
pub struct GaussianAnalytic {
    p0: GaussianMixture,
    p1: GaussianMixture,
    tau: f64,
}

impl GaussianAnalytic {
    pub fn new(p0: GaussianMixture, p1: GaussianMixture, tau: f64) -> Result<Self> {
        if p0.dim() != p1.dim() {
            return Err(Error::DimensionMismatch {
                expected: p0.dim(),
                got: p1.dim(),
            });
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::param(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(GaussianAnalytic { p0, p1, tau })
    }

    pub fn source(&self) -> &GaussianMixture {
        &self.p0
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.p1
    }
}

/// Cholesky factor with solve and log-determinant.
pub(crate) struct Spd {
    l: Vec<f64>,
    d: usize,
}

impl Spd {
    pub(crate) fn new(m: &[f64], d: usize) -> Option<Spd> {
        cholesky(m, d).map(|l| Spd { l, d })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (l, d) = (&self.l, self.d);
        let mut z = b.to_vec();
        for a in 0..d {
            let s: f64 = (0..a).map(|k| l[a * d + k] * z[k]).sum();
            z[a] = (z[a] - s) / l[a * d + a];
        }
        for a in (0..d).rev() {
            let s: f64 = (a + 1..d).map(|k| l[k * d + a] * z[k]).sum();
            z[a] = (z[a] - s) / l[a * d + a];
        }
        z
    }

    pub(crate) fn log_det(&self) -> f64 {
        (0..self.d).map(|a| 2.0 * self.l[a * self.d + a].ln()).sum()
    }
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|a| (0..d).map(|b| m[a * d + b] * v[b]).sum()).collect()
}

/// Responsibility-weighted average of per-component values, computed from
/// log responsibilities with a max shift.
fn mix(parts: Vec<(f64, Vec<Vec<f64>>)>) -> Result<Vec<Vec<f64>>> {
    let m = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegeneratePosterior(format!("max log responsibility is {m}")));
    }
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = parts[0].1.iter().map(|v| vec![0.0; v.len()]).collect();
    for (lw, vals) in parts {
        let w = (lw - m).exp();
        total += w;
        for (a, v) in acc.iter_mut().zip(vals) {
            a.iter_mut().zip(v).for_each(|(s, x)| *s += w * x);
        }
    }
    for a in &mut acc {
        a.iter_mut().for_each(|s| *s /= total);
    }
    Ok(acc)
}

/// `E[x | x + sqrt(noise_var) z = y]` for `x` drawn from `mix` and
/// independent standard normal `z`.
pub fn gaussian_denoise(p: &GaussianMixture, y: &[f64], noise_var: f64) -> Result<Vec<f64>> {
    let d = p.dim();
    if y.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: y.len() });
    }
    let mut parts = Vec::with_capacity(p.components());
    for k in 0..p.components() {
        let mut c = p.cov(k).to_vec();
        for a in 0..d {
            c[a * d + a] += noise_var;
        }
        let spd = Spd::new(&c, d).ok_or_else(|| Error::DegeneratePosterior("singular covariance".into()))?;
        let r: Vec<f64> = y.iter().zip(p.mean(k)).map(|(u, v)| u - v).collect();
        let s = spd.solve(&r);
        let quad: f64 = r.iter().zip(&s).map(|(u, v)| u * v).sum();
        let lw = p.weight(k).ln() - 0.5 * quad - 0.5 * spd.log_det();
        let post: Vec<f64> = p.mean(k).iter().zip(matvec(p.cov(k), &s)).map(|(m, u)| m + u).collect();
        parts.push((lw, vec![post]));
    }
    Ok(mix(parts)?.pop().expect("one value per component"))
}

impl Predictors for GaussianAnalytic {
    fn dim(&self) -> usize {
        self.p0.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn backend(&self) -> Backend {
        Backend::GaussianAnalytic
    }

    fn predict(&self, x: &[f64], t: f64) -> Result<Prediction> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: 1.0 });
        }
        let sigma = sb_sigma(t, self.tau);
        let s2 = sigma * sigma;
        let mut parts = Vec::with_capacity(self.p0.components() * self.p1.components());
        for a in 0..self.p0.components() {
            for b in 0..self.p1.components() {
                let (sa, sb) = (self.p0.cov(a), self.p1.cov(b));
                let (ma, mb) = (self.p0.mean(a), self.p1.mean(b));
                let mut c: Vec<f64> = sa
                    .iter()
                    .zip(sb)
                    .map(|(u, v)| (1.0 - t).powi(2) * u + t * t * v)
                    .collect();
                for k in 0..d {
                    c[k * d + k] += s2;
                }
                let spd = Spd::new(&c, d)
                    .ok_or_else(|| Error::DegeneratePosterior(format!("singular bridge covariance at t = {t}")))?;
                let r: Vec<f64> = (0..d).map(|k| x[k] - (1.0 - t) * ma[k] - t * mb[k]).collect();
                let s = spd.solve(&r);
                let quad: f64 = r.iter().zip(&s).map(|(u, v)| u * v).sum();
                let lw = self.p0.weight(a).ln() + self.p1.weight(b).ln() - 0.5 * quad - 0.5 * spd.log_det();
                let x0: Vec<f64> = ma.iter().zip(matvec(sa, &s)).map(|(m, u)| m + (1.0 - t) * u).collect();
                let x1: Vec<f64> = mb.iter().zip(matvec(sb, &s)).map(|(m, u)| m + t * u).collect();
                parts.push((lw, vec![x0, x1]));
            }
        }
        let mut out = mix(parts)?;
        let x1 = out.pop().expect("two values");
        let x0 = out.pop().expect("two values");
        let (eps, eps_degenerate) = if sigma > 0.0 {
            let e = (0..d).map(|k| (x[k] - (1.0 - t) * x0[k] - t * x1[k]) / sigma).collect();
            (e, false)
        } else {
            (vec![0.0; d], true)
        };
        Ok(Prediction {
            x0,
            x1,
            eps,
            eps_degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, RootSeed};
    use proptest::prelude::*;

    fn iso(m: &[f64], v: f64) -> GaussianMixture {
        GaussianMixture::isotropic(m.to_vec(), v).unwrap()
    }

    #[test]
    fn scalar_gaussians_by_hand() {
        // x0 ~ N(0, 1), x1 ~ N(3, 4), tau = 1, t = 0.5 (d = 1)
        // C = 0.25 + 1 + 0.25 = 1.5, x_t = 2 -> r = 2 - 1.5 = 0.5
        let g = GaussianAnalytic::new(iso(&[0.0], 1.0), iso(&[3.0], 4.0), 1.0).unwrap();
        let p = g.predict(&[2.0], 0.5).unwrap();
        assert!((p.x0[0] - 0.5 * 0.5 / 1.5).abs() < 1e-14);
        assert!((p.x1[0] - (3.0 + 0.5 * 4.0 * 0.5 / 1.5)).abs() < 1e-14);
        let e = (2.0 - 0.5 * p.x0[0] - 0.5 * p.x1[0]) / 0.5;
        assert!((p.eps[0] - e).abs() < 1e-14);
        assert!(!p.eps_degenerate);
    }

    #[test]
    fn endpoints_and_zero_tau() {
        let g = GaussianAnalytic::new(iso(&[0.0, 0.0], 1.0), iso(&[3.0, 1.0], 0.5), 2.0).unwrap();
        let x = [0.4, -0.7];
        // at t = 0 the state is the source point itself
        let p = g.predict(&x, 0.0).unwrap();
        assert!(p.eps_degenerate && p.eps == vec![0.0, 0.0]);
        assert!((p.x0[0] - 0.4).abs() < 1e-14 && (p.x0[1] + 0.7).abs() < 1e-14);
        assert!((p.x1[0] - 3.0).abs() < 1e-14 && (p.x1[1] - 1.0).abs() < 1e-14);
        let p = g.predict(&x, 1.0).unwrap();
        assert!((p.x1[0] - 0.4).abs() < 1e-14);
        let g0 = GaussianAnalytic::new(iso(&[0.0, 0.0], 1.0), iso(&[3.0, 1.0], 0.5), 0.0).unwrap();
        assert!(g0.predict(&x, 0.5).unwrap().eps_degenerate);
        assert!(g.predict(&x, 1.5).is_err());
        assert!(g.predict(&[0.0], 0.5).is_err());
    }

    #[test]
    fn denoise_matches_single_gaussian_formula() {
        // m + S (S + vI)^-1 (y - m) for diagonal S
        let p = GaussianMixture::single(vec![1.0, -2.0], vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        let y = [3.0, 0.0];
        let v = 0.7;
        let out = gaussian_denoise(&p, &y, v).unwrap();
        assert!((out[0] - (1.0 + 2.0 / 2.7 * 2.0)).abs() < 1e-14);
        assert!((out[1] - (-2.0 + 0.5 / 1.2 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn monte_carlo_posterior_mean() {
        // E[x0 | x_t] by rejection: sample the joint and keep draws whose
        // state falls in a narrow window around the query
        let p0 = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let p1 = iso(&[2.0], 0.3);
        let (tau, t) = (1.0, 0.4);
        let g = GaussianAnalytic::new(p0.clone(), p1.clone(), tau).unwrap();
        let q = 0.3;
        let p = g.predict(&[q], t).unwrap();
        let mut rng = RootSeed(3).stream("mc", 0);
        let s = sb_sigma(t, tau);
        let (mut n, mut s0, mut s1) = (0.0, 0.0, 0.0);
        for _ in 0..2_000_000 {
            let a = p0.sample_one(&mut rng)[0];
            let b = p1.sample_one(&mut rng)[0];
            let x = (1.0 - t) * a + t * b + s * standard_normal(&mut rng, 1)[0];
            if (x - q).abs() < 0.01 {
                n += 1.0;
                s0 += a;
                s1 += b;
            }
        }
        assert!((s0 / n - p.x0[0]).abs() < 0.03, "{} vs {}", s0 / n, p.x0[0]);
        assert!((s1 / n - p.x1[0]).abs() < 0.03, "{} vs {}", s1 / n, p.x1[0]);
    }

    proptest! {
        #[test]
        fn consistency_identity(x in -5.0..5.0f64, y in -5.0..5.0f64, t in 0.001..0.999f64, tau in 0.01..10.0f64) {
            let p0 = GaussianMixture::new(
                vec![0.3, 0.7],
                vec![vec![-1.0, 0.0], vec![1.0, 1.0]],
                vec![vec![0.2, 0.05, 0.05, 0.3], vec![0.5, 0.0, 0.0, 0.5]],
            ).unwrap();
            let g = GaussianAnalytic::new(p0, iso(&[2.0, -1.0], 0.4), tau).unwrap();
            let p = g.predict(&[x, y], t).unwrap();
            let s = sb_sigma(t, tau);
            for (k, v) in [x, y].iter().enumerate() {
                let r = v - (1.0 - t) * p.x0[k] - t * p.x1[k] - s * p.eps[k];
                prop_assert!(r.abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }
}
