//! Sample-based distances between batches and the transport cost of a map.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::rng::{standard_normal, RootSeed};
use crate::{Error, Result, SampleBatch};

/// Eigenvalues below this (after symmetrisation) are reported before being
/// clipped to zero.
pub const NEGATIVE_EIGEN_WARN: f64 = 1e-6;

fn same_dim(a: &SampleBatch, b: &SampleBatch) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

fn mean_pairwise(a: &SampleBatch, b: &SampleBatch) -> f64 {
    let s: f64 = a
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| b.rows().map(|q| dist(r, q)).sum::<f64>())
        .sum();
    s / (a.len() * b.len()) as f64
}

/// V-statistic energy distance `2 E|a - b| - E|a - a'| - E|b - b'|`.
pub fn energy_distance(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    same_dim(a, b)?;
    let v = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    Ok(v.max(0.0))
}

/// Squared 2-Wasserstein distance between two sorted 1D empirical measures
/// with uniform weights, by merging their quantile functions.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        // advance whichever quantile step ended; both on ties
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

/// Mean over `n_proj` seeded random unit directions of the 1D 2-Wasserstein
/// distance between the projected batches.
pub fn sliced_wasserstein(a: &SampleBatch, b: &SampleBatch, n_proj: usize, seed: u64) -> Result<f64> {
    same_dim(a, b)?;
    if n_proj == 0 {
        return Err(Error::param("n_proj must be >= 1"));
    }
    let d = a.dim();
    let dirs: Vec<Vec<f64>> = (0..n_proj)
        .map(|p| {
            let mut rng = RootSeed(seed).stream("sliced", p as u64);
            loop {
                let v = standard_normal(&mut rng, d);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect();
    let project = |s: &SampleBatch, dir: &[f64]| {
        let mut v: Vec<f64> = s.rows().map(|r| r.iter().zip(dir).map(|(x, w)| x * w).sum()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let total: f64 = dirs
        .par_iter()
        .map(|dir| w2_sq_sorted(&project(a, dir), &project(b, dir)).sqrt())
        .sum();
    Ok(total / n_proj as f64)
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s)
}

fn clip(v: f64, what: &str) -> f64 {
    if v < -NEGATIVE_EIGEN_WARN {
        log::warn!("{what}: clipping eigenvalue {v:e} to zero");
    }
    v.max(0.0)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let vals = e.eigenvalues.map(|v| clip(v, "covariance square root").sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given by mean vectors and
/// row-major covariance matrices.
pub fn gaussian_frechet_moments(mu_a: &[f64], cov_a: &[f64], mu_b: &[f64], cov_b: &[f64]) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu_b.len(),
        });
    }
    let a = DMatrix::from_row_slice(d, d, cov_a);
    let b = DMatrix::from_row_slice(d, d, cov_b);
    let ra = psd_sqrt(&a);
    let inner = &ra * &b * &ra;
    let cross: f64 = sym_eigen(&inner)
        .eigenvalues
        .iter()
        .map(|&v| clip(v, "covariance product").sqrt())
        .sum();
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean_term + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussians fitted to the batches (unbiased
/// covariance).
pub fn gaussian_frechet(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    same_dim(a, b)?;
    let d = a.dim();
    for s in [a, b] {
        if s.len() <= d {
            return Err(Error::InvalidBatch(format!(
                "need more than {d} points to fit a covariance, got {}",
                s.len()
            )));
        }
    }
    gaussian_frechet_moments(&a.mean(), &a.covariance(), &b.mean(), &b.covariance())
}

/// Mean squared displacement `E|x0 - T(x0)|^2` of a row-aligned map.
pub fn avg_transport_cost(x0s: &SampleBatch, translated: &SampleBatch) -> Result<f64> {
    same_dim(x0s, translated)?;
    if x0s.len() != translated.len() {
        return Err(Error::InvalidBatch(format!(
            "row counts differ: {} vs {}",
            x0s.len(),
            translated.len()
        )));
    }
    let s: f64 = x0s.rows().zip(translated.rows()).map(|(a, b)| dist(a, b).powi(2)).sum();
    Ok(s / x0s.len() as f64)
}

/// Metric columns in report order.
pub const METRIC_NAMES: [&str; 4] = ["energy", "sliced_w2", "frechet", "transport_cost"];

/// Number of projections used by [`evaluate`].
pub const EVAL_PROJECTIONS: usize = 128;

/// Identifies one run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunId {
    pub method: String,
    pub nfe: usize,
    pub omega: f64,
    pub seed: u64,
    /// Disabled components, `none` for the full method.
    pub ablation: String,
}

impl RunId {
    pub fn new(method: &str, nfe: usize, omega: f64, seed: u64, ablation: &str) -> Self {
        RunId {
            method: method.into(),
            nfe,
            omega,
            seed,
            ablation: ablation.into(),
        }
    }
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run: RunId,
    pub n_translated: usize,
    pub n_reference: usize,
    /// Values in [`METRIC_NAMES`] order; `None` when the run failed.
    pub values: Option<[f64; 4]>,
    pub status: String,
}

impl EvalReport {
    pub fn csv_header() -> String {
        let mut h = String::from("method,nfe,omega,seed,ablation,n_translated,n_reference");
        for m in METRIC_NAMES {
            h.push(',');
            h.push_str(m);
        }
        h.push_str(",status");
        h
    }

    pub fn csv_row(&self) -> String {
        let id = &self.run;
        let mut r = format!(
            "{},{},{},{},{},{},{}",
            id.method, id.nfe, id.omega, id.seed, id.ablation, self.n_translated, self.n_reference
        );
        match &self.values {
            Some(v) => v.iter().for_each(|x| r.push_str(&format!(",{x}"))),
            None => r.push_str(&",NaN".repeat(METRIC_NAMES.len())),
        }
        r.push(',');
        r.push_str(&self.status.replace([',', '\n'], ";"));
        r
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        let i = METRIC_NAMES.iter().position(|m| *m == name)?;
        self.values.map(|v| v[i])
    }

    pub fn failed(run: RunId, err: &Error) -> Self {
        EvalReport {
            run,
            n_translated: 0,
            n_reference: 0,
            values: None,
            status: format!("error: {err}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.values.is_some()
    }
}

/// All metrics of a translation `source -> translated` against `reference`.
/// The sliced distance uses the run seed for its projections.
pub fn evaluate(run: RunId, source: &SampleBatch, translated: &SampleBatch, reference: &SampleBatch) -> Result<EvalReport> {
    let values = [
        energy_distance(translated, reference)?,
        sliced_wasserstein(translated, reference, EVAL_PROJECTIONS, run.seed)?,
        gaussian_frechet(translated, reference)?,
        avg_transport_cost(source, translated)?,
    ];
    Ok(EvalReport {
        run,
        n_translated: translated.len(),
        n_reference: reference.len(),
        values: Some(values),
        status: "ok".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::gen_toy;
    use proptest::prelude::*;

    fn b(rows: &[&[f64]]) -> SampleBatch {
        SampleBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn energy_examples() {
        let a = gen_toy("two-moons", 50, 1).unwrap();
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let v = energy_distance(&b(&[&[0.0, 0.0]]), &b(&[&[0.6, 0.8]])).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        let p = gen_toy("gaussian(0,0)", 1000, 1).unwrap();
        let q = gen_toy("gaussian(0,0)", 1000, 2).unwrap();
        let r = gen_toy("gaussian(3,0)", 1000, 3).unwrap();
        assert!(energy_distance(&p, &q).unwrap() <= energy_distance(&p, &r).unwrap());
        assert!(energy_distance(&p, &b(&[&[0.0]])).is_err());
    }

    #[test]
    fn sliced_examples() {
        let a = gen_toy("checkerboard", 80, 1).unwrap();
        assert_eq!(sliced_wasserstein(&a, &a, 16, 3).unwrap(), 0.0);
        let x = SampleBatch::new(1, vec![0.3, -1.0, 2.5, 0.0]).unwrap();
        let y = SampleBatch::new(1, x.as_slice().iter().map(|v| v + 1.7).collect()).unwrap();
        assert!((sliced_wasserstein(&x, &y, 5, 1).unwrap() - 1.7).abs() < 1e-8);
        assert!(sliced_wasserstein(&x, &y, 0, 1).is_err());
        let s1 = sliced_wasserstein(&a, &x, 1, 1);
        assert!(s1.is_err());
    }

    #[test]
    fn quantile_merge_unequal_sizes() {
        // {0, 1} vs {0, 0, 3}: quantiles on [0,1/3) 0-0, [1/3,1/2) 0-0,
        // [1/2,2/3) 1-0, [2/3,1) 1-3
        let w = w2_sq_sorted(&[0.0, 1.0], &[0.0, 0.0, 3.0]);
        assert!((w - (1.0 / 6.0 + 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn sliced_rotation_invariance() {
        let a = gen_toy("two-moons", 400, 1).unwrap();
        let c = gen_toy("eight-gaussians", 400, 2).unwrap();
        let th: f64 = 0.7;
        let rot = |s: &SampleBatch| {
            let rows: Vec<[f64; 2]> = s
                .rows()
                .map(|r| [th.cos() * r[0] - th.sin() * r[1], th.sin() * r[0] + th.cos() * r[1]])
                .collect();
            SampleBatch::from_rows(&rows).unwrap()
        };
        let d0 = sliced_wasserstein(&a, &c, 512, 4).unwrap();
        let d1 = sliced_wasserstein(&rot(&a), &rot(&c), 512, 5).unwrap();
        assert!((d0 / d1 - 1.0).abs() < 0.05, "{d0} {d1}");
    }

    #[test]
    fn frechet_examples() {
        let a = gen_toy("two-moons", 100, 1).unwrap();
        assert!(gaussian_frechet(&a, &a).unwrap() < 1e-8);
        let v = gaussian_frechet_moments(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = gaussian_frechet_moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        // non-commuting covariances against the scalar closed form in 2D:
        // tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))
        let (ca, cb): ([f64; 4], [f64; 4]) = ([2.0, 0.5, 0.5, 1.0], [1.0, -0.3, -0.3, 0.5]);
        let prod = [
            ca[0] * cb[0] + ca[1] * cb[2],
            ca[0] * cb[1] + ca[1] * cb[3],
            ca[2] * cb[0] + ca[3] * cb[2],
            ca[2] * cb[1] + ca[3] * cb[3],
        ];
        let det = prod[0] * prod[3] - prod[1] * prod[2];
        let tr_sqrt = (prod[0] + prod[3] + 2.0 * det.sqrt()).sqrt();
        let want = 3.0 + 1.5 - 2.0 * tr_sqrt;
        let got = gaussian_frechet_moments(&[0.0, 0.0], &ca, &[0.0, 0.0], &cb).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} {want}");
        assert!(gaussian_frechet(&b(&[&[0.0, 0.0], &[1.0, 1.0]]), &a).is_err());
    }

    #[test]
    fn transport_examples() {
        let a = gen_toy("swiss-roll-2d", 30, 1).unwrap();
        assert_eq!(avg_transport_cost(&a, &a).unwrap(), 0.0);
        let shifted = SampleBatch::from_rows(&a.rows().map(|r| [r[0] + 3.0, r[1] + 4.0]).collect::<Vec<_>>()).unwrap();
        assert!((avg_transport_cost(&a, &shifted).unwrap() - 25.0).abs() < 1e-12);
        assert!(avg_transport_cost(&a, &a.slice(0..10).unwrap()).is_err());
    }

    #[test]
    fn report_row_shape() {
        let a = gen_toy("two-moons", 40, 1).unwrap();
        let c = gen_toy("eight-gaussians", 40, 2).unwrap();
        let id = RunId::new("lsb", 8, 1.5, 3, "none");
        let r = evaluate(id.clone(), &a, &c, &a).unwrap();
        assert_eq!(r.csv_row().split(',').count(), EvalReport::csv_header().split(',').count());
        assert!(r.metric("frechet").unwrap() > 0.0);
        assert_eq!(r, evaluate(id, &a, &c, &a).unwrap());
        let f = EvalReport::failed(RunId::new("sdedit", 3, 1.0, 1, "none"), &Error::param("x, y"));
        assert!(!f.is_ok());
        assert_eq!(f.csv_row().split(',').count(), EvalReport::csv_header().split(',').count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = gen_toy("gaussian(0,0)", 30, s1).unwrap();
            let c = gen_toy("gaussian(1,0;2)", 25, s2).unwrap();
            let e = energy_distance(&a, &c).unwrap();
            prop_assert!(e >= 0.0);
            prop_assert!((e - energy_distance(&c, &a).unwrap()).abs() < 1e-12);
            let w = sliced_wasserstein(&a, &c, 8, 1).unwrap();
            prop_assert!((w - sliced_wasserstein(&c, &a, 8, 1).unwrap()).abs() < 1e-12);
            let f = gaussian_frechet(&a, &c).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert!((f - gaussian_frechet(&c, &a).unwrap()).abs() < 1e-9);
        }
    }
}
