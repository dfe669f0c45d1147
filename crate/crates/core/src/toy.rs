//! Seeded two-dimensional toy distributions.
//!
//! Dataset ids:
//!
//! | id | distribution |
//! |----|--------------|
//! | `eight-gaussians` | eight isotropic Gaussians (std 0.2) on the circle of radius 2 |
//! | `two-moons` | interleaved half circles, centered and scaled by 1.5, clipped jitter |
//! | `checkerboard` | uniform on the dark squares of a 4x4 board over `[-2, 2]^2` |
//! | `swiss-roll-2d` | planar spiral, radius below 3 |
//! | `gaussian(m1,..,md)` | `N(m, I)` |
//! | `gaussian(m1,..,md;v)` | `N(m, v I)` |
//! | `gaussian(m1,m2;s11,s12,s22)` | `N(m, S)` with a full 2x2 covariance |
//! | `gmm(s;x1,y1;x2,y2;..)` | equal-weight mixture of `N(c_k, s^2 I)` |
//!
//! Row `i` of a generated batch only depends on `(id, seed, i)`, so a batch
//! of `n` points is a prefix of any larger batch with the same seed.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{standard_normal, RootSeed};
use crate::{Error, Result, SampleBatch};

/// A finite Gaussian mixture with full covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
    chols: Vec<Vec<f64>>,
}

impl GaussianMixture {
    /// Weights are normalised; covariances are row-major `d x d` and must be
    /// symmetric positive definite.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::param("mixture needs matching, nonempty weights/means/covariances"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::param("mixture dimension must be at least 1"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::param("mixture weights must be nonnegative with positive sum"));
        }
        let mut chols = Vec::with_capacity(k);
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.len() });
            }
            if c.len() != d * d {
                return Err(Error::DimensionMismatch { expected: d * d, got: c.len() });
            }
            let l = cholesky(c, d).ok_or_else(|| {
                Error::param("mixture covariance is not symmetric positive definite")
            })?;
            chols.push(l);
        }
        Ok(GaussianMixture {
            d,
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            covs,
            chols,
        })
    }

    pub fn single(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        GaussianMixture::single(mean, scaled_identity(d, var))
    }

    pub fn standard(d: usize) -> Self {
        GaussianMixture::isotropic(vec![0.0; d], 1.0).expect("identity covariance")
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn cov(&self, k: usize) -> &[f64] {
        &self.covs[k]
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = standard_normal(rng, self.d);
        let l = &self.chols[k];
        (0..self.d)
            .map(|a| self.means[k][a] + (0..=a).map(|b| l[a * self.d + b] * z[b]).sum::<f64>())
            .collect()
    }
}

pub(crate) fn scaled_identity(d: usize, v: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for a in 0..d {
        m[a * d + a] = v;
    }
    m
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn cholesky(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..=a {
            if (m[a * d + b] - m[b * d + a]).abs() > 1e-12 * (1.0 + m[a * d + b].abs()) {
                return None;
            }
            let s: f64 = (0..b).map(|k| l[a * d + k] * l[b * d + k]).sum();
            if a == b {
                let v = m[a * d + a] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[a * d + a] = v.sqrt();
            } else {
                l[a * d + b] = (m[a * d + b] - s) / l[b * d + b];
            }
        }
    }
    Some(l)
}

/// A parsed dataset id.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    EightGaussians,
    TwoMoons,
    Checkerboard,
    SwissRoll2d,
    Mixture(GaussianMixture),
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Mixture(m) => m.dim(),
            _ => 2,
        }
    }

    /// The exact Gaussian-mixture law, when the dataset has one.
    pub fn as_mixture(&self) -> Option<GaussianMixture> {
        match self {
            DatasetSpec::Mixture(m) => Some(m.clone()),
            DatasetSpec::EightGaussians => {
                let means = (0..8)
                    .map(|k| {
                        let a = k as f64 * PI / 4.0;
                        vec![2.0 * a.cos(), 2.0 * a.sin()]
                    })
                    .collect();
                let covs = vec![scaled_identity(2, 0.04); 8];
                GaussianMixture::new(vec![1.0; 8], means, covs).ok()
            }
            _ => None,
        }
    }

    fn sample_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            DatasetSpec::Mixture(m) => m.sample_one(rng),
            DatasetSpec::EightGaussians => {
                let k = rng.random_range(0..8);
                let a = k as f64 * PI / 4.0;
                let z = standard_normal(rng, 2);
                vec![2.0 * a.cos() + 0.2 * z[0], 2.0 * a.sin() + 0.2 * z[1]]
            }
            DatasetSpec::TwoMoons => {
                let theta = rng.random_range(0.0..PI);
                let (x, y) = if rng.random::<bool>() {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let jitter = |rng: &mut _| clipped_normal(rng, 0.1, 3.0);
                vec![1.5 * (x - 0.5) + jitter(rng), 1.5 * (y - 0.25) + jitter(rng)]
            }
            DatasetSpec::Checkerboard => {
                let x: f64 = rng.random_range(-2.0..2.0);
                let offset = if rng.random::<bool>() { 0.0 } else { -2.0 };
                let y: f64 = rng.random_range(0.0..1.0) + offset + (x.floor().rem_euclid(2.0));
                vec![x, y]
            }
            DatasetSpec::SwissRoll2d => {
                let u: f64 = rng.random();
                let t = 1.5 * PI * (1.0 + 2.0 * u);
                let jitter = |rng: &mut _| clipped_normal(rng, 0.05, 2.0);
                vec![t * t.cos() / 5.0 + jitter(rng), t * t.sin() / 5.0 + jitter(rng)]
            }
        }
    }
}

fn clipped_normal(rng: &mut impl Rng, std: f64, clip: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z.clamp(-clip, clip)
}

fn parse_numbers(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim();
        let unknown = || Error::UnknownDataset(id.to_string());
        let malformed = |detail: String| Error::Format {
            what: "dataset id",
            detail: format!("{id}: {detail}"),
        };
        match id {
            "eight-gaussians" => return Ok(DatasetSpec::EightGaussians),
            "two-moons" => return Ok(DatasetSpec::TwoMoons),
            "checkerboard" => return Ok(DatasetSpec::Checkerboard),
            "swiss-roll-2d" => return Ok(DatasetSpec::SwissRoll2d),
            _ => {}
        }
        let (head, rest) = id.split_once('(').ok_or_else(unknown)?;
        let body = rest.strip_suffix(')').ok_or_else(unknown)?;
        let parts: Vec<&str> = body.split(';').collect();
        match head.trim() {
            "gaussian" => {
                let mean = parse_numbers(parts[0]).map_err(malformed)?;
                let d = mean.len();
                let mix = match parts.len() {
                    1 => GaussianMixture::isotropic(mean, 1.0),
                    2 => {
                        let c = parse_numbers(parts[1]).map_err(malformed)?;
                        match c.as_slice() {
                            [v] => GaussianMixture::isotropic(mean, *v),
                            [a, b, e] if d == 2 => GaussianMixture::single(mean, vec![*a, *b, *b, *e]),
                            _ => return Err(malformed("covariance must be `v` or `s11,s12,s22`".into())),
                        }
                    }
                    _ => return Err(malformed("expected `gaussian(mean[;cov])`".into())),
                };
                Ok(DatasetSpec::Mixture(mix?))
            }
            "gmm" => {
                if parts.len() < 2 {
                    return Err(malformed("expected `gmm(std;center;...)`".into()));
                }
                let std = parts[0].trim().parse::<f64>().map_err(|e| malformed(e.to_string()))?;
                let means = parts[1..]
                    .iter()
                    .map(|p| parse_numbers(p))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(malformed)?;
                let d = means[0].len();
                let k = means.len();
                Ok(DatasetSpec::Mixture(GaussianMixture::new(
                    vec![1.0; k],
                    means,
                    vec![scaled_identity(d, std * std); k],
                )?))
            }
            _ => Err(unknown()),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::EightGaussians => f.write_str("eight-gaussians"),
            DatasetSpec::TwoMoons => f.write_str("two-moons"),
            DatasetSpec::Checkerboard => f.write_str("checkerboard"),
            DatasetSpec::SwissRoll2d => f.write_str("swiss-roll-2d"),
            DatasetSpec::Mixture(m) => write!(f, "mixture({} components, d={})", m.components(), m.dim()),
        }
    }
}

/// Draw `n` points of dataset `name` with the given seed.
pub fn gen_toy(name: &str, n: usize, seed: u64) -> Result<SampleBatch> {
    let spec: DatasetSpec = name.parse()?;
    sample(&spec, n, seed)
}

pub fn sample(spec: &DatasetSpec, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    let root = RootSeed(seed);
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut rng = root.stream("toy", i as u64);
        data.extend(spec.sample_one(&mut rng));
    }
    SampleBatch::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_gaussian_mean() {
        let b = gen_toy("gaussian(0,0)", 10_000, 1).unwrap();
        for m in b.mean() {
            assert!(m.abs() < 0.05, "mean {m}");
        }
        let c = b.covariance();
        assert!((c[0] - 1.0).abs() < 0.05 && (c[3] - 1.0).abs() < 0.05 && c[1].abs() < 0.05);
    }

    #[test]
    fn eight_gaussians_shape() {
        let b = gen_toy("eight-gaussians", 8, 42).unwrap();
        assert_eq!((b.len(), b.dim()), (8, 2));
        assert!(b.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bounded_generators() {
        for (name, r) in [("two-moons", 3.0), ("checkerboard", 8f64.sqrt()), ("swiss-roll-2d", 3.0)] {
            let b = gen_toy(name, 1000, 3).unwrap();
            for p in b.rows() {
                assert!(p[0].hypot(p[1]) <= r + 1e-12, "{name}: {p:?}");
            }
        }
    }

    #[test]
    fn checkerboard_squares() {
        let b = gen_toy("checkerboard", 2000, 5).unwrap();
        for p in b.rows() {
            let parity = (p[0].floor() + p[1].floor()).rem_euclid(2.0);
            assert_eq!(parity, 0.0, "{p:?}");
        }
    }

    #[test]
    fn determinism_and_prefix() {
        let a = gen_toy("two-moons", 50, 9).unwrap();
        let b = gen_toy("two-moons", 50, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_toy("two-moons", 80, 9).unwrap();
        assert_eq!(a.as_slice(), &c.as_slice()[..100]);
        assert_ne!(a, gen_toy("two-moons", 50, 10).unwrap());
    }

    #[test]
    fn parse_ids() {
        assert!(matches!(gen_toy("nope", 5, 0), Err(Error::UnknownDataset(_))));
        assert!(gen_toy("gaussian(1,2;0.5)", 5, 0).is_ok());
        assert!(gen_toy("gaussian(1,2;1,0.3,1)", 5, 0).is_ok());
        assert!(gen_toy("gaussian(1,2;1,3,1)", 5, 0).is_err());
        assert!(gen_toy("gaussian(1,x)", 5, 0).is_err());
        let g: DatasetSpec = "gmm(0.3;-3,1;-3,-1)".parse().unwrap();
        let m = g.as_mixture().unwrap();
        assert_eq!(m.components(), 2);
        assert_eq!(m.mean(1), &[-3.0, -1.0]);
        assert!((m.cov(0)[0] - 0.09).abs() < 1e-15);
        assert!(gen_toy("eight-gaussians", 0, 0).is_err());
    }

    #[test]
    fn full_covariance_sampling() {
        let b = gen_toy("gaussian(1,-1;2,0.8,1)", 40_000, 11).unwrap();
        let c = b.covariance();
        assert!((c[0] - 2.0).abs() < 0.06, "{c:?}");
        assert!((c[1] - 0.8).abs() < 0.04, "{c:?}");
        assert!((c[3] - 1.0).abs() < 0.04, "{c:?}");
    }
}
