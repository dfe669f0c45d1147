use crate::{Error, Result};

/// An `n x d` row-major block of finite points drawn from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl SampleBatch {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidBatch("dimension must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        if !data.len().is_multiple_of(d) {
            return Err(Error::InvalidBatch(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch(format!(
                "non-finite entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        let n = data.len() / d;
        Ok(SampleBatch { data, n, d })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::InvalidBatch(format!(
                    "row {i} has {} entries, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        SampleBatch::new(d, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        SampleBatch::new(self.d, self.data[range.start * self.d..range.end * self.d].to_vec())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }

    /// Unbiased sample covariance, row-major `d x d`. Requires `n >= 2`.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.mean();
        let d = self.d;
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for a in 0..d {
                let da = r[a] - m[a];
                for b in a..d {
                    c[a * d + b] += da * (r[b] - m[b]);
                }
            }
        }
        let denom = (self.n.max(2) - 1) as f64;
        for a in 0..d {
            for b in a..d {
                c[a * d + b] /= denom;
                c[b * d + a] = c[a * d + b];
            }
        }
        c
    }

    pub(crate) fn check_dim(&self, other: &SampleBatch) -> Result<()> {
        other.expect_dim(self.d)
    }

    pub(crate) fn expect_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.d,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(SampleBatch::new(2, vec![]).is_err());
        assert!(SampleBatch::new(0, vec![1.0]).is_err());
        assert!(SampleBatch::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(SampleBatch::new(2, vec![1.0, f64::NAN]).is_err());
        assert!(SampleBatch::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn moments() {
        let b = SampleBatch::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.row(1), &[2.0, 3.0]);
        assert_eq!(b.mean(), vec![2.0, 3.0]);
        assert_eq!(b.covariance(), vec![4.0, 4.0, 4.0, 4.0]);
    }
}
