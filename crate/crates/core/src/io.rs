//! Point CSV files: a header row `x0,x1,...` followed by one point per row.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! writing then reading a batch is lossless and reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result, SampleBatch};

pub fn points_to_csv(batch: &SampleBatch) -> String {
    let mut out = String::with_capacity(batch.len() * batch.dim() * 20);
    let header: Vec<String> = (0..batch.dim()).map(|k| format!("x{k}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in batch.rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn points_from_csv(text: &str) -> Result<SampleBatch> {
    let mut d = None;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            // header row
            Err(_) if d.is_none() && data.is_empty() => {
                d = Some(fields.len());
                continue;
            }
            Err(e) => {
                return Err(Error::Format {
                    what: "point csv",
                    detail: format!("line {}: {e}", lineno + 1),
                })
            }
        };
        let width = *d.get_or_insert(values.len());
        if values.len() != width {
            return Err(Error::Format {
                what: "point csv",
                detail: format!("line {}: {} columns, expected {width}", lineno + 1, values.len()),
            });
        }
        data.extend(values);
    }
    let d = d.ok_or_else(|| Error::Format {
        what: "point csv",
        detail: "no rows".into(),
    })?;
    SampleBatch::new(d, data)
}

pub fn write_points(path: &Path, batch: &SampleBatch) -> Result<()> {
    write_text(path, &points_to_csv(batch))
}

pub fn read_points(path: &Path) -> Result<SampleBatch> {
    points_from_csv(&read_text(path)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a binary file body.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format {
                what: self.what,
                detail: "unexpected end of file".into(),
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len())? != magic {
            return Err(Error::Format {
                what: self.what,
                detail: "bad magic".into(),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if !self.buf.is_empty() {
            return Err(Error::Format {
                what: self.what,
                detail: format!("{} trailing bytes", self.buf.len()),
            });
        }
        Ok(())
    }
}
