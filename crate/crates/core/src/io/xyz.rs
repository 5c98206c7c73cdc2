use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::fmt_sig;

/// Parses `x y z` lines; blank lines and lines starting with `#` are skipped.
pub fn parse_cloud<S: Scalar>(text: &str, path: &Path) -> Result<PointCloud<S>> {
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| err(format!("invalid number {f:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite coordinate {f:?}")));
            }
            data.push(S::lit(v));
        }
    }
    if data.is_empty() {
        return Err(Error::Empty(format!("{}: no points", path.display())));
    }
    PointCloud::new(Tensor::from_vec(&[data.len() / 3, 3], data))
}

pub fn read_cloud<S: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<S>> {
    let path = path.as_ref();
    parse_cloud(&fs::read_to_string(path)?, path)
}

/// Valid points only, 9 significant digits per coordinate.
pub fn format_cloud<S: Scalar>(cloud: &PointCloud<S>) -> String {
    let mut out = String::new();
    for i in 0..cloud.valid_count() {
        let [x, y, z] = cloud.point(i).map(|v| fmt_sig(v.as_f64(), 9));
        writeln!(out, "{x} {y} {z}").expect("writing to a String");
    }
    out
}

pub fn write_cloud<S: Scalar>(path: impl AsRef<Path>, cloud: &PointCloud<S>) -> Result<()> {
    Ok(fs::write(path, format_cloud(cloud))?)
}
