use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::EpochRecord;

use super::fmt_sig;

pub const CURVE_HEADER: &str = "epoch,train_cd,heldout_cd";

pub fn format_curve(curve: &[EpochRecord]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in curve {
        writeln!(out, "{},{},{}", r.epoch, fmt_sig(r.train_cd, 6), fmt_sig(r.heldout_cd, 6)).expect("writing to a String");
    }
    out
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[EpochRecord]) -> Result<()> {
    Ok(fs::write(path, format_curve(curve))?)
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: &str| Error::Parse { path: path.to_path_buf(), line, msg: msg.into() };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(err(1, "missing loss-curve header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 3 {
                return Err(err(i + 1, "expected 3 columns"));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| err(i + 1, "bad epoch"))?,
                train_cd: f[1].parse().map_err(|_| err(i + 1, "bad train_cd"))?,
                heldout_cd: f[2].parse().map_err(|_| err(i + 1, "bad heldout_cd"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let curve = vec![
            EpochRecord { epoch: 1, train_cd: 0.123456789, heldout_cd: 1.5 },
            EpochRecord { epoch: 2, train_cd: 0.0999999, heldout_cd: 0.75 },
        ];
        let text = format_curve(&curve);
        assert_eq!(text, "epoch,train_cd,heldout_cd\n1,0.123457,1.50000\n2,0.0999999,0.750000\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curve(&p, &curve).unwrap();
        let back = read_curve(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].train_cd - 0.123457).abs() < 1e-12);
    }
}
