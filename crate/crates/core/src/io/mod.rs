//! File formats: XYZ point clouds, binary checkpoints and CSV loss curves.

pub mod checkpoint;
pub mod curve;
pub mod xyz;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use curve::{read_curve, write_curve};
pub use xyz::{read_cloud, write_cloud};

/// Decimal rendering of `x` with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    // The exponent after rounding to `digits` places, so 9.99… → 10.0 is handled.
    let sci = format!("{x:.prec$e}", prec = digits.saturating_sub(1));
    let exponent: i64 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (digits as i64 - 1 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}
