//! CSV outputs.
//!
//! Column and row order are fixed; metric floats in summaries use six
//! significant digits, per-image scores the shortest representation that
//! parses back to the same `f64`.

use std::path::Path;

use ddim_anomaly_core::metrics::EvalSummary;

use crate::error::{Error, Result};

pub const SWEEP_HEADER: [&str; 6] = ["s", "L", "mean_dice", "pixel_auroc", "image_auroc", "n_images"];
pub const EVAL_HEADER: [&str; 5] = ["mean_dice", "pixel_auroc", "image_auroc", "n_images", "n_diseased"];
pub const DETECTION_HEADER: [&str; 7] = ["index", "name", "label", "s", "L", "h", "score"];
pub const TIMING_HEADER: [&str; 4] = ["index", "name", "encode_seconds", "decode_seconds"];
pub const LOSS_HEADER: [&str; 3] = ["model", "iteration", "loss"];

/// `%.6g`-style formatting: six significant digits, trailing zeros removed,
/// scientific notation outside `[1e-4, 1e6)`.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (999999.5 -> 1e6).
    let exp = if format!("{:.5e}", x.abs()).ends_with(&format!("e{}", exp + 1)) {
        exp + 1
    } else {
        exp
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let s = format!("{x:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let e: i32 = e.parse().expect("exponent");
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Formats an optional metric; absent values are written as `NA`.
pub fn opt6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_else(|| "NA".into())
}

/// Parses a field written by [`opt6`].
pub fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("`{field}` is not a number")))
}

pub fn eval_row(summary: &EvalSummary) -> [String; 5] {
    [
        opt6(summary.mean_dice),
        opt6(summary.pixel_auroc),
        opt6(summary.image_auroc),
        summary.n_images.to_string(),
        summary.n_diseased.to_string(),
    ]
}

/// Writes `header` and `rows` to `path`, replacing any existing file.
pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e).in_file(path))?;
    w.write_record(header).map_err(|e| Error::Csv(e).in_file(path))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::Csv(e).in_file(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `path`, checking its header, and returns the data rows.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e).in_file(path))?;
    let found = r.headers().map_err(|e| Error::Csv(e).in_file(path))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Config(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            header
        )));
    }
    r.records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Csv(e).in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.684712345), "0.684712");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(0.0000123456789), "1.23457e-05");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(999999.5), "1e+06");
        assert_eq!(sig6(0.99999951), "1");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/out.csv");
        write_csv(&p, &["a", "b"], [["1", "NA"], ["2", "0.5"]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,NA\n2,0.5\n");
        let rows = read_csv(&p, &["a", "b"]).unwrap();
        assert_eq!(parse_opt(&rows[0][1]).unwrap(), None);
        assert_eq!(parse_opt(&rows[1][1]).unwrap(), Some(0.5));
        assert!(read_csv(&p, &["a", "c"]).is_err());
    }
}
