//! Plain-text (P2) portable graymaps for eyeballing numeric grids.

use std::io::Write;

/// Writes `values` (row-major, `rows × cols`) as an 8-bit P2 graymap scaled so
/// the largest value maps to 255. An all-zero or empty grid is written black.
pub fn write_pgm(values: &[f64], rows: usize, cols: usize, mut out: impl Write) -> std::io::Result<()> {
    assert_eq!(values.len(), rows * cols, "grid size mismatch");
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    writeln!(out, "P2")?;
    writeln!(out, "{cols} {rows}")?;
    writeln!(out, "255")?;
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| if max > 0.0 && v.is_finite() { ((v.max(0.0) / max) * 255.0).round() as u8 } else { 0 })
            .map(|g| g.to_string())
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_normalized() {
        let mut buf = Vec::new();
        write_pgm(&[0.0, 1.0, 2.0, 4.0], 2, 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "P2\n2 2\n255\n0 64\n128 255\n");
    }
}
