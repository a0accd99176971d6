//! Plain-text and little-endian binary matrix formats.
//!
//! Text: first line `rows cols`, then one row per line of space-separated
//! values printed with 17 significant digits. Binary: `u64` rows, `u64`
//! cols, then `rows·cols` `f64`, all little-endian.

use std::io::{BufRead, Read, Write};

use super::Matrix;
use crate::error::{KasaError, Result};

/// Formats one value with 17 significant digits, enough to round-trip an `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_text<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<Matrix> {
    let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let header = lines
        .next()
        .ok_or_else(|| KasaError::Format("empty matrix file".into()))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| KasaError::Format(format!("bad header '{header}': {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(KasaError::Format(format!("header must be 'rows cols', got '{header}'")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| KasaError::Format(format!("missing row {i} of {rows}")))??;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| KasaError::Format(format!("row {i}: bad value '{tok}': {e}")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(KasaError::Format(format!(
                "row {i} has {} values, expected {cols}",
                data.len() - before
            )));
        }
    }
    if lines.next().is_some() {
        return Err(KasaError::Format("trailing rows after matrix".into()));
    }
    Matrix::new(rows, cols, data).map_err(|e| KasaError::Format(e.to_string()))
}

pub fn write_binary<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Matrix> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c > 0 && c <= (1 << 32))
        .ok_or_else(|| KasaError::Format(format!("implausible binary dims {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Matrix::new(rows, cols, data).map_err(|e| KasaError::Format(e.to_string()))
}

/// Reads either format, sniffing for a text header.
pub fn read_any(bytes: &[u8]) -> Result<Matrix> {
    let looks_text = bytes
        .iter()
        .take_while(|&&b| b != b'\n')
        .all(|b| b.is_ascii_digit() || *b == b' ' || *b == b'\r' || *b == b'\t');
    if looks_text && !bytes.is_empty() {
        read_text(bytes)
    } else {
        read_binary(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_and_binary_round_trip_bitwise(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-1e300f64..1e300, 36),
        ) {
            let m = Matrix::from_fn(rows, cols, |i, j| seed[i * 6 + j] * 1e-7f64.powi((i + j) as i32)).unwrap();
            let mut text = Vec::new();
            write_text(&m, &mut text).unwrap();
            let back = read_text(&text[..]).unwrap();
            prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let mut bin = Vec::new();
            write_binary(&m, &mut bin).unwrap();
            prop_assert_eq!(bin.len(), 16 + 8 * rows * cols);
            let back = read_binary(&bin[..]).unwrap();
            prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(read_any(&bin).unwrap(), m.clone());
            prop_assert_eq!(read_any(&text).unwrap(), m);
        }
    }

    #[test]
    fn malformed_text_is_rejected() {
        for bad in ["", "2\n1 2\n", "2 2\n1 2\n", "1 2\n1 x\n", "1 2\n1 2 3\n", "1 1\nnan\n", "1 1\n1\n2\n"] {
            assert!(read_text(bad.as_bytes()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let m = Matrix::identity(2).unwrap();
        let mut bin = Vec::new();
        write_binary(&m, &mut bin).unwrap();
        assert!(read_binary(&bin[..bin.len() - 1]).is_err());
    }
}
