//! Length-normalized sinusoidal positional encodings.
//!
//! Positions are normalized to `i / L` before entering the sinusoid, so a row
//! encodes *relative* progress through its sequence: row `i` of a length-`L`
//! table equals row `2i` of a length-`2L` table bit-for-bit. Entry `2t` of row
//! `i` is `sin(2π · (i/L) / 10000^(2t/D))` and entry `2t+1` is the matching
//! cosine.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Build the `length x dim` table of normalized sinusoidal encodings.
///
/// `dim` must be even. All entries lie in `[-1, 1]`.
pub fn normalized_pe<S: Scalar>(length: usize, dim: usize) -> Result<Array2<S>> {
    if length == 0 {
        return Err(Error::Config("positional encoding length must be ≥ 1".into()));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dim must be a positive even number, got {dim}"
        )));
    }
    // Per-pair angular scale: 2π / 10000^(2t/D). Computed once per column
    // pair, in f64, so identical relative positions give identical bits no
    // matter the sequence length.
    let scales: Vec<f64> = (0..dim / 2)
        .map(|t| std::f64::consts::TAU * 10000f64.powf(-2.0 * t as f64 / dim as f64))
        .collect();
    let mut table = Array2::zeros((length, dim));
    for i in 0..length {
        let rel = i as f64 / length as f64;
        for (t, &scale) in scales.iter().enumerate() {
            let angle = rel * scale;
            table[[i, 2 * t]] = S::from_real(angle.sin());
            table[[i, 2 * t + 1]] = S::from_real(angle.cos());
        }
    }
    Ok(table)
}

/// The relative-position row for element `index` of a length-`length` sequence.
///
/// Equals row `index` of [`normalized_pe`]`(length, dim)` without building the
/// whole table.
pub fn sprf<S: Scalar>(index: usize, length: usize, dim: usize) -> Result<Array1<S>> {
    if index >= length {
        return Err(Error::Config(format!(
            "position index {index} out of range for length {length}"
        )));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dim must be a positive even number, got {dim}"
        )));
    }
    let rel = index as f64 / length as f64;
    let mut row = Array1::zeros(dim);
    for t in 0..dim / 2 {
        let scale = std::f64::consts::TAU * 10000f64.powf(-2.0 * t as f64 / dim as f64);
        let angle = rel * scale;
        row[2 * t] = S::from_real(angle.sin());
        row[2 * t + 1] = S::from_real(angle.cos());
    }
    Ok(row)
}
