//! Bit error models for quantized weights.
//!
//! * Random bit errors: a chip is a uniform field `u(i, j)` over the `m`
//!   stored bits of every weight; bit `j` of weight `i` flips iff
//!   `u(i, j) < p`. Lowering `p` only ever removes flips.
//! * Profiled bit errors: per-cell 0-to-1 / 1-to-0 flip probabilities of a
//!   measured memory array, with weights laid out linearly from an offset.
//! * Relative L-infinity noise on the float weights.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fixedpoint::{GroupRange, QuantizedTensor};
use crate::rng::{derive_seed, splitmix_at, threshold_53, unit_f64};

/// Bit positions per weight reserved in the counter space of a chip field.
/// Fixed at 8 so `u(i, j)` does not depend on the precision `m`.
const BIT_STRIDE: u64 = 8;

/// One realization of the per-bit uniform field of a memory chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChipField {
    seed: u64,
    weights: usize,
    bits: u8,
}

impl ChipField {
    pub fn new(seed: u64, weights: usize, bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::invalid(format!("bits per weight must be in [1, 8], got {bits}")));
        }
        Ok(Self { seed, weights, bits })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> usize {
        self.weights
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    #[inline(always)]
    fn raw(&self, i: usize, j: u8) -> u64 {
        splitmix_at(self.seed, i as u64 * BIT_STRIDE + j as u64)
    }

    /// `u(i, j)` in `[0, 1)`.
    pub fn u(&self, i: usize, j: u8) -> f64 {
        unit_f64(self.raw(i, j))
    }

    /// Bits of weight `i` that are in error at rate `p`.
    #[inline]
    pub fn flip_mask(&self, i: usize, p: f64) -> u8 {
        self.flip_mask_with_threshold(i, threshold_53(p))
    }

    #[inline(always)]
    fn flip_mask_with_threshold(&self, i: usize, t: u64) -> u8 {
        let mut mask = 0u8;
        for j in 0..self.bits {
            if (self.raw(i, j) >> 11) < t {
                mask |= 1 << j;
            }
        }
        mask
    }
}

/// A panel of `count` chips whose seeds depend only on `(master_seed, c)`.
pub fn sample_chips(master_seed: u64, count: usize, weights: usize, bits: u8) -> Result<Vec<ChipField>> {
    if count == 0 {
        return Err(Error::invalid("a chip panel needs at least one chip"));
    }
    (0..count)
        .map(|c| ChipField::new(derive_seed(master_seed, c as u64), weights, bits))
        .collect()
}

/// Counts produced by one random injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionReport {
    pub flipped_bits: u64,
    /// `p * m * W`.
    pub expected_flips: f64,
    pub affected_weights: u64,
}

impl InjectionReport {
    /// Whether the flip count lies within 4 binomial standard deviations.
    pub fn within_binomial(&self, p: f64, cells: u64) -> bool {
        let sigma = (p * (1.0 - p) * cells as f64).sqrt();
        (self.flipped_bits as f64 - self.expected_flips).abs() <= 4.0 * sigma
    }
}

pub fn expected_flips(p: f64, bits: u8, weights: usize) -> f64 {
    p * bits as f64 * weights as f64
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("bit error rate must be in [0, 1], got {p}")));
    }
    Ok(())
}

/// Flip the bits of `codes` that are in error on `chip` at rate `p`.
pub fn inject_random_in_place(codes: &mut [u8], chip: &ChipField, p: f64) -> Result<InjectionReport> {
    check_probability(p)?;
    if chip.weights != codes.len() {
        return Err(Error::DimensionMismatch {
            what: "chip field weight count",
            expected: codes.len(),
            found: chip.weights,
        });
    }
    let mut flipped = 0u64;
    let mut affected = 0u64;
    if p > 0.0 {
        let t = threshold_53(p);
        for (i, c) in codes.iter_mut().enumerate() {
            let mask = chip.flip_mask_with_threshold(i, t);
            if mask != 0 {
                *c ^= mask;
                flipped += mask.count_ones() as u64;
                affected += 1;
            }
        }
    }
    Ok(InjectionReport {
        flipped_bits: flipped,
        expected_flips: expected_flips(p, chip.bits, codes.len()),
        affected_weights: affected,
    })
}

/// Random bit error injection into a copy of `codes`.
pub fn inject_random(codes: &QuantizedTensor, chip: &ChipField, p: f64) -> Result<(QuantizedTensor, InjectionReport)> {
    let m = codes.scheme().precision();
    if chip.bits != m {
        return Err(Error::DimensionMismatch {
            what: "chip field bits per weight",
            expected: m as usize,
            found: chip.bits as usize,
        });
    }
    let mut out = codes.clone();
    let report = inject_random_in_place(out.codes_mut(), chip, p)?;
    Ok((out, report))
}

/// Measured per-cell flip probabilities of a memory array.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledMap {
    rows: usize,
    cols: usize,
    p01: Vec<f64>,
    p10: Vec<f64>,
    label: String,
}

impl ProfiledMap {
    pub fn new(rows: usize, cols: usize, p01: Vec<f64>, p10: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("profiled map needs a positive size"))?;
        for (name, v) in [("p01", &p01), ("p10", &p10)] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "profiled map probabilities",
                    expected: n,
                    found: v.len(),
                });
            }
            if let Some(k) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::format(
                    "profiled map",
                    format!("{name}[{k}] = {} is not a probability", v[k]),
                ));
            }
        }
        Ok(Self {
            rows,
            cols,
            p01,
            p10,
            label: label.into(),
        })
    }

    /// A map without any faulty cell.
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        let n = rows * cols;
        Self::new(rows, cols, vec![0.0; n], vec![0.0; n], "zero")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn p01(&self) -> &[f64] {
        &self.p01
    }
    pub fn p10(&self) -> &[f64] {
        &self.p10
    }

    pub fn set_cell(&mut self, k: usize, p01: f64, p10: f64) -> Result<()> {
        if k >= self.cells() {
            return Err(Error::invalid(format!(
                "cell {k} outside a map of {} cells",
                self.cells()
            )));
        }
        if !(0.0..=1.0).contains(&p01) || !(0.0..=1.0).contains(&p10) {
            return Err(Error::invalid("flip probabilities must lie in [0, 1]"));
        }
        self.p01[k] = p01;
        self.p10[k] = p10;
        Ok(())
    }

    /// Mean flip probability over cells, assuming equally likely stored bits.
    pub fn mean_rate(&self) -> f64 {
        let s: f64 = self.p01.iter().zip(&self.p10).map(|(a, b)| 0.5 * (a + b)).sum();
        s / self.cells() as f64
    }

    /// Parse the text format: `rows cols`, then `rows * cols` lines of
    /// `p01 p10` in row-major order. `#` lines and blank lines are skipped.
    pub fn parse<R: BufRead>(reader: R, label: impl Into<String>) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter_map(|(n, l)| match l {
            Ok(s) => {
                let t = s.trim();
                if t.is_empty() || t.starts_with('#') {
                    None
                } else {
                    Some(Ok((n + 1, t.to_owned())))
                }
            }
            Err(e) => Some(Err(e)),
        });
        let (n, header) = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format("profiled map", "missing `rows cols` header"))?;
        let dims = parse_floats::<usize>(&header, n)?;
        let [rows, cols] = dims[..] else {
            return Err(Error::format("profiled map", format!("line {n}: expected `rows cols`")));
        };
        let cells = rows * cols;
        let mut p01 = Vec::with_capacity(cells);
        let mut p10 = Vec::with_capacity(cells);
        for line in lines {
            let (n, text) = line?;
            let v = parse_floats::<f64>(&text, n)?;
            let [a, b] = v[..] else {
                return Err(Error::format("profiled map", format!("line {n}: expected `p01 p10`")));
            };
            if a.is_nan() || b.is_nan() {
                return Err(Error::format("profiled map", format!("line {n}: NaN probability")));
            }
            p01.push(a);
            p10.push(b);
        }
        if p01.len() != cells {
            return Err(Error::format(
                "profiled map",
                format!("expected {cells} cell lines, found {}", p01.len()),
            ));
        }
        Self::new(rows, cols, p01, p10, label)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(std::io::BufReader::new(file), label)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.label);
        let _ = writeln!(s, "{} {}", self.rows, self.cols);
        for (a, b) in self.p01.iter().zip(&self.p10) {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }
}

fn parse_floats<T: std::str::FromStr>(line: &str, n: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<T>()
                .map_err(|_| Error::format("profiled map", format!("line {n}: cannot parse `{tok}`")))
        })
        .collect()
}

/// Memory cell holding bit `j` of weight `i` under a linear row-major layout.
#[inline]
pub fn cell_index(offset: usize, i: usize, bits: u8, j: u8, cells: usize) -> usize {
    ((offset as u128 + i as u128 * bits as u128 + j as u128) % cells as u128) as usize
}

/// Replay a profiled map onto the codes.
///
/// Bit `j` of weight `i` lives in cell `(offset + i*m + j) mod cells`. Each
/// cell draws one uniform number from `sample_seed`; a stored 0 flips if it
/// is below `p01`, a stored 1 if it is below `p10`. The draw belongs to the
/// cell, so one `(map, sample_seed)` pair is one persistent chip instance.
pub fn inject_profiled(
    codes: &QuantizedTensor,
    map: &ProfiledMap,
    offset: usize,
    sample_seed: u64,
) -> Result<QuantizedTensor> {
    let cells = map.cells();
    if offset >= cells {
        return Err(Error::invalid(format!(
            "offset {offset} outside a map of {cells} cells"
        )));
    }
    let m = codes.scheme().precision();
    let mut out = codes.clone();
    for (i, c) in out.codes_mut().iter_mut().enumerate() {
        let mut mask = 0u8;
        for j in 0..m {
            let k = cell_index(offset, i, m, j, cells);
            let prob = if (*c >> j) & 1 == 0 { map.p01[k] } else { map.p10[k] };
            if prob > 0.0 && unit_f64(splitmix_at(sample_seed, k as u64)) < prob {
                mask |= 1 << j;
            }
        }
        *c ^= mask;
    }
    Ok(out)
}

/// Add uniform noise in `[-eps_rel * R, eps_rel * R]` to every weight, `R`
/// being the value range `max - min` of the weight's group.
pub fn inject_linf(weights: &[f64], groups: &[GroupRange], eps_rel: f64, seed: u64) -> Result<Vec<f64>> {
    if !(eps_rel >= 0.0 && eps_rel.is_finite()) {
        return Err(Error::invalid(format!(
            "relative noise level must be >= 0, got {eps_rel}"
        )));
    }
    crate::fixedpoint::check_partition(groups, weights.len())?;
    let mut out = weights.to_vec();
    if eps_rel == 0.0 {
        return Ok(out);
    }
    for r in groups {
        let g = &mut out[r.clone()];
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let amp = eps_rel * (hi - lo);
        for (w, i) in g.iter_mut().zip(r.clone()) {
            let u = unit_f64(splitmix_at(seed, i as u64));
            *w += amp * (2.0 * u - 1.0);
        }
    }
    Ok(out)
}
