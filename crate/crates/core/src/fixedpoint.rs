//! Fixed-point quantization of weight groups into m-bit codes.
//!
//! Codes are always stored in `u8` words. Only the low `m` bits carry
//! information; the `8 - m` high bits are zero after quantization and are
//! ignored when decoding, so any byte decodes to a finite value.
//!
//! Symmetric ranges quantize `w` directly with step `qmax / (2^(m-1) - 1)`.
//! Asymmetric ranges first map `[qmin, qmax]` linearly onto `[-1, 1]` and
//! then quantize with `qmax = 1`. Signed codes are kept in two's complement;
//! unsigned codes add the offset `2^(m-1) - 1`.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Half-width used when every weight of a group has the same value.
pub const DEGENERATE_HALF_WIDTH: f64 = 1.0 / (1u32 << 24) as f64;

/// A contiguous index range of one weight group (a layer's weights or biases).
pub type GroupRange = Range<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One range shared by every group.
    Global,
    /// An independent range per group.
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RangeMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntegerRepr {
    SignedTwosComplement,
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rounding {
    /// Floor, as produced by a plain float-to-integer conversion.
    Truncate,
    /// Round half away from zero.
    RoundNearest,
}

/// A complete description of one quantization variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    precision: u8,
    granularity: Granularity,
    range_mode: RangeMode,
    integer_repr: IntegerRepr,
    rounding: Rounding,
}

impl QuantScheme {
    pub fn new(
        precision: u8,
        granularity: Granularity,
        range_mode: RangeMode,
        integer_repr: IntegerRepr,
        rounding: Rounding,
    ) -> Result<Self> {
        if !(2..=8).contains(&precision) {
            return Err(Error::InvalidScheme(format!(
                "precision must be in [2, 8], got {precision}"
            )));
        }
        if range_mode == RangeMode::Symmetric && integer_repr == IntegerRepr::Unsigned {
            return Err(Error::InvalidScheme(
                "unsigned codes require an asymmetric range".into(),
            ));
        }
        Ok(Self {
            precision,
            granularity,
            range_mode,
            integer_repr,
            rounding,
        })
    }

    /// Per-group symmetric signed quantization with truncation.
    pub fn normal(precision: u8) -> Result<Self> {
        Self::new(
            precision,
            Granularity::PerGroup,
            RangeMode::Symmetric,
            IntegerRepr::SignedTwosComplement,
            Rounding::Truncate,
        )
    }

    /// Per-group asymmetric unsigned quantization with rounding.
    pub fn rquant(precision: u8) -> Result<Self> {
        Self::new(
            precision,
            Granularity::PerGroup,
            RangeMode::Asymmetric,
            IntegerRepr::Unsigned,
            Rounding::RoundNearest,
        )
    }

    pub fn precision(&self) -> u8 {
        self.precision
    }
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }
    pub fn range_mode(&self) -> RangeMode {
        self.range_mode
    }
    pub fn integer_repr(&self) -> IntegerRepr {
        self.integer_repr
    }
    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    /// `2^(m-1) - 1`, the largest positive level.
    pub fn levels(&self) -> i32 {
        levels(self.precision)
    }

    /// Mask selecting the `m` stored bits of a code word.
    pub fn code_mask(&self) -> u8 {
        code_mask(self.precision)
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.granularity {
            Granularity::Global => "global",
            Granularity::PerGroup => "per-group",
        };
        let r = match self.range_mode {
            RangeMode::Symmetric => "sym",
            RangeMode::Asymmetric => "asym",
        };
        let i = match self.integer_repr {
            IntegerRepr::SignedTwosComplement => "signed",
            IntegerRepr::Unsigned => "unsigned",
        };
        let o = match self.rounding {
            Rounding::Truncate => "trunc",
            Rounding::RoundNearest => "round",
        };
        write!(f, "{g}/{r}/{i}/{o}")
    }
}

pub fn levels(precision: u8) -> i32 {
    (1i32 << (precision - 1)) - 1
}

pub fn code_mask(precision: u8) -> u8 {
    ((1u16 << precision) - 1) as u8
}

/// The fitted quantization range of one group, in weight units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub qmin: f64,
    pub qmax: f64,
}

impl QuantParams {
    /// Step size `Δ` of the integer grid. For asymmetric ranges this is the
    /// step of the normalized `[-1, 1]` range.
    pub fn delta(&self, scheme: &QuantScheme) -> f64 {
        match scheme.range_mode {
            RangeMode::Symmetric => self.qmax / scheme.levels() as f64,
            RangeMode::Asymmetric => 1.0 / scheme.levels() as f64,
        }
    }

    /// Distance between neighbouring decoded values, in weight units.
    pub fn step(&self, scheme: &QuantScheme) -> f64 {
        match scheme.range_mode {
            RangeMode::Symmetric => self.qmax / scheme.levels() as f64,
            RangeMode::Asymmetric => (self.qmax - self.qmin) / (2 * scheme.levels()) as f64,
        }
    }
}

/// Per-weight code words plus everything needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    params: Vec<QuantParams>,
    scheme: QuantScheme,
    groups: Vec<GroupRange>,
}

impl QuantizedTensor {
    /// Assemble a tensor from raw parts, validating group layout and masking.
    pub fn from_parts(
        codes: Vec<u8>,
        params: Vec<QuantParams>,
        scheme: QuantScheme,
        groups: Vec<GroupRange>,
    ) -> Result<Self> {
        check_partition(&groups, codes.len())?;
        if params.len() != groups.len() {
            return Err(Error::DimensionMismatch {
                what: "quantization parameter count",
                expected: groups.len(),
                found: params.len(),
            });
        }
        for (g, p) in params.iter().enumerate() {
            if !(p.qmin.is_finite() && p.qmax.is_finite() && p.qmin < p.qmax) {
                return Err(Error::InvalidArgument(format!(
                    "group {g} has an invalid range [{}, {}]",
                    p.qmin, p.qmax
                )));
            }
        }
        let mask = scheme.code_mask();
        if let Some(i) = codes.iter().position(|&c| c & !mask != 0) {
            return Err(Error::InvalidArgument(format!(
                "code {i} has bits set above the {}-bit precision",
                scheme.precision
            )));
        }
        Ok(Self {
            codes,
            params,
            scheme,
            groups,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Mutable access for in-place bit manipulation. Callers must keep the
    /// high `8 - m` bits clear.
    pub fn codes_mut(&mut self) -> &mut [u8] {
        &mut self.codes
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn groups(&self) -> &[GroupRange] {
        &self.groups
    }

    /// Number of quantized weights `W`.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Decode into a caller-provided buffer of length `W`.
    pub fn dequantize_into(&self, out: &mut [f64]) -> Result<()> {
        if out.len() != self.codes.len() {
            return Err(Error::DimensionMismatch {
                what: "dequantization buffer",
                expected: self.codes.len(),
                found: out.len(),
            });
        }
        for (range, params) in self.groups.iter().zip(&self.params) {
            let decoder = Decoder::new(params, &self.scheme);
            for (o, &c) in out[range.clone()].iter_mut().zip(&self.codes[range.clone()]) {
                *o = decoder.decode(c);
            }
        }
        Ok(())
    }
}

/// Check that `groups` tile `0..len` contiguously, in order, without gaps.
pub fn check_partition(groups: &[GroupRange], len: usize) -> Result<()> {
    let mut next = 0;
    for (g, r) in groups.iter().enumerate() {
        if r.start != next {
            return Err(Error::InvalidGroups(format!(
                "group {g} starts at {} but the previous group ended at {next}",
                r.start
            )));
        }
        if r.is_empty() {
            return Err(Error::EmptyGroup { group: g });
        }
        next = r.end;
    }
    if next != len {
        return Err(Error::InvalidGroups(format!(
            "groups cover {next} weights but {len} were given"
        )));
    }
    Ok(())
}

/// Fit a quantization range for every group.
///
/// Symmetric ranges use `qmax = max |w|`, asymmetric ranges `[min w, max w]`.
/// With global granularity all groups receive the range fitted over every
/// weight. A group whose values are all equal to `c` gets the half-width
/// `max(|c|, 2^-24)` around `c` (or around zero in symmetric mode).
pub fn fit_range(weights: &[f64], groups: &[GroupRange], scheme: &QuantScheme) -> Result<Vec<QuantParams>> {
    let mut stats = Vec::with_capacity(groups.len());
    for (g, r) in groups.iter().enumerate() {
        if r.is_empty() {
            return Err(Error::EmptyGroup { group: g });
        }
        if r.end > weights.len() {
            return Err(Error::InvalidGroups(format!(
                "group {g} ends at {} beyond {} weights",
                r.end,
                weights.len()
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &w) in weights[r.clone()].iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFiniteWeight {
                    group: g,
                    index: r.start + i,
                });
            }
            lo = lo.min(w);
            hi = hi.max(w);
        }
        stats.push((lo, hi));
    }
    if scheme.granularity == Granularity::Global && !stats.is_empty() {
        let lo = stats.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = stats.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        stats.iter_mut().for_each(|s| *s = (lo, hi));
    }
    Ok(stats
        .into_iter()
        .map(|(lo, hi)| range_from_extremes(lo, hi, scheme.range_mode))
        .collect())
}

fn range_from_extremes(lo: f64, hi: f64, mode: RangeMode) -> QuantParams {
    match mode {
        RangeMode::Symmetric => {
            let q = lo.abs().max(hi.abs()).max(DEGENERATE_HALF_WIDTH);
            QuantParams { qmin: -q, qmax: q }
        }
        RangeMode::Asymmetric => {
            if lo < hi {
                QuantParams { qmin: lo, qmax: hi }
            } else {
                let h = lo.abs().max(DEGENERATE_HALF_WIDTH);
                QuantParams {
                    qmin: lo - h,
                    qmax: lo + h,
                }
            }
        }
    }
}

/// Floor that treats values within a relative 1e-9 of an integer as that
/// integer, so grid points survive the `w / Δ` division bit-exactly.
#[inline]
fn snapped_floor(t: f64) -> f64 {
    let r = t.round();
    if (t - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        t.floor()
    }
}

/// Scalar encoder for one group.
#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    qmin: f64,
    qmax: f64,
    delta: f64,
    levels: i32,
    mode: RangeMode,
    repr: IntegerRepr,
    rounding: Rounding,
    mask: u8,
}

impl Encoder {
    pub fn new(params: &QuantParams, scheme: &QuantScheme) -> Self {
        Self {
            qmin: params.qmin,
            qmax: params.qmax,
            delta: params.delta(scheme),
            levels: scheme.levels(),
            mode: scheme.range_mode,
            repr: scheme.integer_repr,
            rounding: scheme.rounding,
            mask: scheme.code_mask(),
        }
    }

    /// Signed grid index of `w` in `[-L, L]`, `L = 2^(m-1) - 1`.
    #[inline]
    pub fn level(&self, w: f64) -> i32 {
        let w = w.clamp(self.qmin, self.qmax);
        let t = match self.mode {
            RangeMode::Symmetric => w / self.delta,
            RangeMode::Asymmetric => {
                let n = (w - self.qmin) / (self.qmax - self.qmin) * 2.0 - 1.0;
                n / self.delta
            }
        };
        let v = match self.rounding {
            Rounding::Truncate => snapped_floor(t),
            Rounding::RoundNearest => t.round(),
        };
        (v as i32).clamp(-self.levels, self.levels)
    }

    #[inline]
    pub fn encode(&self, w: f64) -> u8 {
        let v = self.level(w);
        let word = match self.repr {
            IntegerRepr::SignedTwosComplement => v as u8,
            IntegerRepr::Unsigned => (v + self.levels) as u8,
        };
        word & self.mask
    }
}

/// Scalar decoder for one group; total on all 256 byte values.
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    qmin: f64,
    span: f64,
    delta: f64,
    levels: i32,
    precision: u8,
    mode: RangeMode,
    repr: IntegerRepr,
    mask: u8,
}

impl Decoder {
    pub fn new(params: &QuantParams, scheme: &QuantScheme) -> Self {
        Self {
            qmin: params.qmin,
            span: params.qmax - params.qmin,
            delta: params.delta(scheme),
            levels: scheme.levels(),
            precision: scheme.precision,
            mode: scheme.range_mode,
            repr: scheme.integer_repr,
            mask: scheme.code_mask(),
        }
    }

    /// Integer value of a code word: sign-extended for two's complement,
    /// offset-removed for unsigned. Lies in `[-2^(m-1), 2^(m-1)]`.
    #[inline]
    pub fn level(&self, code: u8) -> i32 {
        let raw = (code & self.mask) as i32;
        match self.repr {
            IntegerRepr::SignedTwosComplement => {
                if raw & (1 << (self.precision - 1)) != 0 {
                    raw - (1 << self.precision)
                } else {
                    raw
                }
            }
            IntegerRepr::Unsigned => raw - self.levels,
        }
    }

    #[inline]
    pub fn decode(&self, code: u8) -> f64 {
        let v = self.level(code);
        match self.mode {
            RangeMode::Symmetric => self.delta * v as f64,
            // qmin + (v + L) * span / 2L, the inverse of the [-1, 1] map
            // written so that v = -L lands exactly on qmin.
            RangeMode::Asymmetric => self.qmin + (v + self.levels) as f64 * self.span / (2 * self.levels) as f64,
        }
    }
}

/// Quantize `weights` group by group with the given ranges.
///
/// Values outside a group's `[qmin, qmax]` are clamped first.
pub fn quantize(
    weights: &[f64],
    groups: &[GroupRange],
    params: &[QuantParams],
    scheme: &QuantScheme,
) -> Result<QuantizedTensor> {
    check_partition(groups, weights.len())?;
    if params.len() != groups.len() {
        return Err(Error::DimensionMismatch {
            what: "quantization parameter count",
            expected: groups.len(),
            found: params.len(),
        });
    }
    let mut codes = vec![0u8; weights.len()];
    for (r, p) in groups.iter().zip(params) {
        let enc = Encoder::new(p, scheme);
        for (c, &w) in codes[r.clone()].iter_mut().zip(&weights[r.clone()]) {
            *c = enc.encode(w);
        }
    }
    Ok(QuantizedTensor {
        codes,
        params: params.to_vec(),
        scheme: *scheme,
        groups: groups.to_vec(),
    })
}

/// Fit ranges, then quantize.
pub fn fit_and_quantize(weights: &[f64], groups: &[GroupRange], scheme: &QuantScheme) -> Result<QuantizedTensor> {
    let params = fit_range(weights, groups, scheme)?;
    quantize(weights, groups, &params, scheme)
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    q.dequantize_into(&mut out)
        .expect("buffer sized from the tensor itself");
    out
}

/// `dequantize(quantize(w))` with freshly fitted ranges.
pub fn fake_quantize(weights: &[f64], groups: &[GroupRange], scheme: &QuantScheme) -> Result<Vec<f64>> {
    Ok(dequantize(&fit_and_quantize(weights, groups, scheme)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym_signed(m: u8, rounding: Rounding) -> QuantScheme {
        QuantScheme::new(
            m,
            Granularity::PerGroup,
            RangeMode::Symmetric,
            IntegerRepr::SignedTwosComplement,
            rounding,
        )
        .unwrap()
    }

    #[test]
    fn scheme_validation() {
        assert!(QuantScheme::normal(1).is_err());
        assert!(QuantScheme::normal(9).is_err());
        assert!(QuantScheme::new(
            8,
            Granularity::PerGroup,
            RangeMode::Symmetric,
            IntegerRepr::Unsigned,
            Rounding::RoundNearest
        )
        .is_err());
        for m in 2..=8 {
            assert!(QuantScheme::rquant(m).is_ok());
        }
    }

    #[test]
    fn fit_symmetric_and_asymmetric() {
        let w = [-0.4, 0.2];
        let g = [0..2];
        let s = fit_range(&w, &g, &QuantScheme::normal(8).unwrap()).unwrap();
        assert_eq!(s[0], QuantParams { qmin: -0.4, qmax: 0.4 });
        let a = fit_range(&w, &g, &QuantScheme::rquant(8).unwrap()).unwrap();
        assert_eq!(a[0], QuantParams { qmin: -0.4, qmax: 0.2 });
    }

    #[test]
    fn fit_global_shares_one_range() {
        let w = [-0.4, 0.2, 0.9, 0.1];
        let g = [0..2, 2..4];
        let scheme = QuantScheme::normal(8).unwrap().with_granularity(Granularity::Global);
        let p = fit_range(&w, &g, &scheme).unwrap();
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0].qmax, 0.9);
    }

    #[test]
    fn fit_degenerate_and_errors() {
        let p = fit_range(&[0.0; 3], &[0..3], &QuantScheme::normal(8).unwrap()).unwrap();
        assert_eq!(p[0].qmax, DEGENERATE_HALF_WIDTH);
        let p = fit_range(&[0.5; 3], &[0..3], &QuantScheme::rquant(8).unwrap()).unwrap();
        assert_eq!((p[0].qmin, p[0].qmax), (0.0, 1.0));

        let err = fit_range(&[1.0], &[0..0], &QuantScheme::rquant(8).unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptyGroup { group: 0 }));
        let err = fit_range(&[1.0, f64::NAN], &[0..1, 1..2], &QuantScheme::rquant(8).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteWeight { group: 1, index: 1 }));
        assert!(err.to_string().contains("group 1"));
    }

    #[test]
    fn symmetric_endpoints() {
        let s = sym_signed(8, Rounding::RoundNearest);
        let p = QuantParams { qmin: -1.0, qmax: 1.0 };
        let enc = Encoder::new(&p, &s);
        let dec = Decoder::new(&p, &s);
        assert_eq!(enc.encode(0.0), 0);
        assert_eq!(enc.encode(1.0), 127);
        assert_eq!(enc.encode(-1.0), 0x81);
        assert_eq!(dec.decode(127), 1.0);
        assert_eq!(dec.decode(0x81), -1.0);
    }

    #[test]
    fn unsigned_asymmetric_codes() {
        let s = QuantScheme::rquant(8).unwrap();
        let p = QuantParams { qmin: -0.5, qmax: 0.5 };
        let enc = Encoder::new(&p, &s);
        assert_eq!(enc.encode(0.0), 127);
        assert_eq!(enc.encode(0.5), 254);
        assert_eq!(enc.encode(-0.5), 0);
        // Clamping.
        assert_eq!(enc.encode(3.0), 254);
        assert_eq!(enc.encode(-3.0), 0);
    }

    #[test]
    fn unused_top_code_decodes() {
        let s = QuantScheme::rquant(8).unwrap();
        let p = QuantParams { qmin: -1.0, qmax: 1.0 };
        let v = Decoder::new(&p, &s).decode(255);
        assert!((v - 128.0 / 127.0).abs() < 1e-15);
    }

    #[test]
    fn msb_flip_semantics() {
        // Unsigned 127 = 0111_1111; flipping bit 7 gives 1111_1111 = 255.
        let u = QuantScheme::rquant(8).unwrap();
        let p = QuantParams { qmin: -1.0, qmax: 1.0 };
        let du = Decoder::new(&p, &u);
        assert_eq!(du.level(127 ^ 0x80) + u.levels(), 255);
        // Two's complement 127 with the MSB flipped reads as -1.
        let s = sym_signed(8, Rounding::Truncate);
        let ds = Decoder::new(&p, &s);
        assert_eq!(ds.level(127), 127);
        assert_eq!(ds.level(127 ^ 0x80), -1);
    }

    #[test]
    fn low_precision_masking() {
        let w: Vec<f64> = (0..200).map(|i| (i as f64 / 199.0) * 2.0 - 1.0).collect();
        for scheme in [QuantScheme::rquant(4).unwrap(), QuantScheme::normal(4).unwrap()] {
            let q = fit_and_quantize(&w, &[0..200], &scheme).unwrap();
            assert!(q.codes().iter().all(|&c| c & 0xF0 == 0));
        }
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let s = sym_signed(8, Rounding::Truncate);
        let qmax = 0.37;
        let d = qmax / 127.0;
        let w: Vec<f64> = (-127..=127).map(|k| k as f64 * d).collect();
        let out = fake_quantize(&w, &[0..w.len()], &s).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn partition_checks() {
        assert!(check_partition(&[0..2, 2..5], 5).is_ok());
        assert!(check_partition(&[0..2, 3..5], 5).is_err());
        assert!(check_partition(&[0..2], 5).is_err());
        assert!(matches!(
            check_partition(&[0..2, 2..2], 2),
            Err(Error::EmptyGroup { group: 1 })
        ));
    }

    #[test]
    fn from_parts_rejects_high_bits() {
        let s = QuantScheme::rquant(4).unwrap();
        let p = vec![QuantParams { qmin: 0.0, qmax: 1.0 }];
        assert!(QuantizedTensor::from_parts(vec![0x10], p.clone(), s, vec![0..1]).is_err());
        assert!(QuantizedTensor::from_parts(vec![0x0F], p, s, vec![0..1]).is_ok());
    }
}
