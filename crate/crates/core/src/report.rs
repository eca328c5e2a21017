//! CSV formatting shared by the trace and robustness reports.

use std::io::Write;

use crate::evalharness::RteEntry;

/// Format with 6 significant digits, like C's `%.6g`: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros
/// removed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_owned()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}

pub const REPORT_HEADER: &str =
    "model,scheme,m,wmax,p_train,p_eval,te,rte_mean,rte_std,conf_clean,conf_perturbed,chips,n_test";

/// Identification columns of a report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTag {
    pub model: String,
    pub scheme: String,
    pub precision: u8,
    pub wmax: Option<f64>,
    pub p_train: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_default()
}

/// One CSV row per sweep entry, LF line endings.
pub fn write_report_rows<W: Write>(mut out: W, tag: &ModelTag, entries: &[RteEntry]) -> std::io::Result<()> {
    for e in entries {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            tag.model,
            tag.scheme,
            tag.precision,
            opt(tag.wmax),
            opt(tag.p_train),
            sig6(e.p),
            sig6(e.te),
            sig6(e.rte_mean),
            sig6(e.rte_std),
            sig6(e.conf_clean),
            sig6(e.conf_perturbed),
            e.chips,
            e.n_test
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.041, "0.041"),
            (0.0408878, "0.0408878"),
            (1.0 / 3.0, "0.333333"),
            (123456.7, "123457"),
            (999999.5, "1e+06"),
            (1234567.0, "1.23457e+06"),
            (0.00001234567, "1.23457e-05"),
            (0.0001234567, "0.000123457"),
            (-2.5, "-2.5"),
            (439870.24, "439870"),
        ];
        for (x, s) in cases {
            assert_eq!(sig6(x), s, "{x}");
        }
    }
}
