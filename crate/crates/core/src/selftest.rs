//! Fast invariant checks runnable from a deployed binary.

use ndarray::Array2;

use crate::biterror::{inject_random, sample_chips, ChipField};
use crate::evalharness::perturbed_error_bound;
use crate::fixedpoint::{
    fit_and_quantize, Decoder, Encoder, Granularity, IntegerRepr, QuantParams, QuantScheme, RangeMode, Rounding,
};
use crate::rng::{splitmix_at, unit_f64};
use crate::smallnet::{Architecture, LossSpec, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn all_schemes(m: u8) -> Vec<QuantScheme> {
    let mut out = Vec::new();
    for g in [Granularity::Global, Granularity::PerGroup] {
        for (r, repr) in [
            (RangeMode::Symmetric, IntegerRepr::SignedTwosComplement),
            (RangeMode::Asymmetric, IntegerRepr::SignedTwosComplement),
            (RangeMode::Asymmetric, IntegerRepr::Unsigned),
        ] {
            for round in [Rounding::Truncate, Rounding::RoundNearest] {
                out.push(QuantScheme::new(m, g, r, repr, round).expect("valid combination"));
            }
        }
    }
    out
}

fn codec_round_trip() -> Result<String, String> {
    let mut cases = 0;
    for m in [2u8, 3, 4, 8] {
        for s in all_schemes(m) {
            let lo = if s.range_mode() == RangeMode::Symmetric {
                -1.3
            } else {
                -0.7
            };
            let p = QuantParams { qmin: lo, qmax: 1.3 };
            let enc = Encoder::new(&p, &s);
            let dec = Decoder::new(&p, &s);
            let step = p.step(&s);
            let bound = match s.rounding() {
                Rounding::Truncate => step,
                Rounding::RoundNearest => step / 2.0,
            };
            for k in 0..=1000 {
                let w = lo + (1.3 - lo) * k as f64 / 1000.0;
                let c = enc.encode(w);
                if c & !s.code_mask() != 0 {
                    return Err(format!("{s} m={m}: unmasked code {c:#04x}"));
                }
                let err = (dec.decode(c) - w).abs();
                if err > bound * (1.0 + 1e-9) {
                    return Err(format!("{s} m={m}: |Q^-1(Q({w})) - w| = {err} > {bound}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} values"))
}

fn msb_flip_semantics() -> Result<String, String> {
    let p = QuantParams { qmin: -1.0, qmax: 1.0 };
    let unsigned = QuantScheme::rquant(8).map_err(|e| e.to_string())?;
    let signed = QuantScheme::normal(8).map_err(|e| e.to_string())?;
    let flipped = 127u8 ^ 0x80;
    if flipped != 255 {
        return Err(format!("127 ^ MSB = {flipped}"));
    }
    let lu = Decoder::new(&p, &unsigned).level(flipped);
    let ls = Decoder::new(&p, &signed).level(flipped);
    if ls != -1 {
        return Err(format!("signed code 0xff decodes to level {ls}, expected -1"));
    }
    if lu != 255 - 127 {
        return Err(format!("unsigned code 0xff decodes to level {lu}, expected 128"));
    }
    Ok("unsigned 255 -> +128, signed 0xff -> -1".into())
}

fn persistence_and_involution() -> Result<String, String> {
    let w: Vec<f64> = (0..4000).map(|i| unit_f64(splitmix_at(3, i)) * 2.0 - 1.0).collect();
    let q = fit_and_quantize(&w, &[0..4000], &QuantScheme::rquant(8).unwrap()).map_err(|e| e.to_string())?;
    let chips = sample_chips(17, 3, q.len(), 8).map_err(|e| e.to_string())?;
    for chip in &chips {
        let mut prev: Option<Vec<u8>> = None;
        for p in [0.001, 0.01, 0.05] {
            let (noisy, _) = inject_random(&q, chip, p).map_err(|e| e.to_string())?;
            let err: Vec<u8> = noisy.codes().iter().zip(q.codes()).map(|(a, b)| a ^ b).collect();
            if let Some(prev) = &prev {
                if prev.iter().zip(&err).any(|(a, b)| a & !b != 0) {
                    return Err(format!("error set at lower rate not contained at p = {p}"));
                }
            }
            let (back, _) = inject_random(&noisy, chip, p).map_err(|e| e.to_string())?;
            if back != q {
                return Err(format!("injecting twice at p = {p} is not the identity"));
            }
            prev = Some(err);
        }
    }
    Ok(format!("{} chips", chips.len()))
}

fn chip_field_range() -> Result<String, String> {
    let chip = ChipField::new(42, 1000, 8).map_err(|e| e.to_string())?;
    for i in 0..1000 {
        for j in 0..8 {
            let u = chip.u(i, j);
            if !(0.0..1.0).contains(&u) {
                return Err(format!("u({i},{j}) = {u}"));
            }
        }
    }
    Ok("8000 draws in [0, 1)".into())
}

fn gradient_check() -> Result<String, String> {
    let arch = Architecture::new(vec![6, 5, 4]).map_err(|e| e.to_string())?;
    let model = Model::init(arch.clone(), 5);
    let x: Vec<f64> = (0..8 * 6).map(|i| unit_f64(splitmix_at(9, i))).collect();
    let x = Array2::from_shape_vec((8, 6), x).unwrap();
    let y: Vec<u8> = (0..8).map(|i| (i % 4) as u8).collect();
    let mut worst: f64 = 0.0;
    for loss in [LossSpec::CrossEntropy, LossSpec::LabelSmoothed { smooth_target: 0.9 }] {
        let (_, g) = arch
            .backward(model.params(), x.view(), &y, &loss)
            .map_err(|e| e.to_string())?;
        let h = 1e-5;
        let mut num = Vec::with_capacity(g.len());
        let mut p = model.params().to_vec();
        for k in 0..p.len() {
            let orig = p[k];
            p[k] = orig + h;
            let (lp, _) = arch.backward(&p, x.view(), &y, &loss).map_err(|e| e.to_string())?;
            p[k] = orig - h;
            let (lm, _) = arch.backward(&p, x.view(), &y, &loss).map_err(|e| e.to_string())?;
            p[k] = orig;
            num.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
    }
    if worst > 1e-4 {
        return Err(format!("relative gradient error {worst:.3e}"));
    }
    Ok(format!("relative gradient error {worst:.3e}"))
}

fn bound_values() -> Result<String, String> {
    let a = perturbed_error_bound(10_000, 1_000_000, 0.01).map_err(|e| e.to_string())?;
    let b = perturbed_error_bound(100_000, 1_000_000, 0.01).map_err(|e| e.to_string())?;
    if (a - 0.041).abs() > 1e-3 || (b - 0.017).abs() > 1e-3 {
        return Err(format!("eps = {a}, {b}"));
    }
    Ok(format!("eps = {a:.5}, {b:.5}"))
}

/// Run every check.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("codec round trip", codec_round_trip),
        check("msb flip semantics", msb_flip_semantics),
        check("persistence and involution", persistence_and_involution),
        check("chip field range", chip_field_range),
        check("gradient vs finite differences", gradient_check),
        check("generalization bound", bound_values),
    ]
}
