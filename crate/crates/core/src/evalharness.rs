//! Clean and robust test error.
//!
//! Robust test error (RTE) is the test error after bit errors were injected
//! into the stored codes. It is reported as mean and sample standard
//! deviation over a fixed panel of chips, so every model sees the same error
//! patterns. Error counts are accumulated as integers, which makes the
//! statistics independent of evaluation order.

use ndarray::{s, ArrayView2};
use rayon::prelude::*;

use crate::biterror::{inject_linf, inject_profiled, inject_random_in_place, ChipField, ProfiledMap};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fixedpoint::QuantizedTensor;
use crate::rng::derive_seed;
use crate::smallnet::{Architecture, Model};

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 1000;

/// Default chip panel size.
pub const DEFAULT_CHIPS: usize = 50;

/// Misclassification count and summed predicted-class confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub errors: u64,
    pub n: u64,
    pub confidence_sum: f64,
}

impl EvalStats {
    pub fn error(&self) -> f64 {
        self.errors as f64 / self.n as f64
    }

    /// Mean softmax probability of the predicted class.
    pub fn confidence(&self) -> f64 {
        self.confidence_sum / self.n as f64
    }
}

fn check_data(arch: &Architecture, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if data.dim() != arch.inputs() {
        return Err(Error::DimensionMismatch {
            what: "input dimension",
            expected: arch.inputs(),
            found: data.dim(),
        });
    }
    Ok(())
}

/// Predicted class (first maximum) and its softmax probability.
fn predict(logits: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = k;
        }
    }
    let zmax = logits[best];
    let denom: f64 = logits.iter().map(|&z| (z - zmax).exp()).sum();
    (best, 1.0 / denom)
}

fn evaluate_view(arch: &Architecture, params: &[f64], images: ArrayView2<f64>, labels: &[u8]) -> Result<EvalStats> {
    let mut stats = EvalStats {
        errors: 0,
        n: labels.len() as u64,
        confidence_sum: 0.0,
    };
    let mut start = 0;
    while start < labels.len() {
        let end = (start + EVAL_BATCH).min(labels.len());
        let logits = arch.forward(params, images.slice(s![start..end, ..]))?;
        for (row, &y) in logits.rows().into_iter().zip(&labels[start..end]) {
            let row = row.to_vec();
            let (k, conf) = predict(&row);
            if k != y as usize {
                stats.errors += 1;
            }
            stats.confidence_sum += conf;
        }
        start = end;
    }
    Ok(stats)
}

/// Evaluate flat parameters on a data set.
pub fn evaluate(arch: &Architecture, params: &[f64], data: &Dataset) -> Result<EvalStats> {
    check_data(arch, data)?;
    evaluate_view(arch, params, data.images(), data.labels())
}

/// Fraction of misclassified examples.
pub fn test_error(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model.arch(), model.params(), data)?.error())
}

/// Statistics of one bit error rate over a chip panel.
#[derive(Debug, Clone, PartialEq)]
pub struct RteEntry {
    pub p: f64,
    pub te: f64,
    pub rte_mean: f64,
    pub rte_std: f64,
    pub conf_clean: f64,
    pub conf_perturbed: f64,
    pub chips: usize,
    pub n_test: usize,
    /// Test error of each chip, in panel order.
    pub per_chip: Vec<f64>,
}

/// Clean statistics plus one entry per swept bit error rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub te: f64,
    pub conf_clean: f64,
    pub n_test: usize,
    pub entries: Vec<RteEntry>,
}

/// Mean and sample standard deviation (divisor `K - 1`, zero for `K = 1`)
/// of the fractions `counts[k] / n`, computed exactly from integer sums.
pub fn count_mean_std(counts: &[u64], n: u64) -> (f64, f64) {
    let k = counts.len() as u128;
    assert!(k > 0 && n > 0);
    let sum: u128 = counts.iter().map(|&c| c as u128).sum();
    let sq: u128 = counts.iter().map(|&c| c as u128 * c as u128).sum();
    let nf = n as f64;
    let mean = sum as f64 / (k as f64 * nf);
    if k < 2 {
        return (mean, 0.0);
    }
    // k * sq - sum^2 is non-negative by Cauchy-Schwarz.
    let num = k * sq - sum * sum;
    let var = num as f64 / ((k * (k - 1)) as f64 * nf * nf);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of arbitrary values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    assert!(k > 0);
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, var.sqrt())
}

fn check_panel(q: &QuantizedTensor, chips: &[ChipField]) -> Result<()> {
    if chips.is_empty() {
        return Err(Error::invalid("chip panel is empty"));
    }
    let m = q.scheme().precision();
    for c in chips {
        if c.weights() != q.len() || c.bits() != m {
            return Err(Error::DimensionMismatch {
                what: "chip field shape (weights x bits)",
                expected: q.len() * m as usize,
                found: c.weights() * c.bits() as usize,
            });
        }
    }
    Ok(())
}

fn perturbed_stats(
    arch: &Architecture,
    q: &QuantizedTensor,
    data: &Dataset,
    chips: &[ChipField],
    p: f64,
) -> Result<Vec<EvalStats>> {
    chips
        .par_iter()
        .map(|chip| {
            let mut noisy = q.clone();
            inject_random_in_place(noisy.codes_mut(), chip, p)?;
            let mut w = vec![0.0; noisy.len()];
            noisy.dequantize_into(&mut w)?;
            evaluate_view(arch, &w, data.images(), data.labels())
        })
        .collect()
}

fn entry_from(p: f64, clean: &EvalStats, per: &[EvalStats], chips: usize) -> RteEntry {
    let n = clean.n;
    let counts: Vec<u64> = per.iter().map(|s| s.errors).collect();
    let (rte_mean, rte_std) = count_mean_std(&counts, n);
    let conf_perturbed = per.iter().map(EvalStats::confidence).sum::<f64>() / per.len() as f64;
    RteEntry {
        p,
        te: clean.error(),
        rte_mean,
        rte_std,
        conf_clean: clean.confidence(),
        conf_perturbed,
        chips,
        n_test: n as usize,
        per_chip: per.iter().map(EvalStats::error).collect(),
    }
}

fn clean_entry(p: f64, clean: &EvalStats, chips: usize) -> RteEntry {
    RteEntry {
        p,
        te: clean.error(),
        rte_mean: clean.error(),
        rte_std: 0.0,
        conf_clean: clean.confidence(),
        conf_perturbed: clean.confidence(),
        chips,
        n_test: clean.n as usize,
        per_chip: vec![clean.error(); chips],
    }
}

fn clean_stats(arch: &Architecture, q: &QuantizedTensor, data: &Dataset) -> Result<EvalStats> {
    check_data(arch, data)?;
    if q.len() != arch.num_params() {
        return Err(Error::DimensionMismatch {
            what: "quantized parameter count",
            expected: arch.num_params(),
            found: q.len(),
        });
    }
    let mut w = vec![0.0; q.len()];
    q.dequantize_into(&mut w)?;
    evaluate_view(arch, &w, data.images(), data.labels())
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("bit error rate must be in [0, 1], got {p}")));
    }
    Ok(())
}

/// RTE of the codes `q` at rate `p` over the chip panel. Chips are evaluated
/// in parallel on the current rayon pool.
pub fn robust_test_error(
    arch: &Architecture,
    q: &QuantizedTensor,
    data: &Dataset,
    chips: &[ChipField],
    p: f64,
) -> Result<RteEntry> {
    check_panel(q, chips)?;
    check_rate(p)?;
    let clean = clean_stats(arch, q, data)?;
    if p == 0.0 {
        return Ok(clean_entry(p, &clean, chips.len()));
    }
    let per = perturbed_stats(arch, q, data, chips, p)?;
    Ok(entry_from(p, &clean, &per, chips.len()))
}

/// RTE for every rate in `rates`, sharing one clean evaluation.
pub fn sweep(
    arch: &Architecture,
    q: &QuantizedTensor,
    data: &Dataset,
    chips: &[ChipField],
    rates: &[f64],
) -> Result<RobustnessReport> {
    check_panel(q, chips)?;
    for &p in rates {
        check_rate(p)?;
    }
    let clean = clean_stats(arch, q, data)?;
    let mut entries = Vec::with_capacity(rates.len());
    for &p in rates {
        if p == 0.0 {
            entries.push(clean_entry(p, &clean, chips.len()));
        } else {
            let per = perturbed_stats(arch, q, data, chips, p)?;
            entries.push(entry_from(p, &clean, &per, chips.len()));
        }
    }
    Ok(RobustnessReport {
        te: clean.error(),
        conf_clean: clean.confidence(),
        n_test: clean.n as usize,
        entries,
    })
}

/// Mean softmax confidence of the predicted class, clean and averaged over
/// the chip panel at rate `p`.
pub fn confidence_stats(
    arch: &Architecture,
    q: &QuantizedTensor,
    data: &Dataset,
    chips: &[ChipField],
    p: f64,
) -> Result<(f64, f64)> {
    let e = robust_test_error(arch, q, data, chips, p)?;
    Ok((e.conf_clean, e.conf_perturbed))
}

/// Test error averaged over several placements of the weights in a profiled
/// memory array.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledResult {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub offsets: Vec<usize>,
    pub per_offset: Vec<f64>,
    pub n_test: usize,
}

pub fn profiled_rte(
    arch: &Architecture,
    q: &QuantizedTensor,
    data: &Dataset,
    map: &ProfiledMap,
    offsets: &[usize],
    sample_seed: u64,
) -> Result<ProfiledResult> {
    if offsets.is_empty() {
        return Err(Error::invalid("profiled evaluation needs at least one offset"));
    }
    check_data(arch, data)?;
    let per: Vec<EvalStats> = offsets
        .par_iter()
        .map(|&off| {
            let noisy = inject_profiled(q, map, off, sample_seed)?;
            let mut w = vec![0.0; noisy.len()];
            noisy.dequantize_into(&mut w)?;
            evaluate_view(arch, &w, data.images(), data.labels())
        })
        .collect::<Result<_>>()?;
    let counts: Vec<u64> = per.iter().map(|s| s.errors).collect();
    let (mean, std) = count_mean_std(&counts, data.len() as u64);
    Ok(ProfiledResult {
        label: map.label().to_owned(),
        mean,
        std,
        offsets: offsets.to_vec(),
        per_offset: per.iter().map(EvalStats::error).collect(),
        n_test: data.len(),
    })
}

/// Test error under relative L-infinity weight noise of level `eps_rel`,
/// over `samples` noise draws derived from `master_seed`.
pub fn linf_rte(model: &Model, data: &Dataset, eps_rel: f64, samples: usize, master_seed: u64) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::invalid("L-infinity evaluation needs at least one sample"));
    }
    check_data(model.arch(), data)?;
    let groups = model.groups();
    let counts: Vec<u64> = (0..samples as u64)
        .into_par_iter()
        .map(|s| {
            let w = inject_linf(model.params(), &groups, eps_rel, derive_seed(master_seed, s))?;
            Ok(evaluate_view(model.arch(), &w, data.images(), data.labels())?.errors)
        })
        .collect::<Result<_>>()?;
    Ok(count_mean_std(&counts, data.len() as u64))
}

/// Uniform deviation bound between the RTE on `n` test examples with `l`
/// sampled error patterns and its expectation. `delta` is the failure
/// probability: the bound holds with probability `1 - delta`.
pub fn perturbed_error_bound(n: u64, l: u64, delta: f64) -> Result<f64> {
    if n == 0 || l == 0 {
        return Err(Error::invalid("n and l must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let (n, l) = (n as f64, l as f64);
    Ok((((n + 1.0) / delta).ln() / n).sqrt() * (l.sqrt() + n.sqrt()) / l.sqrt())
}

/// Human-readable statement of the bound and its convention.
pub const BOUND_CONVENTION: &str =
    "eps = sqrt(ln((n+1)/delta)/n) * (sqrt(l)+sqrt(n))/sqrt(l); holds with probability 1-delta (delta = failure probability)";
