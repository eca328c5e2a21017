//! `train`, `eval`, `inject`, `bound` and `selftest`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bitrobust_core::biterror::{inject_profiled, inject_random, sample_chips, InjectionReport};
use bitrobust_core::checkpoint::{decode_model, encode_model};
use bitrobust_core::dataset::load_idx;
use bitrobust_core::evalharness::{linf_rte, perturbed_error_bound, profiled_rte, sweep, BOUND_CONVENTION};
use bitrobust_core::fixedpoint::dequantize;
use bitrobust_core::report::{sig6, write_report_rows, ModelTag, REPORT_HEADER};
use bitrobust_core::trainer::{train as run_training, write_trace_csv};
use bitrobust_core::{Dataset, Model, ProfiledMap, ProfiledResult, RobustnessReport, TrainOutcome, TrainedModel};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const PROFILED_HEADER: &str = "model,map,offsets,map_seed,te,rte_mean,rte_std,n_test";
pub const LINF_HEADER: &str = "model,eps,te,rte_mean,rte_std,samples,n_test";

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))
}

pub fn load_train_set(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let d = load_idx(
        require(&cfg.data.train_images, "train_images")?,
        require(&cfg.data.train_labels, "train_labels")?,
    )?;
    Ok(match cfg.data.train_limit {
        Some(n) => d.take(n),
        None => d,
    })
}

pub fn load_test_set(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let d = load_idx(
        require(&cfg.data.test_images, "test_images")?,
        require(&cfg.data.test_labels, "test_labels")?,
    )?;
    Ok(match cfg.data.test_limit {
        Some(n) => d.take(n),
        None => d,
    })
}

fn read_checkpoint(path: &Path) -> Result<TrainedModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
    Ok(decode_model(&bytes)?)
}

fn read_map(path: &Path) -> Result<ProfiledMap, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ProfiledMap::parse(text.as_bytes(), label)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::file(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = create(path)?;
    f.write_all(bytes)
        .and_then(|_| f.flush())
        .map_err(|e| CliError::file(path, e))
}

/// Train the configured model on `data`.
pub fn train_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome, CliError> {
    let classes = data
        .labels()
        .iter()
        .copied()
        .max()
        .map_or(2, |c| (c as usize + 1).max(2));
    let arch = cfg.architecture(data.dim(), classes)?;
    let model = Model::init(arch, cfg.train.seed);
    Ok(run_training(model, data, &cfg.train)?)
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(format!("{}.bnn", cfg.model))
}

/// `train`: writes `<model>.bnn` and `<model>_trace.csv` to the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts, CliError> {
    let data = load_train_set(cfg)?;
    let outcome = train_model(cfg, &data)?;
    let checkpoint = checkpoint_path(cfg);
    write_file(
        &checkpoint,
        &encode_model(&outcome.trained.model, outcome.trained.quantized.as_ref()),
    )?;
    let trace = cfg.out_dir.join(format!("{}_trace.csv", cfg.model));
    let mut f = create(&trace)?;
    write_trace_csv(&mut f, &outcome.trace)
        .and_then(|_| f.flush())
        .map_err(|e| CliError::file(&trace, e))?;
    Ok(TrainArtifacts {
        outcome,
        checkpoint,
        trace,
    })
}

/// Everything `eval` computes.
#[derive(Debug, Clone)]
pub struct EvalResults {
    pub report: RobustnessReport,
    pub profiled: Vec<ProfiledResult>,
    /// `(eps, mean, std)` per L-infinity level.
    pub linf: Vec<(f64, f64, f64)>,
}

pub fn report_tag(cfg: &ExperimentConfig) -> ModelTag {
    let s = cfg.scheme_of();
    ModelTag {
        model: cfg.model.clone(),
        scheme: s.to_string(),
        precision: s.precision(),
        wmax: cfg.train.wmax,
        p_train: cfg.train.p_train,
    }
}

/// Evaluate a trained model: random bit error sweep, profiled maps and
/// L-infinity noise as configured.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    trained: &TrainedModel,
    test: &Dataset,
    maps: &[ProfiledMap],
    offsets: &[usize],
) -> Result<EvalResults, CliError> {
    let q = trained
        .quantized
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint holds no quantized weights".into()))?;
    if *q.scheme() != cfg.scheme_of() {
        return Err(CliError::Usage(format!(
            "checkpoint was quantized with {} (m = {}) but the configuration specifies {} (m = {})",
            q.scheme(),
            q.scheme().precision(),
            cfg.scheme_of(),
            cfg.scheme_of().precision()
        )));
    }
    let arch = trained.model.arch();
    let chips = sample_chips(cfg.chip_seed, cfg.chips, q.len(), q.scheme().precision())?;
    let report = sweep(arch, q, test, &chips, &cfg.p_eval)?;
    let offsets = if offsets.is_empty() { &[0][..] } else { offsets };
    let profiled = maps
        .iter()
        .map(|m| profiled_rte(arch, q, test, m, offsets, cfg.map_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let linf = cfg
        .linf_eps
        .iter()
        .map(|&eps| {
            let (mean, std) = linf_rte(&trained.model, test, eps, cfg.linf_samples, cfg.chip_seed)?;
            Ok((eps, mean, std))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(EvalResults { report, profiled, linf })
}

pub struct EvalArtifacts {
    pub results: EvalResults,
    pub report: PathBuf,
    pub profiled: Option<PathBuf>,
    pub linf: Option<PathBuf>,
}

pub fn write_report(path: &Path, cfg: &ExperimentConfig, report: &RobustnessReport) -> Result<(), CliError> {
    let mut f = create(path)?;
    writeln!(f, "{REPORT_HEADER}")
        .and_then(|_| write_report_rows(&mut f, &report_tag(cfg), &report.entries))
        .and_then(|_| f.flush())
        .map_err(|e| CliError::file(path, e))
}

fn write_profiled(path: &Path, cfg: &ExperimentConfig, results: &[ProfiledResult], te: f64) -> Result<(), CliError> {
    let mut f = create(path)?;
    let mut body = format!("{PROFILED_HEADER}\n");
    for r in results {
        let offsets: Vec<String> = r.offsets.iter().map(usize::to_string).collect();
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cfg.model,
            r.label,
            offsets.join(";"),
            cfg.map_seed,
            sig6(te),
            sig6(r.mean),
            sig6(r.std),
            r.n_test
        ));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::file(path, e))
}

fn write_linf(
    path: &Path,
    cfg: &ExperimentConfig,
    rows: &[(f64, f64, f64)],
    te: f64,
    n: usize,
) -> Result<(), CliError> {
    let mut f = create(path)?;
    let mut body = format!("{LINF_HEADER}\n");
    for &(eps, mean, std) in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cfg.model,
            sig6(eps),
            sig6(te),
            sig6(mean),
            sig6(std),
            cfg.linf_samples,
            n
        ));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| CliError::file(path, e))
}

/// `eval`: writes `<model>_report.csv`, plus `<model>_profiled.csv` when
/// maps are given and `<model>_linf.csv` when noise levels are configured.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    map_paths: &[PathBuf],
    offsets: &[usize],
) -> Result<EvalArtifacts, CliError> {
    let trained = read_checkpoint(checkpoint)?;
    let maps = map_paths.iter().map(|p| read_map(p)).collect::<Result<Vec<_>, _>>()?;
    let test = load_test_set(cfg)?;
    let results = evaluate_model(cfg, &trained, &test, &maps, offsets)?;
    let report = cfg.out_dir.join(format!("{}_report.csv", cfg.model));
    write_report(&report, cfg, &results.report)?;
    let profiled = if results.profiled.is_empty() {
        None
    } else {
        let p = cfg.out_dir.join(format!("{}_profiled.csv", cfg.model));
        write_profiled(&p, cfg, &results.profiled, results.report.te)?;
        Some(p)
    };
    let linf = if results.linf.is_empty() {
        None
    } else {
        let p = cfg.out_dir.join(format!("{}_linf.csv", cfg.model));
        write_linf(&p, cfg, &results.linf, results.report.te, results.report.n_test)?;
        Some(p)
    };
    Ok(EvalArtifacts {
        results,
        report,
        profiled,
        linf,
    })
}

/// Source of the bit errors for `inject`.
#[derive(Debug, Clone)]
pub enum InjectSource {
    /// Random errors at this rate on chip 0 of the panel keyed by the seed.
    Random(f64),
    Profiled {
        map: PathBuf,
        offset: usize,
    },
}

#[derive(Debug, Clone)]
pub struct InjectOutcome {
    pub flipped_bits: u64,
    pub affected_weights: u64,
    /// `p * m * W` for random errors.
    pub expected_flips: Option<f64>,
    pub output: PathBuf,
}

/// `inject`: writes `<stem>_injected.bnn` with perturbed codes and the
/// weights they decode to.
pub fn cmd_inject(
    checkpoint: &Path,
    source: &InjectSource,
    seed: u64,
    out_dir: &Path,
) -> Result<InjectOutcome, CliError> {
    let trained = read_checkpoint(checkpoint)?;
    let q = trained
        .quantized
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint holds no quantized weights".into()))?;
    let (noisy, report) = match source {
        InjectSource::Random(p) => {
            let chip = sample_chips(seed, 1, q.len(), q.scheme().precision())?.remove(0);
            let (noisy, report) = inject_random(q, &chip, *p)?;
            (noisy, report)
        }
        InjectSource::Profiled { map, offset } => {
            let map = read_map(map)?;
            let noisy = inject_profiled(q, &map, *offset, seed)?;
            let (mut flipped, mut affected) = (0u64, 0u64);
            for (a, b) in q.codes().iter().zip(noisy.codes()) {
                let d = a ^ b;
                flipped += d.count_ones() as u64;
                affected += u64::from(d != 0);
            }
            let report = InjectionReport {
                flipped_bits: flipped,
                expected_flips: f64::NAN,
                affected_weights: affected,
            };
            (noisy, report)
        }
    };
    let model = Model::from_params(trained.model.arch().clone(), dequantize(&noisy))?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let output = out_dir.join(format!("{stem}_injected.bnn"));
    write_file(&output, &encode_model(&model, Some(&noisy)))?;
    Ok(InjectOutcome {
        flipped_bits: report.flipped_bits,
        affected_weights: report.affected_weights,
        expected_flips: matches!(source, InjectSource::Random(_)).then_some(report.expected_flips),
        output,
    })
}

/// `bound`: the printed lines.
pub fn cmd_bound(n: u64, l: u64, delta: f64) -> Result<Vec<String>, CliError> {
    let eps = perturbed_error_bound(n, l, delta)?;
    Ok(vec![
        format!("epsilon = {}", sig6(eps)),
        format!("n = {n}, l = {l}, delta = {}", sig6(delta)),
        BOUND_CONVENTION.to_owned(),
    ])
}

/// Parse a comma-separated offset list.
pub fn parse_offsets(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::Usage(format!("invalid offset `{t}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_lines() {
        let lines = cmd_bound(10_000, 1_000_000, 0.01).unwrap();
        assert_eq!(lines[0], "epsilon = 0.0408863");
        assert!(lines[2].contains("failure probability"));
        assert!(cmd_bound(0, 1, 0.5).is_err());
    }

    #[test]
    fn offsets() {
        assert_eq!(parse_offsets("0,64, 128").unwrap(), vec![0, 64, 128]);
        assert!(parse_offsets("1,x").is_err());
    }
}
