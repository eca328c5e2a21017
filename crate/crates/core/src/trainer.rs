//! Training loops: quantization-aware training, weight clipping and random
//! bit error training (RandBET).
//!
//! One step of RandBET:
//!
//! 1. clip the float weights to `[-wmax, wmax]`,
//! 2. refit ranges and quantize, `w_q = Q^-1(Q(w))`,
//! 3. clean forward/backward at `w_q`,
//! 4. flip random bits of the codes at rate `p` using a fresh chip,
//!    forward/backward at the perturbed weights,
//! 5. update the float weights with `Δ + λ Δ̃` (straight-through: the
//!    quantizer is treated as the identity for gradients).
//!
//! Bit errors are only injected once the smoothed clean loss has dropped
//! below the gate threshold; from then on the gate stays open.

use std::io::Write;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::biterror::{inject_random_in_place, ChipField};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fixedpoint::{fit_and_quantize, GroupRange, QuantParams, QuantScheme, QuantizedTensor};
use crate::report::sig6;
use crate::rng::{derive_seed, splitmix_at};
use crate::smallnet::{gather_rows, LossSpec, Model, SgdMomentum};

const SHUFFLE_STREAM: u64 = 1;
const ERROR_STREAM: u64 = 2;

/// Learning-rate decay points as fractions of the total epoch count.
const LR_MILESTONES: [(usize, usize); 3] = [(2, 5), (3, 5), (4, 5)];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight clipping bound; `None` disables clipping.
    pub wmax: Option<f64>,
    /// Training bit error rate; `None` trains without bit errors.
    pub p_train: Option<f64>,
    /// Weight of the perturbed gradient.
    pub lambda: f64,
    pub gate_threshold: f64,
    /// Decay of the exponential moving average fed to the gate.
    pub gate_decay: f64,
    /// Quantization used for fake quantization; `None` trains in float.
    pub scheme: Option<QuantScheme>,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            wmax: None,
            p_train: None,
            lambda: 1.0,
            gate_threshold: 1.75,
            gate_decay: 0.95,
            scheme: Some(QuantScheme::rquant(8).expect("valid preset")),
            loss: LossSpec::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if let Some(w) = self.wmax {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("wmax must be > 0, got {w}")));
            }
        }
        if let Some(p) = self.p_train {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("p_train must be in [0, 1], got {p}")));
            }
            if self.scheme.is_none() {
                return Err(Error::invalid("bit error training needs a quantization scheme"));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        if !(0.0..1.0).contains(&self.gate_decay) {
            return Err(Error::invalid(format!(
                "gate decay must be in [0, 1), got {}",
                self.gate_decay
            )));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based): the base rate times 0.1 for
    /// every milestone at 2/5, 3/5 and 4/5 of the epochs already passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = LR_MILESTONES
            .iter()
            .filter(|&&(num, den)| epoch * den >= num * self.epochs)
            .count();
        self.lr * 0.1f64.powi(passed as i32)
    }
}

/// Latching gate on the exponentially smoothed clean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionGate {
    threshold: f64,
    decay: f64,
    ema: Option<f64>,
    active: bool,
}

impl InjectionGate {
    pub fn new(threshold: f64, decay: f64) -> Self {
        Self {
            threshold,
            decay,
            ema: None,
            active: false,
        }
    }

    /// Feed one batch loss; returns whether injection is enabled.
    pub fn observe(&mut self, loss: f64) -> bool {
        let ema = match self.ema {
            None => loss,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
        };
        self.ema = Some(ema);
        if ema < self.threshold {
            self.active = true;
        }
        self.active
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        self.ema
    }
}

/// What happened during one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub clean_loss: f64,
    /// Present iff bit errors were injected in this step.
    pub perturbed_loss: Option<f64>,
    pub injection_active: bool,
    pub flipped_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub trace: StepTrace,
}

/// Deployable model: dequantized weights plus the codes they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub quantized: Option<QuantizedTensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    /// Float master weights after the last update.
    pub master: Model,
    pub trace: Vec<TraceRow>,
}

/// Stateful trainer over one model.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    groups: Vec<GroupRange>,
    opt: SgdMomentum,
    gate: InjectionGate,
    error_key: u64,
    chips_drawn: u64,
    steps: u64,
    last_params: Option<Vec<QuantParams>>,
    last_chip: Option<ChipField>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = SgdMomentum::new(model.params().len(), cfg.momentum, cfg.weight_decay)?;
        Ok(Self {
            groups: model.groups(),
            gate: InjectionGate::new(cfg.gate_threshold, cfg.gate_decay),
            error_key: derive_seed(cfg.seed, ERROR_STREAM),
            opt,
            model,
            cfg,
            chips_drawn: 0,
            steps: 0,
            last_params: None,
            last_chip: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn gate(&self) -> &InjectionGate {
        &self.gate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Ranges used by the most recent fake quantization.
    pub fn last_quant_params(&self) -> Option<&[QuantParams]> {
        self.last_params.as_deref()
    }

    /// Chip used by the most recent bit error injection.
    pub fn last_chip(&self) -> Option<&ChipField> {
        self.last_chip.as_ref()
    }

    /// Clip, then fake-quantize the master weights.
    fn quantized_view(&mut self) -> Result<(Vec<f64>, Option<QuantizedTensor>)> {
        if let Some(wmax) = self.cfg.wmax {
            self.model.clip(wmax);
        }
        match &self.cfg.scheme {
            Some(scheme) => {
                let qt = fit_and_quantize(self.model.params(), &self.groups, scheme)?;
                let mut wq = vec![0.0; qt.len()];
                qt.dequantize_into(&mut wq)?;
                self.last_params = Some(qt.params().to_vec());
                Ok((wq, Some(qt)))
            }
            None => Ok((self.model.params().to_vec(), None)),
        }
    }

    fn check_loss(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence { step: self.steps, loss })
        }
    }

    fn next_chip(&mut self, weights: usize, bits: u8) -> Result<ChipField> {
        let chip = ChipField::new(splitmix_at(self.error_key, self.chips_drawn), weights, bits)?;
        self.chips_drawn += 1;
        self.last_chip = Some(chip);
        Ok(chip)
    }

    /// One step of (optionally clipped) quantization-aware training.
    pub fn quant_aware_step(&mut self, inputs: ArrayView2<f64>, labels: &[u8], lr: f64) -> Result<StepTrace> {
        let (wq, _) = self.quantized_view()?;
        let arch = self.model.arch().clone();
        let (loss, grad) = arch.backward(&wq, inputs, labels, &self.cfg.loss)?;
        self.check_loss(loss)?;
        self.opt.step(self.model.params_mut(), &grad, lr)?;
        self.steps += 1;
        Ok(StepTrace {
            clean_loss: loss,
            perturbed_loss: None,
            injection_active: false,
            flipped_bits: 0,
        })
    }

    /// One RandBET step. Until the gate opens this is a plain
    /// quantization-aware step.
    pub fn randbet_step(&mut self, inputs: ArrayView2<f64>, labels: &[u8], lr: f64) -> Result<StepTrace> {
        let p = self
            .cfg
            .p_train
            .ok_or_else(|| Error::invalid("randbet step without p_train"))?;
        let (wq, qt) = self.quantized_view()?;
        let qt = qt.ok_or_else(|| Error::invalid("bit error training needs a quantization scheme"))?;
        let arch = self.model.arch().clone();
        let (loss, mut grad) = arch.backward(&wq, inputs, labels, &self.cfg.loss)?;
        self.check_loss(loss)?;

        let mut trace = StepTrace {
            clean_loss: loss,
            perturbed_loss: None,
            injection_active: false,
            flipped_bits: 0,
        };
        if self.gate.observe(loss) {
            let chip = self.next_chip(qt.len(), qt.scheme().precision())?;
            let mut noisy = qt;
            let report = inject_random_in_place(noisy.codes_mut(), &chip, p)?;
            let mut wt = wq;
            noisy.dequantize_into(&mut wt)?;
            let (ploss, pgrad) = arch.backward(&wt, inputs, labels, &self.cfg.loss)?;
            self.check_loss(ploss)?;
            for (g, pg) in grad.iter_mut().zip(&pgrad) {
                *g += self.cfg.lambda * pg;
            }
            trace.perturbed_loss = Some(ploss);
            trace.injection_active = true;
            trace.flipped_bits = report.flipped_bits;
        }
        self.opt.step(self.model.params_mut(), &grad, lr)?;
        self.steps += 1;
        Ok(trace)
    }

    /// Dispatch on the configuration: RandBET if `p_train` is set.
    pub fn step(&mut self, inputs: ArrayView2<f64>, labels: &[u8], lr: f64) -> Result<StepTrace> {
        if self.cfg.p_train.is_some() {
            self.randbet_step(inputs, labels, lr)
        } else {
            self.quant_aware_step(inputs, labels, lr)
        }
    }

    /// Clip and quantize the current master weights for deployment.
    pub fn finalize(&self) -> Result<TrainedModel> {
        let mut params = self.model.params().to_vec();
        if let Some(wmax) = self.cfg.wmax {
            crate::smallnet::clip_weights(&mut params, wmax);
        }
        let arch = self.model.arch().clone();
        match &self.cfg.scheme {
            Some(scheme) => {
                let qt = fit_and_quantize(&params, &self.groups, scheme)?;
                qt.dequantize_into(&mut params)?;
                Ok(TrainedModel {
                    model: Model::from_params(arch, params)?,
                    quantized: Some(qt),
                })
            }
            None => Ok(TrainedModel {
                model: Model::from_params(arch, params)?,
                quantized: None,
            }),
        }
    }
}

/// Train `model` on `data` for `cfg.epochs` epochs of shuffled mini-batches.
pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.dim() != model.arch().inputs() {
        return Err(Error::DimensionMismatch {
            what: "input dimension",
            expected: model.arch().inputs(),
            found: data.dim(),
        });
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs * data.len().div_ceil(cfg.batch_size));
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = gather_rows(data.images(), batch);
            labels.clear();
            labels.extend(batch.iter().map(|&i| data.labels()[i]));
            let step = trainer.steps();
            let t = trainer.step(x.view(), &labels, lr)?;
            trace.push(TraceRow {
                step,
                epoch,
                lr,
                trace: t,
            });
        }
    }
    Ok(TrainOutcome {
        trained: trainer.finalize()?,
        master: trainer.model().clone(),
        trace,
    })
}

pub const TRACE_HEADER: &str = "step,epoch,lr,clean_loss,perturbed_loss,injection_active,flipped_bits";

/// Write the per-step trace as CSV; the perturbed loss is empty when no bit
/// errors were injected.
pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            sig6(r.lr),
            sig6(r.trace.clean_loss),
            r.trace.perturbed_loss.map(sig6).unwrap_or_default(),
            u8::from(r.trace.injection_active),
            r.trace.flipped_bits
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            epochs: 10,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..10).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[3], 0.05);
        assert!((lrs[4] - 0.005).abs() < 1e-15);
        assert!((lrs[5] - 0.005).abs() < 1e-15);
        assert!((lrs[6] - 0.0005).abs() < 1e-15);
        assert!((lrs[8] - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn gate_never_opens_above_threshold() {
        let mut g = InjectionGate::new(1.75, 0.95);
        for _ in 0..1000 {
            assert!(!g.observe(2.0));
        }
    }

    #[test]
    fn gate_latches() {
        let mut g = InjectionGate::new(1.75, 0.0);
        assert!(!g.observe(2.3));
        assert!(g.observe(1.7));
        assert!(g.observe(2.5));
        assert!(g.observe(9.0));
        assert!(g.is_active());
    }

    #[test]
    fn gate_smooths() {
        let mut g = InjectionGate::new(1.75, 0.95);
        g.observe(2.0);
        // A single dip is averaged away.
        assert!(!g.observe(1.0));
        assert!((g.smoothed_loss().unwrap() - (0.95 * 2.0 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.p_train = Some(0.01);
        cfg.scheme = None;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            wmax: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
