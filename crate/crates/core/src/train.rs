//! Teacher pretraining and dynamic-quantization training loops.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradTape;
use crate::data::PairedDataset;
use crate::loss::{record_objective, KdSwitches, LossBreakdown, LossVariant, LossWeights};
use crate::network::{Mode, SrNetwork};
use crate::optim::{Adam, AdamConfig, GroupRates};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    /// Low-resolution patch side.
    pub patch: usize,
    /// Learning rate of weights and selectors.
    pub lr: f64,
    pub scale_lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub variant: LossVariant,
    pub kd: KdSwitches,
    pub augment: bool,
    /// Fit selector input normalization on the first batch.
    pub selector_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 16,
            patch: 48,
            lr: 1e-3,
            scale_lr: 0.01,
            seed: 0,
            weights: LossWeights::default(),
            variant: LossVariant::Weighted,
            kd: KdSwitches { last: true, features: true },
            augment: true,
            selector_normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.patch < 8 {
            return Err(Error::Config(format!("patch size {} is below the 8-pixel minimum", self.patch)));
        }
        if !(self.lr > 0.0) || !(self.scale_lr >= 0.0) {
            return Err(Error::Config(format!("learning rates must be positive ({}, {})", self.lr, self.scale_lr)));
        }
        self.weights.validate()
    }

    fn rates(&self) -> GroupRates {
        GroupRates { weight: self.lr, scale: self.scale_lr, selector: self.lr }
    }
}

/// Logged per training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Mean chosen bit over the batch ledger.
    pub fqr: f64,
    /// Mean expected bit over the batch ledger.
    pub mean_expected_bit: f64,
}

fn run<F>(
    net: &mut SrNetwork,
    teacher: Option<&SrNetwork>,
    data: &PairedDataset,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(&StepRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::default());
    let rates = cfg.rates();
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for step in 0..cfg.iterations {
        let (lr, hr) = data.sample_batch(&mut rng, cfg.batch, cfg.patch, cfg.augment)?;
        let teacher_feats: Vec<Tensor> = match teacher {
            Some(t) => {
                let mut tt = GradTape::new();
                let f = t.forward(&mut tt, &lr, false)?;
                f.feats.iter().map(|v| tt.value(*v).clone()).collect()
            }
            None => Vec::new(),
        };
        let mut tape = GradTape::new();
        let fwd = net.forward(&mut tape, &lr, true)?;
        let target = net.scale_target(&hr);
        let w_reg = cfg.weights.w_reg(step);
        let (loss, parts) =
            record_objective(&mut tape, &fwd, &target, &teacher_feats, &cfg.weights, w_reg, cfg.variant, cfg.kd)?;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f32>>> = fwd.params.iter().map(|v| tape.grad(*v).map(<[f32]>::to_vec)).collect();
        {
            let mut params = net.params_mut();
            opt.step(&mut params, &grads, &rates)?;
        }
        net.clamp_scales();
        let n = fwd.ledger.len() as f64;
        let rec = StepRecord {
            step,
            loss: parts,
            fqr: fwd.ledger.fqr()?,
            mean_expected_bit: fwd.ledger.entries.iter().map(|e| e.expected_bit as f64).sum::<f64>() / n,
        };
        observe(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Trains the uniform 8-bit teacher with the pixel loss only. Clip scales
/// are first calibrated on one training batch.
pub fn pretrain_teacher<F>(net: &mut SrNetwork, data: &PairedDataset, cfg: &TrainConfig, observe: F) -> Result<Vec<StepRecord>>
where
    F: FnMut(&StepRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    net.mode = Mode::TEACHER;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCA1B);
    let (calib, _) = data.sample_batch(&mut rng, cfg.batch, cfg.patch, false)?;
    net.calibrate_scales(&calib, None)?;
    let cfg = TrainConfig { variant: LossVariant::None, ..cfg.clone() };
    run(net, None, data, &cfg, observe)
}

/// Builds a dynamic student from `teacher` and trains it with the full
/// objective, distilling from the teacher.
pub fn train_student<F>(
    teacher: &SrNetwork,
    data: &PairedDataset,
    cfg: &TrainConfig,
    observe: F,
) -> Result<(SrNetwork, Vec<StepRecord>)>
where
    F: FnMut(&StepRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCA1B);
    let (calib, _) = data.sample_batch(&mut rng, cfg.batch, cfg.patch, false)?;
    let mut student = SrNetwork::student_from_teacher(teacher, &calib, cfg.selector_normalize)?;
    let mut t = teacher.clone();
    t.mode = Mode::TEACHER;
    let history = run(&mut student, Some(&t), data, cfg, observe)?;
    Ok((student, history))
}

/// Continues training an existing network in its current mode.
pub fn fine_tune<F>(
    net: &mut SrNetwork,
    teacher: Option<&SrNetwork>,
    data: &PairedDataset,
    cfg: &TrainConfig,
    observe: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(&StepRecord),
{
    run(net, teacher, data, cfg, observe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_set;
    use crate::network::NetConfig;

    fn tiny() -> (NetConfig, PairedDataset, TrainConfig) {
        let cfg = NetConfig { blocks: 1, channels: 4, ..NetConfig::default() };
        let data = PairedDataset::from_hr(synthetic_set(3, 3, 32, 32), 2).unwrap();
        let tc = TrainConfig { iterations: 6, batch: 2, patch: 8, ..TrainConfig::default() };
        (cfg, data, tc)
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let (cfg, data, tc) = tiny();
        let mut a = SrNetwork::new(cfg.clone(), Mode::TEACHER, 1).unwrap();
        let mut b = SrNetwork::new(cfg, Mode::TEACHER, 1).unwrap();
        let ha = pretrain_teacher(&mut a, &data, &tc, |_| {}).unwrap();
        let hb = pretrain_teacher(&mut b, &data, &tc, |_| {}).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let (sa, ha) = train_student(&a, &data, &tc, |_| {}).unwrap();
        let (sb, hb) = train_student(&b, &data, &tc, |_| {}).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let (cfg, _, tc) = tiny();
        let mut net = SrNetwork::new(cfg, Mode::TEACHER, 1).unwrap();
        let empty = PairedDataset::from_hr(Vec::new(), 2).unwrap();
        assert!(matches!(pretrain_teacher(&mut net, &empty, &tc, |_| {}), Err(Error::Config(_))));
        assert!(matches!(train_student(&net, &empty, &tc, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn scales_stay_positive_and_teacher_reports_eight_bits() {
        let (cfg, data, tc) = tiny();
        let mut net = SrNetwork::new(cfg, Mode::TEACHER, 2).unwrap();
        let tc = TrainConfig { scale_lr: 10.0, ..tc };
        let h = pretrain_teacher(&mut net, &data, &tc, |_| {}).unwrap();
        assert!(h.iter().all(|r| r.fqr == 8.0));
        assert!(net.modules().all(|m| m.quantizers.iter().all(|q| q.scale > 0.0)));
    }
}
