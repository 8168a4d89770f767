//! Training objective: pixel L1, bit regularization and feature
//! distillation.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{GradTape, Var};
use crate::cost::CostLedger;
use crate::network::Forward;
use crate::{Error, Result, Tensor};

/// Which bit regularizer enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Selected bit over detached expected bit, times OPs.
    Weighted,
    /// Selected bit times OPs.
    Conventional,
    None,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::Weighted => "wb",
            LossVariant::Conventional => "b",
            LossVariant::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wb" => Ok(LossVariant::Weighted),
            "b" => Ok(LossVariant::Conventional),
            "none" => Ok(LossVariant::None),
            _ => Err(Error::Config(format!("unknown loss variant `{s}` (expected wb, b or none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w_kd: f64,
    pub w_kdf: f64,
    pub w_reg_init: f64,
    pub w_reg_step: f64,
    pub w_reg_interval: u64,
    /// OPs are divided by this before entering the bit loss.
    pub ops_unit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w_kd: 1000.0, w_kdf: 100.0, w_reg_init: 1e-4, w_reg_step: 1e-6, w_reg_interval: 1000, ops_unit: 1e5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w_kd, self.w_kdf, self.w_reg_init, self.w_reg_step];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        if self.w_reg_interval == 0 {
            return Err(Error::Config("w_reg_interval must be positive".into()));
        }
        if !(self.ops_unit > 0.0) {
            return Err(Error::Config(format!("ops_unit must be positive, got {}", self.ops_unit)));
        }
        Ok(())
    }

    /// Bit-loss weight after `t` iterations.
    pub fn w_reg(&self, t: u64) -> f64 {
        self.w_reg_init + self.w_reg_step * (t / self.w_reg_interval) as f64
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub bit: f64,
    pub kd: f64,
    pub kdf: f64,
    pub w_reg: f64,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("{what}: shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "l1")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.data().len() as f64)
}

pub fn mse_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "mse")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64)
}

/// `(L_kd, L_kdf)`: MSE between the last features, and the mean MSE over
/// all feature pairs.
pub fn kd_losses(student: &[Tensor], teacher: &[Tensor]) -> Result<(f64, f64)> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Contract(format!("{} student features for {} teacher features", student.len(), teacher.len())));
    }
    let per: Vec<f64> = student.iter().zip(teacher).map(|(s, t)| mse_mean(s, t)).collect::<Result<_>>()?;
    Ok((per[per.len() - 1], per.iter().sum::<f64>() / per.len() as f64))
}

/// Bit loss of a ledger in `ops_unit` units.
pub fn ledger_bit_loss(ledger: &CostLedger, variant: LossVariant, ops_unit: f64) -> Result<f64> {
    Ok(match variant {
        LossVariant::Weighted => ledger.bit_loss_weighted()? / ops_unit,
        LossVariant::Conventional => ledger.bit_loss_conventional()? / ops_unit,
        LossVariant::None => 0.0,
    })
}

/// The full objective evaluated on plain tensors.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    sr: &Tensor,
    hr: &Tensor,
    ledger: &CostLedger,
    student_feats: &[Tensor],
    teacher_feats: &[Tensor],
    weights: &LossWeights,
    w_reg: f64,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    let l1 = l1_mean(sr, hr)?;
    let bit = ledger_bit_loss(ledger, variant, weights.ops_unit)?;
    let (kd, kdf) = if teacher_feats.is_empty() { (0.0, 0.0) } else { kd_losses(student_feats, teacher_feats)? };
    let total = weights.w1 * l1 + w_reg * bit + weights.w_kd * kd + weights.w_kdf * kdf;
    Ok(LossBreakdown { total, l1, bit, kd, kdf, w_reg })
}

/// Which distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KdSwitches {
    pub last: bool,
    pub features: bool,
}

/// Records the objective on the tape of `fwd` and returns the scalar loss
/// node with its components. `hr` is in network units; `teacher_feats` may
/// be empty to disable distillation.
#[allow(clippy::too_many_arguments)]
pub fn record_objective(
    tape: &mut GradTape,
    fwd: &Forward,
    hr: &Tensor,
    teacher_feats: &[Tensor],
    weights: &LossWeights,
    w_reg: f64,
    variant: LossVariant,
    kd: KdSwitches,
) -> Result<(Var, LossBreakdown)> {
    let l1 = tape.l1_mean(fwd.sr, hr)?;
    let mut terms: Vec<(Var, f32)> = alloc::vec![(l1, weights.w1 as f32)];
    let mut out = LossBreakdown { w_reg, l1: tape.value(l1).item() as f64, ..Default::default() };

    if variant != LossVariant::None && !fwd.layers.is_empty() {
        let mut bit_terms = Vec::with_capacity(fwd.layers.len());
        for l in &fwd.layers {
            let den = (variant == LossVariant::Weighted).then(|| l.expected.clone());
            bit_terms.push((tape.bit_regularizer(l.probs, &l.bits, &l.chosen, l.ops / weights.ops_unit, den)?, 1.0));
        }
        let bit = tape.combine(&bit_terms)?;
        out.bit = tape.value(bit).item() as f64;
        terms.push((bit, w_reg as f32));
    }
    if !teacher_feats.is_empty() {
        if teacher_feats.len() != fwd.feats.len() {
            return Err(Error::Contract(format!(
                "{} student features for {} teacher features",
                fwd.feats.len(),
                teacher_feats.len()
            )));
        }
        let m = fwd.feats.len();
        let mut per = Vec::with_capacity(m);
        for (s, t) in fwd.feats.iter().zip(teacher_feats) {
            per.push(tape.mse_mean(*s, t)?);
        }
        out.kd = tape.value(per[m - 1]).item() as f64;
        let kdf_terms: Vec<(Var, f32)> = per.iter().map(|v| (*v, 1.0 / m as f32)).collect();
        let kdf = tape.combine(&kdf_terms)?;
        out.kdf = tape.value(kdf).item() as f64;
        if kd.last {
            terms.push((per[m - 1], weights.w_kd as f32));
        }
        if kd.features {
            terms.push((kdf, weights.w_kdf as f32));
        }
    }
    let total = tape.combine(&terms)?;
    out.total = tape.value(total).item() as f64;
    Ok((total, out))
}
