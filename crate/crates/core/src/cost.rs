//! Per-(patch, layer) bit-width records and the BitOPs / FQR aggregates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// One quantized convolution applied to one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub patch_id: usize,
    pub layer_id: usize,
    pub chosen_bit: u32,
    pub weight_bits: u32,
    pub probs: Vec<f32>,
    /// Detached `Σ_k b_k · P_k`.
    pub expected_bit: f32,
    /// Multiply-accumulates `C · C_out · F² · H · W`.
    pub macs: u64,
}

impl LedgerEntry {
    /// Operation count, a multiply and an add per MAC.
    pub fn ops(&self) -> f64 {
        2.0 * self.macs as f64
    }

    /// `(b_w/32)(b/32) · ops`, not scaled to giga.
    pub fn bitops(&self) -> f64 {
        (self.weight_bits as f64 / 32.0) * (self.chosen_bit as f64 / 32.0) * self.ops()
    }
}

/// `C · C_out · F² · H · W` for a stride-1 "same" convolution.
pub fn conv_macs(c_in: usize, c_out: usize, f: usize, h: usize, w: usize) -> u64 {
    (c_in * c_out * f * f) as u64 * (h * w) as u64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    pub entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: LedgerEntry) {
        self.entries.push(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require_entries(&self, what: &str) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Contract(format!("{what} of an empty ledger")));
        }
        Ok(())
    }

    /// Appends `other` with its patch ids replaced by `patch_id`.
    pub fn absorb(&mut self, other: CostLedger, patch_id: usize) {
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.patch_id = patch_id;
            e
        }));
    }

    /// Orders entries by (patch, layer) so that ledgers assembled in any
    /// order compare equal.
    pub fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.patch_id, e.layer_id));
    }

    /// Total BitOPs in units of 10⁹.
    pub fn bitops_g(&self) -> Result<f64> {
        self.require_entries("BitOPs")?;
        let mut keys: Vec<f64> = self.entries.iter().map(LedgerEntry::bitops).collect();
        // order-independent summation
        keys.sort_by(f64::total_cmp);
        Ok(keys.iter().sum::<f64>() / 1e9)
    }

    /// Unweighted mean chosen bit over all entries.
    pub fn fqr(&self) -> Result<f64> {
        self.require_entries("FQR")?;
        let total: u64 = self.entries.iter().map(|e| e.chosen_bit as u64).sum();
        Ok(total as f64 / self.entries.len() as f64)
    }

    /// Mean chosen bit over layers, per patch.
    pub fn mean_bit_by_patch(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let s = acc.entry(e.patch_id).or_default();
            s.0 += e.chosen_bit as u64;
            s.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
    }

    /// Mean chosen bit per layer, in layer order.
    pub fn mean_bit_by_layer(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let s = acc.entry(e.layer_id).or_default();
            s.0 += e.chosen_bit as u64;
            s.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
    }

    /// `Σ b* · OPs`.
    pub fn bit_loss_conventional(&self) -> Result<f64> {
        self.require_entries("bit loss")?;
        Ok(self.entries.iter().map(|e| e.chosen_bit as f64 * e.ops()).sum())
    }

    /// `Σ (b* / E) · OPs` with `E` the stored expected bit.
    pub fn bit_loss_weighted(&self) -> Result<f64> {
        self.require_entries("bit loss")?;
        let mut total = 0f64;
        for e in &self.entries {
            if !(e.expected_bit > 0.0) {
                return Err(Error::Contract(format!(
                    "expected bit {} of patch {} layer {} is not positive",
                    e.expected_bit, e.patch_id, e.layer_id
                )));
            }
            total += e.chosen_bit as f64 / e.expected_bit as f64 * e.ops();
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(patch_id: usize, layer_id: usize, bit: u32, probs: Vec<f32>, macs: u64) -> LedgerEntry {
        let bits = [4.0, 6.0, 8.0];
        let expected = if probs.len() == 3 { probs.iter().zip(bits).map(|(p, b)| p * b).sum() } else { bit as f32 };
        LedgerEntry { patch_id, layer_id, chosen_bit: bit, weight_bits: 8, probs, expected_bit: expected, macs }
    }

    #[test]
    fn bitops_matches_formula() {
        let macs = conv_macs(16, 16, 3, 96, 96);
        let l = CostLedger { entries: vec![entry(0, 0, 4, vec![], macs)] };
        let oracle = 0.25 * 0.125 * 2.0 * 16.0 * 16.0 * 9.0 * 96.0 * 96.0 * 1e-9;
        let got = l.bitops_g().unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-12);
        assert!((got - 0.001327).abs() < 1e-6);
    }

    #[test]
    fn float_entries_reduce_to_plain_ops() {
        let mut e = entry(0, 0, 32, vec![], 1000);
        e.weight_bits = 32;
        assert_eq!(e.bitops(), 2000.0);
    }

    #[test]
    fn halving_bits_halves_bitops() {
        let a = CostLedger { entries: (0..5).map(|i| entry(i, 0, 8, vec![], 777 + i as u64)).collect() };
        let mut b = a.clone();
        b.entries.iter_mut().for_each(|e| e.chosen_bit = 4);
        assert_eq!(b.bitops_g().unwrap() * 2.0, a.bitops_g().unwrap());
    }

    #[test]
    fn fqr_means() {
        let l = CostLedger { entries: (0..6).map(|i| entry(i, 0, 8, vec![], 1)).collect() };
        assert_eq!(l.fqr().unwrap(), 8.0);
        let l = CostLedger { entries: vec![entry(0, 0, 4, vec![], 1), entry(0, 1, 6, vec![], 1), entry(0, 2, 8, vec![], 1)] };
        assert_eq!(l.fqr().unwrap(), 6.0);
        assert!(matches!(CostLedger::new().fqr(), Err(Error::Contract(_))));
    }

    #[test]
    fn conventional_bit_loss_examples() {
        let x = 50u64;
        let l = CostLedger { entries: vec![entry(0, 0, 8, vec![], x)] };
        assert_eq!(l.bit_loss_conventional().unwrap(), 8.0 * 2.0 * x as f64);
        let mut doubled = l.clone();
        doubled.entries.push(entry(1, 0, 8, vec![], x));
        assert_eq!(doubled.bit_loss_conventional().unwrap(), 2.0 * l.bit_loss_conventional().unwrap());
        let three = CostLedger { entries: vec![entry(0, 0, 4, vec![], x), entry(0, 1, 6, vec![], x), entry(0, 2, 8, vec![], x)] };
        assert_eq!(three.bit_loss_conventional().unwrap(), 18.0 * 2.0 * x as f64);
        assert!(matches!(CostLedger::new().bit_loss_conventional(), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_bit_loss_examples() {
        let ops = 2.0 * 10.0;
        let one_hot = CostLedger { entries: vec![entry(0, 0, 8, vec![0.0, 0.0, 1.0], 10)] };
        assert_eq!(one_hot.bit_loss_weighted().unwrap(), ops);
        let a = CostLedger { entries: vec![entry(0, 0, 8, vec![0.1, 0.1, 0.8], 10)] };
        let b = CostLedger { entries: vec![entry(0, 0, 8, vec![0.2, 0.2, 0.6], 10)] };
        let ra = a.bit_loss_weighted().unwrap() / ops;
        let rb = b.bit_loss_weighted().unwrap() / ops;
        assert!((ra - 8.0 / 7.4).abs() < 1e-6, "{ra}");
        // 0.2·4 + 0.2·6 + 0.6·8 = 6.8
        assert!((rb - 8.0 / 6.8).abs() < 1e-6, "{rb}");
        assert!(rb > ra);
        let mut bad = one_hot.clone();
        bad.entries[0].expected_bit = 0.0;
        assert!(matches!(bad.bit_loss_weighted(), Err(Error::Contract(_))));
    }

    #[test]
    fn one_hot_weighted_times_bit_equals_conventional_per_term() {
        for bit in [4u32, 6, 8] {
            let idx = (bit as usize - 4) / 2;
            let mut p = vec![0.0; 3];
            p[idx] = 1.0;
            let l = CostLedger { entries: vec![entry(0, 0, bit, p, 33)] };
            assert_eq!(l.bit_loss_weighted().unwrap() * bit as f64, l.bit_loss_conventional().unwrap());
        }
    }

    #[test]
    fn strictly_smaller_bit_strictly_decreases_bitops() {
        let base = CostLedger { entries: (0..4).map(|i| entry(i, i % 2, 8, vec![], 100 + i as u64)).collect() };
        for i in 0..4 {
            let mut l = base.clone();
            l.entries[i].chosen_bit = 6;
            assert!(l.bitops_g().unwrap() < base.bitops_g().unwrap());
        }
    }

    #[test]
    fn per_patch_means() {
        let l = CostLedger {
            entries: vec![entry(0, 0, 4, vec![], 1), entry(0, 1, 8, vec![], 1), entry(3, 0, 8, vec![], 1)],
        };
        let m = l.mean_bit_by_patch();
        assert_eq!(m[&0], 6.0);
        assert_eq!(m[&3], 8.0);
    }
}
