//! Fake-quantization and magnitude-sparsification operators with dynamic
//! scales/masks, plus the straight-through wrappers that train through them.
//!
//! Quantized values stay in full-precision storage (fake quantization); a
//! compression spec describes what happens to weights and, optionally, to
//! the inputs of compressible matmuls.

use crate::tensor::{Elem, Tape, Tensor, Var};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("group mismatch: {0}")]
    GroupMismatch(String),
    #[error("tape error: {0}")]
    Core(#[from] crate::tensor::CoreError),
}

pub type Result<T> = std::result::Result<T, CompressError>;

/// Quantization grid family. `Symmetric` has half-integer levels and no
/// zero (2-bit: -1.5, -0.5, 0.5, 1.5); `Centered` has integer levels
/// including zero (2-bit: -2, -1, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantGrid {
    SymmetricHalfInteger,
    CenteredInteger,
}

/// Statistic the dynamic scale is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleStat {
    AbsMax,
    AbsMean,
}

/// Scale-sharing granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantGranularity {
    PerTensor,
    /// One scale per output row of a 2-D weight matrix.
    PerRow,
    /// One scale per row of an activation matrix (row = token).
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u8,
    pub grid: QuantGrid,
    pub scale_stat: ScaleStat,
    pub granularity: QuantGranularity,
}

impl QuantSpec {
    /// Default weight quantizer: symmetric grid, absmax scale, per-tensor.
    pub fn weight(bits: u8) -> Self {
        Self {
            bits,
            grid: QuantGrid::SymmetricHalfInteger,
            scale_stat: ScaleStat::AbsMax,
            granularity: QuantGranularity::PerTensor,
        }
    }

    /// Default activation quantizer: symmetric grid, absmax scale, per-token.
    pub fn activation(bits: u8) -> Self {
        Self {
            bits,
            grid: QuantGrid::SymmetricHalfInteger,
            scale_stat: ScaleStat::AbsMax,
            granularity: QuantGranularity::PerToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 1 | 2 | 3 | 4 | 8) {
            return Err(CompressError::InvalidSpec(format!(
                "unsupported bit-width {} (expected 1, 2, 3, 4 or 8)",
                self.bits
            )));
        }
        Ok(())
    }

    /// Largest level magnitude of the grid ("zero point" in the tuning
    /// table sense): 1.5 for 2-bit symmetric, 2 for 2-bit centered.
    pub fn qmax(&self) -> f64 {
        let half = 1u32 << (self.bits - 1);
        match self.grid {
            QuantGrid::SymmetricHalfInteger => half as f64 - 0.5,
            QuantGrid::CenteredInteger => half as f64,
        }
    }
}

/// Which positions sparsity keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsityPattern {
    /// Keep the top `ceil((1-zeros)*group)` entries of each group (never 0).
    Fraction { zeros: f64 },
    /// Keep exactly `keep` largest-magnitude entries in every contiguous
    /// group of `group` elements.
    NOfM { keep: usize, group: usize },
}

/// Group shape for fraction-pattern sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseGranularity {
    PerTensor,
    PerRow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySpec {
    pub pattern: SparsityPattern,
    /// Only meaningful for the fraction pattern; N:M groups are defined by
    /// the pattern itself.
    pub granularity: SparseGranularity,
}

impl SparsitySpec {
    pub fn fraction(zeros: f64, granularity: SparseGranularity) -> Self {
        Self { pattern: SparsityPattern::Fraction { zeros }, granularity }
    }

    pub fn n_of_m(keep: usize, group: usize) -> Self {
        Self {
            pattern: SparsityPattern::NOfM { keep, group },
            granularity: SparseGranularity::PerTensor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.pattern {
            SparsityPattern::Fraction { zeros } => {
                if !(zeros > 0.0 && zeros < 1.0) {
                    return Err(CompressError::InvalidSpec(format!(
                        "sparsity fraction {zeros} must lie in (0, 1)"
                    )));
                }
            }
            SparsityPattern::NOfM { keep, group } => {
                if keep == 0 || group == 0 || keep > group {
                    return Err(CompressError::InvalidSpec(format!(
                        "invalid {keep}:{group} pattern"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of zeroed weights implied by the pattern.
    pub fn zero_fraction(&self) -> f64 {
        match self.pattern {
            SparsityPattern::Fraction { zeros } => zeros,
            SparsityPattern::NOfM { keep, group } => 1.0 - keep as f64 / group as f64,
        }
    }
}

/// What happens to the weights of compressible layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightCompression {
    None,
    Quant(QuantSpec),
    Sparse(SparsitySpec),
}

/// Full description of a compression configuration: weight treatment plus
/// optional activation quantization. The dense baseline is `(None, None)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionSpec {
    pub weight: WeightCompression,
    pub activation: Option<QuantSpec>,
}

impl CompressionSpec {
    pub fn dense() -> Self {
        Self { weight: WeightCompression::None, activation: None }
    }

    pub fn weight_quant(bits: u8) -> Self {
        Self { weight: WeightCompression::Quant(QuantSpec::weight(bits)), activation: None }
    }

    pub fn full_quant(weight_bits: u8, act_bits: u8) -> Self {
        Self {
            weight: WeightCompression::Quant(QuantSpec::weight(weight_bits)),
            activation: Some(QuantSpec::activation(act_bits)),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.weight, WeightCompression::None) && self.activation.is_none()
    }

    /// Bits per weight; 16 for uncompressed or sparse weights (BF16
    /// baseline convention).
    pub fn weight_bits(&self) -> u8 {
        match self.weight {
            WeightCompression::Quant(q) => q.bits,
            _ => 16,
        }
    }

    /// Bits per activation; 16 when activations are untouched.
    pub fn activation_bits(&self) -> u8 {
        self.activation.map(|q| q.bits).unwrap_or(16)
    }

    pub fn sparsity(&self) -> Option<SparsitySpec> {
        match self.weight {
            WeightCompression::Sparse(s) => Some(s),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.weight {
            WeightCompression::Quant(q) => {
                q.validate()?;
                if q.granularity == QuantGranularity::PerToken {
                    return Err(CompressError::InvalidSpec(
                        "per_token scales are only valid for activations".into(),
                    ));
                }
            }
            WeightCompression::Sparse(s) => s.validate()?,
            WeightCompression::None => {}
        }
        if let Some(a) = self.activation {
            a.validate()?;
            if a.granularity == QuantGranularity::PerRow {
                return Err(CompressError::InvalidSpec(
                    "per_row scales are only valid for weights".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// canonical spec strings

impl fmt::Display for CompressionSpec {
    /// Canonical short form used in CLIs, configs and run records:
    /// `dense`, `w4`, `w2:centered`, `w4a4`, `s0.5:per_row`, `s0.5:64of128`.
    /// Non-default switches are spelled out (`w2:absmean`, `w4:per_row`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_dense() {
            return write!(f, "dense");
        }
        match self.weight {
            WeightCompression::None => {}
            WeightCompression::Quant(q) => {
                write!(f, "w{}", q.bits)?;
                if q.grid == QuantGrid::CenteredInteger {
                    write!(f, ":centered")?;
                }
                if q.scale_stat == ScaleStat::AbsMean {
                    write!(f, ":absmean")?;
                }
                if q.granularity == QuantGranularity::PerRow {
                    write!(f, ":per_row")?;
                }
            }
            WeightCompression::Sparse(s) => match s.pattern {
                SparsityPattern::Fraction { zeros } => {
                    write!(f, "s{}", zeros)?;
                    match s.granularity {
                        SparseGranularity::PerRow => write!(f, ":per_row")?,
                        SparseGranularity::PerTensor => write!(f, ":per_tensor")?,
                    }
                }
                SparsityPattern::NOfM { keep, group } => {
                    write!(f, "s{}", s.zero_fraction())?;
                    write!(f, ":{keep}of{group}")?;
                }
            },
        }
        if let Some(a) = self.activation {
            write!(f, "a{}", a.bits)?;
            if a.grid == QuantGrid::CenteredInteger {
                write!(f, ":centered")?;
            }
            if a.scale_stat == ScaleStat::AbsMean {
                write!(f, ":absmean")?;
            }
        }
        Ok(())
    }
}

impl FromStr for CompressionSpec {
    type Err = CompressError;

    fn from_str(s: &str) -> Result<Self> {
        let orig = s;
        if s == "dense" {
            return Ok(Self::dense());
        }
        let bad = |why: &str| CompressError::InvalidSpec(format!("{orig:?}: {why}"));

        // split off a trailing activation part: the last "a<bits>[:...]"
        // segment that starts at a position where 'a' follows the weight part
        let (weight_part, act_part) = match s.char_indices().rev().find_map(|(i, c)| {
            if c != 'a' {
                return None;
            }
            let tail = &s[i + 1..];
            let digits_end = tail.find(|c: char| !c.is_ascii_digit()).unwrap_or(tail.len());
            if digits_end == 0 {
                return None;
            }
            // everything after the digits must be option segments
            if tail[digits_end..].is_empty() || tail[digits_end..].starts_with(':') {
                Some((&s[..i], &s[i + 1..]))
            } else {
                None
            }
        }) {
            Some((w, a)) => (w, Some(a)),
            None => (s, None),
        };

        let weight = if weight_part.is_empty() {
            WeightCompression::None
        } else if let Some(rest) = weight_part.strip_prefix('w') {
            let mut segs = rest.split(':');
            let bits: u8 = segs
                .next()
                .and_then(|b| b.parse().ok())
                .ok_or_else(|| bad("weight bits expected after 'w'"))?;
            let mut q = QuantSpec::weight(bits);
            for seg in segs {
                match seg {
                    "centered" => q.grid = QuantGrid::CenteredInteger,
                    "symmetric" => q.grid = QuantGrid::SymmetricHalfInteger,
                    "absmean" => q.scale_stat = ScaleStat::AbsMean,
                    "absmax" => q.scale_stat = ScaleStat::AbsMax,
                    "per_row" => q.granularity = QuantGranularity::PerRow,
                    "per_tensor" => q.granularity = QuantGranularity::PerTensor,
                    other => return Err(bad(&format!("unknown weight option {other:?}"))),
                }
            }
            WeightCompression::Quant(q)
        } else if let Some(rest) = weight_part.strip_prefix('s') {
            let mut segs = rest.split(':');
            let zeros: f64 = segs
                .next()
                .and_then(|z| z.parse().ok())
                .ok_or_else(|| bad("sparsity fraction expected after 's'"))?;
            let mut spec = SparsitySpec::fraction(zeros, SparseGranularity::PerRow);
            for seg in segs {
                match seg {
                    "per_row" => spec.granularity = SparseGranularity::PerRow,
                    "per_tensor" => spec.granularity = SparseGranularity::PerTensor,
                    nm if nm.contains("of") => {
                        let (n, m) = nm.split_once("of").unwrap();
                        let keep: usize =
                            n.parse().map_err(|_| bad(&format!("bad N in {nm:?}")))?;
                        let group: usize =
                            m.parse().map_err(|_| bad(&format!("bad M in {nm:?}")))?;
                        let implied = 1.0 - keep as f64 / group as f64;
                        if (implied - zeros).abs() > 1e-9 {
                            return Err(bad(&format!(
                                "fraction {zeros} inconsistent with {keep}:{group} (implies {implied})"
                            )));
                        }
                        spec = SparsitySpec::n_of_m(keep, group);
                    }
                    other => return Err(bad(&format!("unknown sparsity option {other:?}"))),
                }
            }
            WeightCompression::Sparse(spec)
        } else {
            return Err(bad("expected 'dense', 'w...', 's...' or 'a...'"));
        };

        let activation = match act_part {
            None => None,
            Some(rest) => {
                let mut segs = rest.split(':');
                let bits: u8 = segs
                    .next()
                    .and_then(|b| b.parse().ok())
                    .ok_or_else(|| bad("activation bits expected after 'a'"))?;
                let mut q = QuantSpec::activation(bits);
                for seg in segs {
                    match seg {
                        "centered" => q.grid = QuantGrid::CenteredInteger,
                        "symmetric" => q.grid = QuantGrid::SymmetricHalfInteger,
                        "absmean" => q.scale_stat = ScaleStat::AbsMean,
                        "absmax" => q.scale_stat = ScaleStat::AbsMax,
                        other => return Err(bad(&format!("unknown activation option {other:?}"))),
                    }
                }
                Some(q)
            }
        };

        let spec = CompressionSpec { weight, activation };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// quantization

/// Fake-quantize `x` onto the spec's grid with dynamically computed scales.
///
/// Per group, the scale statistic is `max|x|` (absmax) or
/// `mean|x| * qmax/E|z|` for standard-normal `z` (absmean); elements map to
/// the nearest grid level with ties toward zero, then scale back. All-zero
/// groups quantize to zeros.
pub fn quantize<E: Elem>(x: &Tensor<E>, spec: &QuantSpec) -> Result<Tensor<E>> {
    spec.validate()?;
    if !x.all_finite() {
        return Err(CompressError::NonFinite("quantize"));
    }
    if x.numel() == 0 {
        return Err(CompressError::GroupMismatch("empty tensor".into()));
    }
    let mut out = vec![E::zero(); x.numel()];
    match spec.granularity {
        QuantGranularity::PerTensor => {
            quantize_group(x.data(), &mut out, spec);
        }
        QuantGranularity::PerRow | QuantGranularity::PerToken => {
            if x.shape().len() != 2 {
                return Err(CompressError::GroupMismatch(format!(
                    "row granularity needs a rank-2 tensor, got {:?}",
                    x.shape()
                )));
            }
            let cols = x.shape()[1];
            for (src, dst) in x.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
                quantize_group(src, dst, spec);
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("shape preserved"))
}

fn quantize_group<E: Elem>(x: &[E], out: &mut [E], spec: &QuantSpec) {
    match spec.grid {
        QuantGrid::SymmetricHalfInteger => quantize_symmetric(x, out, spec),
        QuantGrid::CenteredInteger => quantize_centered(x, out, spec),
    }
}

/// E|z| for standard normal z; the absmean scale is calibrated so a
/// Gaussian group lands where absmax would put it in expectation.
fn absmean_kappa(qmax: f64) -> f64 {
    qmax / (2.0 / std::f64::consts::PI).sqrt()
}

fn quantize_symmetric<E: Elem>(x: &[E], out: &mut [E], spec: &QuantSpec) {
    let qmax = spec.qmax();
    let jmax = (1usize << (spec.bits - 1)) - 1;
    // `top` is the value the largest grid level maps back to. Level ratios
    // (2j+1)/(2^bits - 1) put the top level at ratio exactly 1, which makes
    // absmax quantization an exact fixed point under requantization.
    let top = match spec.scale_stat {
        ScaleStat::AbsMax => {
            x.iter().fold(E::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
        }
        ScaleStat::AbsMean => {
            // top-level value = qmax * s with s = kappa * mean|x|
            let mean = x.iter().fold(E::zero(), |a, &v| a + v.abs())
                / E::from_f64c(x.len() as f64);
            E::from_f64c(qmax * absmean_kappa(qmax)) * mean
        }
    };
    if top == E::zero() {
        out.fill(E::zero());
        return;
    }
    let qmax_e = E::from_f64c(qmax);
    let ratios: Vec<E> = (0..=jmax)
        .map(|j| E::from_f64c((2 * j + 1) as f64 / (2.0 * qmax)))
        .collect();
    for (o, &v) in out.iter_mut().zip(x) {
        // sign-bit branch keeps quantize(-x) == -quantize(x) exact even at zeros
        let neg = v.is_sign_negative();
        let m = (v.abs() / top) * qmax_e; // |x|/s in level units
        // nearest half-integer level, ties toward zero
        let j = (m.to_f64c() - 1.0).ceil();
        let j = if j < 0.0 { 0 } else { (j as usize).min(jmax) };
        let mag = ratios[j] * top;
        *o = if neg { E::zero() - mag } else { mag };
    }
}

fn quantize_centered<E: Elem>(x: &[E], out: &mut [E], spec: &QuantSpec) {
    let q = 1i64 << (spec.bits - 1);
    let (lo, hi) = (-q, q - 1);
    let s = match spec.scale_stat {
        ScaleStat::AbsMax => {
            // Two-sided dynamic scale: the binding side of the asymmetric
            // grid sets the step, so extremes stay representable and
            // requantization is a fixed point.
            let mut pos = E::zero();
            let mut neg = E::zero();
            for &v in x {
                if v > pos {
                    pos = v;
                }
                if E::zero() - v > neg {
                    neg = E::zero() - v;
                }
            }
            let neg_cand = neg / E::from_f64c(q as f64);
            let pos_cand = if hi > 0 { pos / E::from_f64c(hi as f64) } else { E::zero() };
            if neg_cand > pos_cand {
                neg_cand
            } else {
                pos_cand
            }
        }
        ScaleStat::AbsMean => {
            let mean = x.iter().fold(E::zero(), |a, &v| a + v.abs())
                / E::from_f64c(x.len() as f64);
            E::from_f64c(absmean_kappa(spec.qmax())) * mean
        }
    };
    if s == E::zero() {
        out.fill(E::zero());
        return;
    }
    for (o, &v) in out.iter_mut().zip(x) {
        let w = (v / s).to_f64c();
        let t = w.trunc();
        let f = w - t;
        let k = if f.abs() > 0.5 { t + f.signum() } else { t };
        let k = k.clamp(lo as f64, hi as f64);
        *o = E::from_f64c(k) * s;
    }
}

// ---------------------------------------------------------------------------
// sparsification

/// Binary mask with the `keep` largest-|x| positions per group set to one;
/// ties broken by lowest flat index.
pub fn topk_mask<E: Elem>(x: &Tensor<E>, spec: &SparsitySpec) -> Result<Tensor<E>> {
    spec.validate()?;
    if !x.all_finite() {
        return Err(CompressError::NonFinite("topk_mask"));
    }
    let mut mask = vec![E::zero(); x.numel()];
    match spec.pattern {
        SparsityPattern::Fraction { zeros } => match spec.granularity {
            SparseGranularity::PerTensor => {
                mark_topk(x.data(), &mut mask, keep_count(zeros, x.numel()));
            }
            SparseGranularity::PerRow => {
                if x.shape().len() != 2 {
                    return Err(CompressError::GroupMismatch(format!(
                        "per_row sparsity needs a rank-2 tensor, got {:?}",
                        x.shape()
                    )));
                }
                let cols = x.shape()[1];
                let keep = keep_count(zeros, cols);
                for (src, dst) in x.data().chunks_exact(cols).zip(mask.chunks_exact_mut(cols)) {
                    mark_topk(src, dst, keep);
                }
            }
        },
        SparsityPattern::NOfM { keep, group } => {
            if x.numel() % group != 0 {
                return Err(CompressError::GroupMismatch(format!(
                    "{} elements not divisible into groups of {group}",
                    x.numel()
                )));
            }
            for (src, dst) in x.data().chunks_exact(group).zip(mask.chunks_exact_mut(group)) {
                mark_topk(src, dst, keep);
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), mask).expect("shape preserved"))
}

/// Kept entries for a fraction pattern: `ceil((1-zeros)*n)`, at least one.
fn keep_count(zeros: f64, group_size: usize) -> usize {
    (((1.0 - zeros) * group_size as f64).ceil() as usize).max(1)
}

fn mark_topk<E: Elem>(vals: &[E], mask: &mut [E], keep: usize) {
    let keep = keep.min(vals.len());
    if keep == vals.len() {
        mask.fill(E::one());
        return;
    }
    let mut idx: Vec<u32> = (0..vals.len() as u32).collect();
    idx.select_nth_unstable_by(keep - 1, |&a, &b| {
        let (ma, mb) = (vals[a as usize].abs(), vals[b as usize].abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    for &i in &idx[..keep] {
        mask[i as usize] = E::one();
    }
}

// ---------------------------------------------------------------------------
// straight-through wrappers

/// Forward quantized, backward identity to the full-precision latent.
pub fn quantize_ste<E: Elem>(tape: &mut Tape<E>, latent: Var, spec: &QuantSpec) -> Result<Var> {
    let q = quantize(tape.value(latent), spec)?;
    Ok(tape.custom_grad(q, latent)?)
}

/// Forward `latent * topk_mask(latent)`, backward identity; the mask is
/// recomputed on every forward.
pub fn sparsify_ste<E: Elem>(tape: &mut Tape<E>, latent: Var, spec: &SparsitySpec) -> Result<Var> {
    let mask = topk_mask(tape.value(latent), spec)?;
    let masked_data: Vec<E> = tape
        .value(latent)
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| v * m)
        .collect();
    let masked = Tensor::new(mask.shape().to_vec(), masked_data).expect("shape preserved");
    Ok(tape.custom_grad(masked, latent)?)
}

/// Apply a full weight-compression spec (quantization or sparsity) to a
/// latent weight on the tape; dense passes the latent through untouched.
pub fn compress_weight_ste<E: Elem>(
    tape: &mut Tape<E>,
    latent: Var,
    spec: &CompressionSpec,
) -> Result<Var> {
    match &spec.weight {
        WeightCompression::None => Ok(latent),
        WeightCompression::Quant(q) => quantize_ste(tape, latent, q),
        WeightCompression::Sparse(s) => sparsify_ste(tape, latent, s),
    }
}

#[cfg(test)]
mod tests;
