//! Training objective: masked photometric reconstruction, adversarial
//! generator/discriminator terms, and the balanced total.
//!
//! All loss builders are pure tape functions; the trainer decides which
//! parameters each resulting gradient may update.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::{Real, Scalar};


/// Logits are clamped to this magnitude before log-sigmoid so extreme
/// discriminator outputs cannot produce infinities.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Minimum number of recorded batches before the balance factor may be
/// frozen.
pub const BETA_WARMUP_BATCHES: usize = 100;

/// How patch score maps collapse to a scalar before batch averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchReduction {
    Mean,
    Sum,
}

/// Weighting and reduction choices for the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Balance factor on the adversarial generator term; strictly positive.
    pub beta: Real,
    pub patch_reduction: PatchReduction,
    /// When false the trainer feeds all-true masks, so out-of-view pixels
    /// also contribute to the reconstruction term.
    pub use_validity_masks: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, patch_reduction: PatchReduction::Mean, use_validity_masks: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("balance factor must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Scalar loss values of one batch, for logging and abort checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_g: f64,
    pub l_d_gen: f64,
    pub l_d_disc: f64,
    pub l_final: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_g.is_finite()
            && self.l_d_gen.is_finite()
            && self.l_d_disc.is_finite()
            && self.l_final.is_finite()
    }
}

/// Photometric loss with bookkeeping about mask coverage.
pub struct Photometric {
    /// Scalar tape variable, differentiable into target and warped views.
    pub loss: Var,
    /// Valid pixels summed over all source views.
    pub valid_count: usize,
    /// True when no pixel was valid; the loss is exactly zero then.
    pub empty: bool,
}

/// Mean absolute intensity difference between the target and each warped
/// source view, over valid-mask pixels of all views jointly.
///
/// Normalizing by the total valid count (times channels) keeps the scale
/// comparable across resolutions and mask coverage levels.
pub fn photometric_loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    warped: &[Var],
    masks: &[Array2<bool>],
) -> Photometric {
    assert_eq!(warped.len(), masks.len(), "one mask per warped view");
    assert!(!warped.is_empty(), "photometric loss needs at least one view");
    let shape = tape.shape(target).to_vec();
    assert_eq!(shape.len(), 3, "target must be [C,H,W]");
    let channels = shape[0];

    let valid_count: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    if valid_count == 0 {
        return Photometric { loss: tape.scalar(T::zero()), valid_count: 0, empty: true };
    }

    let mut terms = Vec::with_capacity(warped.len());
    for (&w, mask) in warped.iter().zip(masks) {
        assert_eq!(tape.shape(w), &shape[..], "warped view shape mismatch");
        assert_eq!(mask.dim(), (shape[1], shape[2]), "mask extent mismatch");
        let diff = tape.sub(target, w);
        let a = tape.abs(diff);
        let m = {
            let arr = mask
                .mapv(|v| if v { T::one() } else { T::zero() })
                .into_shape_with_order(ndarray::IxDyn(&[1, shape[1], shape[2]]))
                .expect("mask is [H,W]");
            tape.constant(arr)
        };
        let masked = tape.mul(a, m);
        terms.push(tape.sum_all(masked));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let norm = 1.0 / (valid_count as f64 * channels as f64);
    let loss = tape.scale(total, T::c(norm));
    Photometric { loss, valid_count, empty: false }
}

/// Generator and discriminator adversarial terms from patch logit maps.
pub struct AdvLosses {
    /// Non-saturating generator term, −E[log D(fake)].
    pub gen: Var,
    /// −E[log D(real)] − E[log(1 − D(fake))].
    pub disc: Var,
}

fn reduce_maps<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], reduction: PatchReduction) -> Var {
    assert!(!maps.is_empty(), "adversarial loss needs at least one score map");
    let reduced: Vec<Var> = maps
        .iter()
        .map(|&m| match reduction {
            PatchReduction::Mean => tape.mean_all(m),
            PatchReduction::Sum => tape.sum_all(m),
        })
        .collect();
    let mut total = reduced[0];
    for &r in &reduced[1..] {
        total = tape.add(total, r);
    }
    tape.scale(total, T::c(1.0 / maps.len() as f64))
}

/// log σ(x) with the logit clamped into a finite-safe range.
fn log_d<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Var {
    let c = tape.clamp(logits, T::c(-LOGIT_CLAMP), T::c(LOGIT_CLAMP));
    let n = tape.neg(c);
    let sp = tape.softplus(n);
    tape.neg(sp)
}

/// log(1 − σ(x)) with the same clamping.
fn log_one_minus_d<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Var {
    let c = tape.clamp(logits, T::c(-LOGIT_CLAMP), T::c(LOGIT_CLAMP));
    let sp = tape.softplus(c);
    tape.neg(sp)
}

/// Builds both adversarial terms from per-image patch logit maps.
///
/// Expectations are taken over patches (per `reduction`) and then over the
/// batch. The generator term depends on the fake scores only.
pub fn adversarial_losses<T: Scalar>(
    tape: &mut Tape<T>,
    real_scores: &[Var],
    fake_scores: &[Var],
    reduction: PatchReduction,
) -> AdvLosses {
    let log_real: Vec<Var> = real_scores.iter().map(|&s| log_d(tape, s)).collect();
    let log_fake: Vec<Var> = fake_scores.iter().map(|&s| log_d(tape, s)).collect();
    let log_not_fake: Vec<Var> =
        fake_scores.iter().map(|&s| log_one_minus_d(tape, s)).collect();

    let e_real = reduce_maps(tape, &log_real, reduction);
    let e_fake = reduce_maps(tape, &log_fake, reduction);
    let e_not_fake = reduce_maps(tape, &log_not_fake, reduction);

    let gen = tape.neg(e_fake);
    let d_sum = tape.add(e_real, e_not_fake);
    let disc = tape.neg(d_sum);
    AdvLosses { gen, disc }
}

/// Generator-side total: reconstruction plus β times the adversarial term.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_g: Var,
    l_d_gen: Var,
    config: &LossConfig,
) -> Var {
    config.validate().expect("loss configuration");
    let weighted = tape.scale(l_d_gen, T::c(config.beta as f64));
    tape.add(l_g, weighted)
}

/// Ratio of mean reconstruction loss to mean adversarial generator loss
/// over a recorded warmup window; the result is frozen for the rest of
/// training.
pub fn calibrate_beta(history: &[(f64, f64)]) -> Result<Real> {
    if history.len() < BETA_WARMUP_BATCHES {
        return Err(Error::invalid(format!(
            "balance calibration needs at least {BETA_WARMUP_BATCHES} batches, got {}",
            history.len()
        )));
    }
    let n = history.len() as f64;
    let mean_g = history.iter().map(|(g, _)| g).sum::<f64>() / n;
    let mean_d = history.iter().map(|(_, d)| d).sum::<f64>() / n;
    if !(mean_d > 0.0 && mean_d.is_finite()) {
        return Err(Error::invalid(format!(
            "mean adversarial loss {mean_d} cannot calibrate the balance factor"
        )));
    }
    let beta = mean_g / mean_d;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("calibrated balance factor {beta} is not positive")));
    }
    Ok(beta)
}

/// One row of the loss history log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_d_gen")]
    pub l_d_gen: f64,
    #[serde(rename = "L_d_disc")]
    pub l_d_disc: f64,
    #[serde(rename = "L_final")]
    pub l_final: f64,
    pub beta: f64,
}

/// Append-only CSV loss log.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
}

impl LossLog {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(LossLog { writer: csv::Writer::from_writer(file) })
    }

    pub fn append(&mut self, row: &LossRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| Error::invalid(format!("loss log: {e}")))?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: &std::path::Path) -> Result<Vec<LossRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(format!("loss log {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec.map_err(|e| Error::invalid(format!("loss log row: {e}")))?);
    }
    Ok(rows)
}
