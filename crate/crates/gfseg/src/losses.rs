//! The four training losses and their per-phase totals.
//!
//! Pre-training optimizes segmentation + orthogonality + auxiliary;
//! fine-tuning swaps the auxiliary term for the consistency term. All terms
//! enter the total with unit weight.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::IGNORE_ID;

/// Training phase selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Pretrain => write!(f, "pretrain"),
            Phase::Finetune => write!(f, "finetune"),
        }
    }
}

/// Scalar loss components of one step. `aux` only exists during
/// pre-training, `con` only during fine-tuning; either may be zero when its
/// toggle is off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub seg: f64,
    pub orth: f64,
    pub aux: Option<f64>,
    pub con: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.seg.is_finite()
            && self.orth.is_finite()
            && self.aux.map_or(true, f64::is_finite)
            && self.con.map_or(true, f64::is_finite)
            && self.total.is_finite()
    }
}

/// Assemble the phase total from its components (all weights 1.0).
///
/// Pre-training accepts `seg`, `orth` and optionally `aux`; fine-tuning
/// accepts `seg`, `orth` and optionally `con`. A component belonging to the
/// other phase is a configuration error.
pub fn total_loss(
    seg: f64,
    orth: f64,
    aux: Option<f64>,
    con: Option<f64>,
    phase: Phase,
) -> Result<LossBundle> {
    match phase {
        Phase::Pretrain if con.is_some() => Err(Error::Config(
            "consistency loss does not belong to the pre-training phase".into(),
        )),
        Phase::Finetune if aux.is_some() => Err(Error::Config(
            "auxiliary loss does not belong to the fine-tuning phase".into(),
        )),
        _ => {
            let total = seg + orth + aux.unwrap_or(0.0) + con.unwrap_or(0.0);
            Ok(LossBundle {
                seg,
                orth,
                aux,
                con,
                total,
            })
        }
    }
}

/// Map a label mask to channel-target rows for an NLL over `channels`
/// classes. `ignore` labels become -1.
pub fn mask_to_targets(mask: &Array2<u8>, lut: &[i32; 256]) -> Vec<i32> {
    mask.iter().map(|&v| lut[v as usize]).collect()
}

/// Build a label → channel lookup table from a mapping function;
/// [`IGNORE_ID`] always maps to -1.
pub fn label_lut(map: impl Fn(u8) -> Option<usize>) -> [i32; 256] {
    let mut lut = [-1i32; 256];
    for id in 0..=255u8 {
        if id == IGNORE_ID {
            continue;
        }
        if let Some(ch) = map(id) {
            lut[id as usize] = ch as i32;
        }
    }
    lut
}

/// Mean cross-entropy between per-pixel logits and integer targets.
///
/// `logits` is (B, P, C) on the tape; `targets` has B·P entries with -1 for
/// ignored pixels, which contribute nothing. Computed through log-softmax.
pub fn segmentation_loss(tape: &Tape, logits: Var, targets: &[i32]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "segmentation loss expects (B,P,C) logits, got {shape:?}"
        )));
    }
    let (b, p, c) = (shape[0], shape[1], shape[2]);
    if b * p != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            b * p,
            targets.len()
        )));
    }
    if targets.iter().all(|&t| t < 0) {
        return Err(Error::UndefinedLoss(
            "all pixels ignored; segmentation loss undefined".into(),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c as i32) {
        return Err(Error::Data(format!(
            "target channel {bad} out of range for {c} channels"
        )));
    }
    let flat = tape.reshape(logits, &[b * p, c]);
    let logp = tape.log_softmax(flat, 1);
    Ok(tape.nll_mean(logp, Rc::new(targets.to_vec())))
}

/// Prototype-similarity auxiliary loss (pre-training only).
///
/// Per pixel, class scores are cosine(f(x), u_i)/τ over the base prototypes
/// plus a fixed background score, and the result is a cross-entropy against
/// the ground truth downsampled to the feature grid. Pulls each pixel's
/// feature toward its class prototype long before the classifier has
/// settled.
pub fn auxiliary_loss(
    tape: &Tape,
    features: Var,
    base_prototypes: Var,
    targets: &[i32],
    tau: f64,
    background_score: Var,
) -> Result<Var> {
    let fshape = tape.shape(features);
    if fshape.len() != 3 {
        return Err(Error::Shape(format!(
            "auxiliary loss expects (B,P,d) features, got {fshape:?}"
        )));
    }
    let (b, p, d) = (fshape[0], fshape[1], fshape[2]);
    if b * p != targets.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} targets",
            b * p,
            targets.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive: {tau}")));
    }
    if targets.iter().all(|&t| t < 0) {
        return Err(Error::UndefinedLoss(
            "all pixels ignored; auxiliary loss undefined".into(),
        ));
    }
    let flat = tape.reshape(features, &[b * p, d]);
    let f_hat = tape.normalize_rows(flat, crate::prototypes::NORMALIZE_EPS);
    let u_hat = tape.normalize_rows(base_prototypes, crate::prototypes::NORMALIZE_EPS);
    let cos = tape.matmul(f_hat, tape.t(u_hat)); // (BP, M)
    let scores = tape.mul_scalar(cos, 1.0 / tau);
    // background channel first, matching the label layout
    let ones = tape.constant(ndarray::Array2::<f64>::ones((b * p, 1)).into_dyn());
    let bg_col = tape.mul(ones, background_score);
    let full = tape.concat(1, &[bg_col, scores]);
    let logp = tape.log_softmax(full, 1);
    Ok(tape.nll_mean(logp, Rc::new(targets.to_vec())))
}

/// Soft cross-entropy between predictions on two views of the same pixels:
/// mean over all pixels of −Σ_c p_weak(c)·log p_strong(c).
///
/// Both inputs are (B, P, C) *logits*; the weak side is converted to
/// probabilities and (by default) detached so it acts as a fixed target.
pub fn consistency_loss(
    tape: &Tape,
    weak_logits: Var,
    strong_logits: Var,
    stop_gradient: bool,
) -> Result<Var> {
    let ws = tape.shape(weak_logits);
    let ss = tape.shape(strong_logits);
    if ws != ss || ws.len() != 3 {
        return Err(Error::Shape(format!(
            "consistency loss expects matching (B,P,C) logits, got {ws:?} / {ss:?}"
        )));
    }
    let p_weak = {
        let p = tape.softmax(weak_logits, 2);
        if stop_gradient {
            tape.detach(p)
        } else {
            p
        }
    };
    let logp_strong = tape.log_softmax(strong_logits, 2);
    let prod = tape.mul(p_weak, logp_strong);
    let per_pixel = tape.sum_axis(prod, 2); // (B, P)
    let mean = tape.mean_all(per_pixel);
    Ok(tape.neg(mean))
}
