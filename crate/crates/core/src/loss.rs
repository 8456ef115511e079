//! Pretraining losses: the momentum-contrastive InfoNCE objective over
//! temporal and instance negatives, the soft-label distillation loss, and
//! their weighted combination.
//!
//! For each anchor position (i, t) the contrastive positive is the other
//! branch's representation at the same instance and timestamp; negatives are
//! cross-branch pairs at the same timestamp but different instance, and at
//! the same instance but different timestamp. The per-anchor loss is the
//! standard -log(exp(s+/tau) / sum exp(s/tau)) with dot-product similarities,
//! averaged over anchors and symmetrized over which branch anchors. An
//! optional flag adds intra-student pairs to the student-anchored denominator.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::ops::softmax_value;
use crate::numeric::{GradFn, Tape, Tensor, Var};

/// Contrastive loss settings.
#[derive(Clone, Copy, Debug)]
pub struct NceConfig {
    pub temperature: f64,
    /// Also count student-student pairs as negatives in the
    /// student-anchored half of the loss.
    pub include_intra_student_negatives: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig {
            temperature: 1.0,
            include_intra_student_negatives: false,
        }
    }
}

/// Which axis the distillation softmax runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillAxis {
    /// Softmax over the overlap-time axis, per feature channel.
    Time,
    /// Softmax over the feature axis, per timestamp.
    Feature,
}

/// Scalar summary of one optimization step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossReport {
    pub ssl: f64,
    pub sl: f64,
    pub joint: f64,
    pub lambda: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

/// Positive/negative pair counts for a [B, L] anchor grid (negatives counted
/// over both anchor roles).
pub fn nce_pair_counts(b: usize, l: usize, include_intra_student: bool) -> (usize, usize) {
    let anchors = b * l;
    let per_anchor = (b - 1) + (l - 1);
    let mut negatives = 2 * anchors * per_anchor;
    if include_intra_student {
        negatives += anchors * per_anchor;
    }
    (anchors, negatives)
}

fn validate_pair(teacher: &Tensor, student: &Tensor) -> Result<(usize, usize, usize)> {
    if teacher.rank() != 3 || student.rank() != 3 || teacher.shape() != student.shape() {
        return Err(Error::Dim(format!(
            "branch representations must share a [B, L, K] shape, got {:?} and {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let (b, l, k) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    if b == 0 || l == 0 || k == 0 {
        return Err(Error::Dim("empty representation batch".into()));
    }
    Ok((b, l, k))
}

struct AnchorTerms {
    /// Scaled similarities, positive first.
    scaled: Vec<f64>,
    /// (instance, timestamp) of the candidate vector paired with the anchor.
    partner: Vec<(usize, usize)>,
}

/// Candidate similarities for one anchor: positive, then same-timestamp
/// other-instance negatives, then same-instance other-timestamp negatives.
fn anchor_terms(
    anchor: &Tensor,
    candidates: &Tensor,
    i: usize,
    t: usize,
    inv_tau: f64,
) -> AnchorTerms {
    let (b, l, k) = (anchor.shape()[0], anchor.shape()[1], anchor.shape()[2]);
    debug_assert_eq!(candidates.shape(), anchor.shape());
    let dot = |cj: usize, ct: usize| -> f64 {
        let a0 = (i * l + t) * k;
        let c0 = (cj * l + ct) * k;
        let mut acc = 0.0;
        for kk in 0..k {
            acc += anchor.data()[a0 + kk] * candidates.data()[c0 + kk];
        }
        acc
    };
    let mut scaled = Vec::with_capacity(b + l - 1);
    let mut partner = Vec::with_capacity(b + l - 1);
    scaled.push(dot(i, t) * inv_tau);
    partner.push((i, t));
    for j in 0..b {
        if j != i {
            scaled.push(dot(j, t) * inv_tau);
            partner.push((j, t));
        }
    }
    for tp in 0..l {
        if tp != t {
            scaled.push(dot(i, tp) * inv_tau);
            partner.push((i, tp));
        }
    }
    AnchorTerms { scaled, partner }
}

/// -log softmax probability of the positive (entry 0), with the softmax
/// weights returned for the backward pass.
fn anchor_loss_and_probs(scaled: &[f64]) -> (f64, Vec<f64>) {
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - scaled[0];
    let probs = exps.iter().map(|e| e / sum).collect();
    (loss, probs)
}

fn nce_forward(teacher: &Tensor, student: &Tensor, cfg: &NceConfig) -> Result<f64> {
    let (b, l, _) = validate_pair(teacher, student)?;
    let inv_tau = 1.0 / cfg.temperature;
    let mut total = 0.0;
    for i in 0..b {
        for t in 0..l {
            // teacher-anchored half: candidates drawn from the student
            let terms = anchor_terms(teacher, student, i, t, inv_tau);
            total += anchor_loss_and_probs(&terms.scaled).0;

            // student-anchored half: candidates drawn from the teacher,
            // optionally with intra-student negatives appended
            let mut terms = anchor_terms(student, teacher, i, t, inv_tau);
            if cfg.include_intra_student_negatives {
                let extra = anchor_terms(student, student, i, t, inv_tau);
                terms.scaled.extend_from_slice(&extra.scaled[1..]);
            }
            total += anchor_loss_and_probs(&terms.scaled).0;
        }
    }
    Ok(total / (2.0 * (b * l) as f64))
}

struct NceGrad {
    cfg: NceConfig,
}

impl GradFn for NceGrad {
    fn backward(
        &self,
        out_grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        // input 0 is the teacher constant; only the student gets a gradient
        debug_assert!(!needs[0]);
        if !needs[1] {
            return vec![None, None];
        }
        let teacher = inputs[0];
        let student = inputs[1];
        let (b, l, k) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
        let inv_tau = 1.0 / self.cfg.temperature;
        let scale = out_grad.data()[0] / (2.0 * (b * l) as f64);
        let mut gv = vec![0.0; student.len()];

        let add_vec = |gv: &mut [f64], dst: (usize, usize), src: &Tensor, s: (usize, usize), w: f64| {
            let d0 = (dst.0 * l + dst.1) * k;
            let s0 = (s.0 * l + s.1) * k;
            for kk in 0..k {
                gv[d0 + kk] += w * src.data()[s0 + kk];
            }
        };

        for i in 0..b {
            for t in 0..l {
                // teacher-anchored: each candidate is a student vector, so
                // d loss / d v[partner] = (p - 1{pos}) * u[i,t] / tau
                let terms = anchor_terms(teacher, student, i, t, inv_tau);
                let (_, probs) = anchor_loss_and_probs(&terms.scaled);
                for (c, &(pj, pt)) in terms.partner.iter().enumerate() {
                    let coeff = probs[c] - if c == 0 { 1.0 } else { 0.0 };
                    add_vec(&mut gv, (pj, pt), teacher, (i, t), scale * coeff * inv_tau);
                }

                // student-anchored: the anchor v[i,t] pairs with teacher
                // vectors (gradient lands on the anchor), and optionally with
                // other student vectors (gradient lands on both sides)
                let mut terms = anchor_terms(student, teacher, i, t, inv_tau);
                let cross = terms.partner.len();
                let extra = if self.cfg.include_intra_student_negatives {
                    let e = anchor_terms(student, student, i, t, inv_tau);
                    terms.scaled.extend_from_slice(&e.scaled[1..]);
                    Some(e.partner)
                } else {
                    None
                };
                let (_, probs) = anchor_loss_and_probs(&terms.scaled);
                for c in 0..cross {
                    let coeff = probs[c] - if c == 0 { 1.0 } else { 0.0 };
                    let (pj, pt) = terms.partner[c];
                    add_vec(&mut gv, (i, t), teacher, (pj, pt), scale * coeff * inv_tau);
                }
                if let Some(partners) = extra {
                    for (e, &(pj, pt)) in partners[1..].iter().enumerate() {
                        let p = probs[cross + e];
                        add_vec(&mut gv, (i, t), student, (pj, pt), scale * p * inv_tau);
                        add_vec(&mut gv, (pj, pt), student, (i, t), scale * p * inv_tau);
                    }
                }
            }
        }
        vec![
            None,
            Some(Tensor::new(student.shape().to_vec(), gv).unwrap()),
        ]
    }
}

/// Contrastive loss between the (constant) teacher batch and the student
/// batch on the tape. Both must already be sliced to the shared overlap.
pub fn info_nce(
    tape: &mut Tape,
    teacher: &Tensor,
    student: Var,
    cfg: &NceConfig,
) -> Result<Var> {
    let (b, l, _) = validate_pair(teacher, tape.value(student))?;
    if b < 2 && l < 2 {
        return Err(Error::Usage(
            "contrastive loss needs at least one negative: B >= 2 or L >= 2".into(),
        ));
    }
    if !(cfg.temperature > 0.0) || !cfg.temperature.is_finite() {
        return Err(Error::Param(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let value = Tensor::scalar(nce_forward(teacher, tape.value(student), cfg)?);
    let teacher_const = tape.constant(teacher.clone());
    tape.push_op(
        value,
        vec![teacher_const, student],
        Box::new(NceGrad { cfg: *cfg }),
    )
}

/// Soft-label distillation: teacher softmax distributions (over the chosen
/// axis of the centered teacher batch) supervise the student's
/// log-probabilities via cross-entropy. The teacher side is constant.
pub fn soft_label(
    tape: &mut Tape,
    teacher_centered: &Tensor,
    student: Var,
    axis: DistillAxis,
) -> Result<Var> {
    let (b, l, k) = validate_pair(teacher_centered, tape.value(student))?;
    let (ax, lanes) = match axis {
        DistillAxis::Time => (1usize, b * k),
        DistillAxis::Feature => (2usize, b * l),
    };
    if teacher_centered.shape()[ax] < 2 {
        return Err(Error::Usage(format!(
            "distillation softmax axis has extent {}, needs >= 2",
            teacher_centered.shape()[ax]
        )));
    }
    let pt = softmax_value(teacher_centered, ax)?;
    let pt_const = tape.constant(pt);
    let log_ps = tape.log_softmax(student, ax)?;
    let prod = tape.mul(pt_const, log_ps)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / lanes as f64)
}

/// lambda-weighted combination of the two losses. The boundaries are exact:
/// at lambda = 0 the returned node IS the contrastive node, and at
/// lambda = 1 it is the distillation node, so boundary runs are bit-equal
/// to single-task runs.
pub fn joint_loss(tape: &mut Tape, ssl: Var, sl: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!(
            "loss weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(ssl);
    }
    if lambda == 1.0 {
        return Ok(sl);
    }
    let a = tape.scale(sl, lambda)?;
    let b = tape.scale(ssl, 1.0 - lambda)?;
    tape.add(a, b)
}
