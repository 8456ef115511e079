//! Self-check suite behind the CLI `selftest` command: gradient checks,
//! loss oracles, EMA/centering identities, ridge and K-S oracles, and the
//! encoder causality probe.
//!
//! The oracles here are deliberately written as naive enumerations and
//! independent solvers; they share no code with the implementations they
//! check.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_for_branches, CropPair};
use crate::error::{Error, Result};
use crate::loss::{info_nce, joint_loss, soft_label, DistillAxis, NceConfig};
use crate::model::{encode, init_params, project, ModelDims};
use crate::numeric::ops::slice_time_value;
use crate::numeric::{finite_diff_check, GradFn, ParamSet, ParamVars, Tape, Tensor, Var};

/// Optional fault injection so the reporting path itself is testable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Route one intermediate through an op whose claimed gradient is
    /// wrong by 10%, which must fail the primitive gradient check.
    CorruptGradient,
}

/// One row of the selftest table.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

// ── independent oracles ─────────────────────────────────────────────

/// Double-loop enumeration of the contrastive loss: every anchor, every
/// candidate, naive exp/sum arithmetic. Mirrors the pair construction but
/// none of the vectorized code.
pub fn nce_brute_force(teacher: &Tensor, student: &Tensor, cfg: &NceConfig) -> Result<f64> {
    if teacher.shape() != student.shape() || teacher.rank() != 3 {
        return Err(Error::Dim("oracle needs matching [B, L, K] batches".into()));
    }
    let (b, l, k) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let dot = |x: &Tensor, xi: usize, xt: usize, y: &Tensor, yi: usize, yt: usize| -> f64 {
        let mut acc = 0.0;
        for kk in 0..k {
            acc += x.at3(xi, xt, kk) * y.at3(yi, yt, kk);
        }
        acc
    };
    let tau = cfg.temperature;
    let mut total = 0.0;
    for i in 0..b {
        for t in 0..l {
            // teacher anchor against student candidates
            let pos = (dot(teacher, i, t, student, i, t) / tau).exp();
            let mut denom = pos;
            for j in 0..b {
                if j != i {
                    denom += (dot(teacher, i, t, student, j, t) / tau).exp();
                }
            }
            for tp in 0..l {
                if tp != t {
                    denom += (dot(teacher, i, t, student, i, tp) / tau).exp();
                }
            }
            total += -(pos / denom).ln();

            // student anchor against teacher candidates
            let pos = (dot(student, i, t, teacher, i, t) / tau).exp();
            let mut denom = pos;
            for j in 0..b {
                if j != i {
                    denom += (dot(student, i, t, teacher, j, t) / tau).exp();
                }
            }
            for tp in 0..l {
                if tp != t {
                    denom += (dot(student, i, t, teacher, i, tp) / tau).exp();
                }
            }
            if cfg.include_intra_student_negatives {
                for j in 0..b {
                    if j != i {
                        denom += (dot(student, i, t, student, j, t) / tau).exp();
                    }
                }
                for tp in 0..l {
                    if tp != t {
                        denom += (dot(student, i, t, student, i, tp) / tau).exp();
                    }
                }
            }
            total += -(pos / denom).ln();
        }
    }
    Ok(total / (2.0 * (b * l) as f64))
}

/// Brute-force K-S statistic: for every observed value, count both CDFs by
/// full scans.
pub fn ks_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let mut d: f64 = 0.0;
    for &v in a.iter().chain(b.iter()) {
        let fa = a.iter().filter(|&&x| x <= v).count() as f64 / a.len() as f64;
        let fb = b.iter().filter(|&&x| x <= v).count() as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Independent ridge solve: assemble the same penalized normal equations
/// (bias column unpenalized) and solve with Gauss-Jordan elimination and
/// partial pivoting instead of the production Cholesky path.
pub fn ridge_normal_equations_oracle(
    features: &Tensor,
    targets: &Tensor,
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    let (n, k) = (features.shape()[0], features.shape()[1]);
    let m = targets.shape()[1];
    let d = k + 1;
    let mut a = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * m];
    let x = features.data();
    let y = targets.data();
    for r in 0..n {
        for i in 0..d {
            let xi = if i < k { x[r * k + i] } else { 1.0 };
            for j in 0..d {
                let xj = if j < k { x[r * k + j] } else { 1.0 };
                a[i * d + j] += xi * xj;
            }
            for o in 0..m {
                rhs[i * m + o] += xi * y[r * m + o];
            }
        }
    }
    for i in 0..k {
        a[i * d + i] += alpha;
    }
    // Gauss-Jordan with partial pivoting
    for col in 0..d {
        let mut pivot = col;
        for r in (col + 1)..d {
            if a[r * d + col].abs() > a[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * d + col].abs() < 1e-12 {
            return Err(Error::Conditioning("oracle system is singular".into()));
        }
        if pivot != col {
            for j in 0..d {
                a.swap(col * d + j, pivot * d + j);
            }
            for o in 0..m {
                rhs.swap(col * m + o, pivot * m + o);
            }
        }
        let p = a[col * d + col];
        for j in 0..d {
            a[col * d + j] /= p;
        }
        for o in 0..m {
            rhs[col * m + o] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = a[r * d + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..d {
                a[r * d + j] -= f * a[col * d + j];
            }
            for o in 0..m {
                rhs[r * m + o] -= f * rhs[col * m + o];
            }
        }
    }
    Ok((
        Tensor::new(vec![k, m], rhs[..k * m].to_vec())?,
        Tensor::new(vec![m], rhs[k * m..].to_vec())?,
    ))
}

// ── fixtures ────────────────────────────────────────────────────────

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Forward-identity op with a deliberately wrong (1.1x) gradient.
struct SkewedGrad;
impl GradFn for SkewedGrad {
    fn backward(
        &self,
        g: &Tensor,
        _: &[&Tensor],
        _: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.map(|v| v * 1.1))]
    }
}

/// Worst finite-difference error over a composite touching every
/// differentiable primitive.
pub fn primitive_gradient_check(fault: Fault) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut point = ParamSet::new();
    point.insert("x", rand_tensor(&mut rng, &[2, 6, 3]))?;
    point.insert("w", rand_tensor(&mut rng, &[3, 4]))?;
    point.insert("b", rand_tensor(&mut rng, &[4]))?;
    point.insert("v", rand_tensor(&mut rng, &[4, 4]))?;
    point.insert("g", rand_tensor(&mut rng, &[4]))?;
    point.insert("kern", rand_tensor(&mut rng, &[4, 4, 3]))?;

    let inject = fault == Fault::CorruptGradient;
    let f = move |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
        let x = vars.get("x")?;
        let lin = tape.linear(x, vars.get("w")?, vars.get("b")?)?;
        let lin = if inject {
            let value = tape.value(lin).clone();
            tape.push_op(value, vec![lin], Box::new(SkewedGrad))?
        } else {
            lin
        };
        let wn = tape.weight_norm_linear(lin, vars.get("v")?, vars.get("g")?, vars.get("b")?)?;
        let act = tape.gelu(wn)?;
        let nrm = tape.l2_normalize(act, 2)?;
        let perm = tape.permute_12(nrm)?; // [B, 4, 6]
        let conv = tape.conv1d_causal(perm, vars.get("kern")?, 2)?;
        let back = tape.permute_12(conv)?;
        let sliced = tape.slice_time(back, 1, 5)?;
        let sm = tape.softmax(sliced, 1)?;
        let ls = tape.log_softmax(sliced, 2)?;
        let relu = tape.relu(sliced)?;
        let prod = tape.mul(sm, ls)?;
        let mix = tape.add(prod, relu)?;
        let mix = tape.sub(mix, sm)?;
        let scaled = tape.scale(mix, 0.5)?;
        let shifted = tape.add_scalar(scaled, 0.1)?;
        tape.mean(shifted)
    };
    finite_diff_check(&f, &point, 1e-5)
}

/// Fixture of the full pipeline at tiny extents: fixed inputs and masks,
/// teacher tensors precomputed, the joint loss as a pure function of the
/// student parameters.
pub struct JointLossFixture {
    pub dims: ModelDims,
    pub student_params: ParamSet,
    pub student_batch: Tensor,
    pub teacher_overlap: Tensor,
    pub teacher_centered: Tensor,
    pub overlap_in_student: (usize, usize),
    pub nce_cfg: NceConfig,
    pub lambda: f64,
}

impl JointLossFixture {
    /// B=2 windows of length 16, C=3 channels, K=8, Q=3 blocks.
    pub fn tiny(seed: u64) -> Result<Self> {
        let dims = ModelDims {
            input_channels: 3,
            proj_hidden: 8,
            repr_dim: 8,
            conv_width: 8,
            blocks: 3,
            kernel: 3,
        };
        let mut state = init_params(seed, dims, 0.999, 0.5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let crop = CropPair::new(0, 12, 4, 16)?;
        let keep_prob = 0.7;

        let (b, c) = (2usize, dims.input_channels);
        let mut teacher_data = Vec::new();
        let mut student_data = Vec::new();
        for _ in 0..b {
            let window = rand_tensor(&mut rng, &[16, c]);
            let (traw, smasked) = augment_for_branches(&window, &crop, keep_prob, &mut rng)?;
            teacher_data.extend_from_slice(traw.data());
            student_data.extend_from_slice(smasked.data());
        }
        let t_len = crop.b1 - crop.a1;
        let s_len = crop.b2 - crop.a2;
        let teacher_batch = Tensor::new(vec![b, t_len, c], teacher_data)?;
        let student_batch = Tensor::new(vec![b, s_len, c], student_data)?;

        let h_t_full = state.teacher_forward(&teacher_batch, keep_prob, &mut rng)?;
        let (f0, f1) = crop.overlap_in_first();
        let teacher_overlap = slice_time_value(&h_t_full, f0, f1)?;
        state.update_center(&teacher_overlap)?;
        let teacher_centered = state.apply_center(&teacher_overlap)?;

        Ok(JointLossFixture {
            dims,
            student_params: state.student().clone(),
            student_batch,
            teacher_overlap,
            teacher_centered,
            overlap_in_student: crop.overlap_in_second(),
            nce_cfg: NceConfig {
                temperature: 1.0,
                include_intra_student_negatives: false,
            },
            lambda: 0.5,
        })
    }

    /// Tape objective: joint loss as a function of the student parameters.
    pub fn objective(&self, tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
        let x = tape.constant(self.student_batch.clone());
        let z = project(tape, vars, x, &self.dims)?;
        let h = encode(tape, vars, z, &self.dims)?;
        let (s0, s1) = self.overlap_in_student;
        let h_ov = tape.slice_time(h, s0, s1)?;
        let ssl = info_nce(tape, &self.teacher_overlap, h_ov, &self.nce_cfg)?;
        let sl = soft_label(tape, &self.teacher_centered, h_ov, DistillAxis::Time)?;
        joint_loss(tape, ssl, sl, self.lambda)
    }
}

/// Finite-difference error of the full joint loss on the tiny fixture.
pub fn joint_loss_gradient_check() -> Result<f64> {
    let fixture = JointLossFixture::tiny(11)?;
    let f = |tape: &mut Tape, vars: &ParamVars| fixture.objective(tape, vars);
    finite_diff_check(&f, &fixture.student_params.clone(), 1e-5)
}

// ── the check table ─────────────────────────────────────────────────

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn check_result(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => outcome(name, passed, detail),
        Err(e) => outcome(name, false, format!("error: {e}")),
    }
}

/// Run every check, returning one row per check. All rows pass on a healthy
/// build; `fault` lets tests confirm that a broken gradient is caught.
pub fn run_selftest(fault: Fault) -> Vec<CheckOutcome> {
    let mut rows = Vec::new();

    rows.push(check_result("primitive gradients vs finite differences", {
        primitive_gradient_check(fault).map(|err| (err < 1e-4, format!("max rel err {err:.3e}")))
    }));

    rows.push(check_result("joint loss gradient on tiny model", {
        joint_loss_gradient_check().map(|err| (err < 1e-4, format!("max rel err {err:.3e}")))
    }));

    rows.push(check_result("contrastive loss vs double-loop enumeration", {
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut worst: f64 = 0.0;
            for include_ss in [false, true] {
                for (b, l, k) in [(1usize, 3usize, 4usize), (2, 2, 5), (3, 4, 2)] {
                    let cfg = NceConfig {
                        temperature: 0.9,
                        include_intra_student_negatives: include_ss,
                    };
                    let teacher = rand_tensor(&mut rng, &[b, l, k]);
                    let student = rand_tensor(&mut rng, &[b, l, k]);
                    let mut tape = Tape::new();
                    let sv = tape.constant(student.clone());
                    let fast = info_nce(&mut tape, &teacher, sv, &cfg)?;
                    let fast = tape.value(fast).scalar_value()?;
                    let slow = nce_brute_force(&teacher, &student, &cfg)?;
                    worst = worst.max((fast - slow).abs());
                }
            }
            Ok((worst < 1e-9, format!("max abs gap {worst:.3e}")))
        })()
    }));

    rows.push(check_result("distillation loss vs direct formula", {
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let (b, l, k) = (2usize, 3usize, 2usize);
            let teacher = rand_tensor(&mut rng, &[b, l, k]);
            let student = rand_tensor(&mut rng, &[b, l, k]);
            let mut tape = Tape::new();
            let sv = tape.constant(student.clone());
            let got = soft_label(&mut tape, &teacher, sv, DistillAxis::Time)?;
            let got = tape.value(got).scalar_value()?;
            let mut expected = 0.0;
            for bi in 0..b {
                for ki in 0..k {
                    let tsum: f64 = (0..l).map(|t| teacher.at3(bi, t, ki).exp()).sum();
                    let ssum: f64 = (0..l).map(|t| student.at3(bi, t, ki).exp()).sum();
                    for t in 0..l {
                        let pt = teacher.at3(bi, t, ki).exp() / tsum;
                        let ps = student.at3(bi, t, ki).exp() / ssum;
                        expected -= pt * ps.ln();
                    }
                }
            }
            expected /= (b * k) as f64;
            let gap = (got - expected).abs();
            Ok((gap < 1e-12, format!("abs gap {gap:.3e}")))
        })()
    }));

    rows.push(check_result("EMA geometric contraction", {
        (|| {
            let dims = ModelDims {
                input_channels: 2,
                proj_hidden: 4,
                repr_dim: 4,
                conv_width: 4,
                blocks: 1,
                kernel: 3,
            };
            let m = 0.999f64;
            let mut state = init_params(1, dims, m, 0.5)?;
            state.student_mut().set_value("proj.fc1.b", Tensor::zeros(&[4]))?;
            state.force_teacher_param("proj.fc1.b", Tensor::filled(&[4], 1.0))?;
            for _ in 0..100 {
                state.ema_update()?;
            }
            let got = state.teacher().get("proj.fc1.b").unwrap().data()[0];
            let gap = (got - m.powi(100)).abs();
            Ok((gap < 1e-12, format!("abs gap {gap:.3e}")))
        })()
    }));

    rows.push(check_result("center layer shift invariance", {
        (|| {
            let dims = ModelDims {
                input_channels: 2,
                proj_hidden: 4,
                repr_dim: 4,
                conv_width: 4,
                blocks: 1,
                kernel: 3,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let h = rand_tensor(&mut rng, &[2, 3, 4]);
            let mut shifted = h.clone();
            for (i, v) in shifted.data_mut().iter_mut().enumerate() {
                *v += 5.0 + (i % 4) as f64;
            }
            let mut s1 = init_params(2, dims, 0.9, 0.5)?;
            s1.update_center(&h)?;
            let c1 = s1.apply_center(&h)?;
            let p1 = crate::numeric::ops::softmax_value(&c1, 1)?;
            let mut s2 = init_params(2, dims, 0.9, 0.5)?;
            s2.update_center(&shifted)?;
            let c2 = s2.apply_center(&shifted)?;
            let p2 = crate::numeric::ops::softmax_value(&c2, 1)?;
            let mut worst: f64 = 0.0;
            for (a, b) in c1.data().iter().zip(c2.data()) {
                worst = worst.max((a - b).abs());
            }
            for (a, b) in p1.data().iter().zip(p2.data()) {
                worst = worst.max((a - b).abs());
            }
            Ok((worst < 1e-12, format!("max abs gap {worst:.3e}")))
        })()
    }));

    rows.push(check_result("ridge solve vs normal-equation oracle", {
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut worst: f64 = 0.0;
            for alpha in [0.1, 1.0, 50.0] {
                let x = rand_tensor(&mut rng, &[25, 6]);
                let y = rand_tensor(&mut rng, &[25, 3]);
                let head = crate::forecast::ridge_fit(&x, &y, alpha, 3, 1)?;
                let (w, b) = ridge_normal_equations_oracle(&x, &y, alpha)?;
                for (a, o) in head.weights.data().iter().zip(w.data()) {
                    worst = worst.max((a - o).abs());
                }
                for (a, o) in head.bias.data().iter().zip(b.data()) {
                    worst = worst.max((a - o).abs());
                }
            }
            // the 13-value grid must give a nonincreasing weight-norm path
            let x = rand_tensor(&mut rng, &[40, 6]);
            let y = rand_tensor(&mut rng, &[40, 2]);
            let grid = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
            let mut last = f64::INFINITY;
            let mut monotone = true;
            for alpha in grid {
                let norm = crate::forecast::ridge_fit(&x, &y, alpha, 2, 1)?.weight_norm();
                monotone &= norm <= last + 1e-12;
                last = norm;
            }
            Ok((worst < 1e-8 && monotone, format!("max abs gap {worst:.3e}, monotone {monotone}")))
        })()
    }));

    rows.push(check_result("K-S statistic vs enumeration oracle", {
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut worst: f64 = 0.0;
            for _ in 0..10 {
                let a: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..70).map(|_| rng.random_range(-0.5..1.5)).collect();
                let (d, _) = crate::forecast::ks_test(&a, &b)?;
                worst = worst.max((d - ks_brute_force(&a, &b)).abs());
            }
            let same = vec![1.0, 2.0, 3.0];
            let (d0, p0) = crate::forecast::ks_test(&same, &same)?;
            let identical_ok = d0 == 0.0 && p0 == 1.0;
            Ok((worst < 1e-12 && identical_ok, format!("max abs gap {worst:.3e}")))
        })()
    }));

    rows.push(check_result("encoder causality probe", {
        (|| {
            let dims = ModelDims {
                input_channels: 2,
                proj_hidden: 4,
                repr_dim: 4,
                conv_width: 4,
                blocks: 2,
                kernel: 3,
            };
            let state = init_params(3, dims, 0.9, 0.5)?;
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let z = rand_tensor(&mut rng, &[1, 12, 4]);
            let run = |input: &Tensor| -> Result<Tensor> {
                let mut tape = Tape::new();
                let vars = tape.register_params(state.student(), false);
                let zv = tape.constant(input.clone());
                let h = encode(&mut tape, &vars, zv, &dims)?;
                Ok(tape.value(h).clone())
            };
            let base = run(&z)?;
            let mut ok = true;
            for s in 1..12 {
                let mut pert = z.clone();
                let idx = pert.idx3(0, s, 0);
                pert.data_mut()[idx] += 2.0;
                let out = run(&pert)?;
                for t in 0..s {
                    for c in 0..4 {
                        ok &= out.at3(0, t, c) == base.at3(0, t, c);
                    }
                }
            }
            Ok((ok, "future perturbations leave past outputs bit-identical".into()))
        })()
    }));

    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_build_passes_every_check() {
        let rows = run_selftest(Fault::None);
        for row in &rows {
            assert!(row.passed, "{}: {}", row.name, row.detail);
        }
        assert_eq!(rows.len(), 9);
    }

    #[test]
    fn corrupted_gradient_fails_its_row_only() {
        let rows = run_selftest(Fault::CorruptGradient);
        let broken: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
        assert_eq!(broken.len(), 1);
        assert_eq!(broken[0].name, "primitive gradients vs finite differences");
    }
}
