//! Dense f64 tensors with reverse-mode gradients, an SGD step, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod optimizer;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, Objective};
pub use optimizer::sgd_step;
pub use tape::{collect_param_grads, GradFn, Gradients, ParamVars, Tape, Var};
pub use tensor::{for_each_lane, ParamSet, Tensor};

/// Box-Muller standard normal draw (two uniforms per call, deterministic).
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    /// Every differentiable primitive checked against central differences.
    #[test]
    fn all_primitives_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut failures = Vec::new();

        type Builder = Box<dyn Fn(&mut Tape, &ParamVars) -> crate::error::Result<Var>>;
        let mut check = |name: &str, point: &ParamSet, f: Builder| {
            let err = finite_diff_check(&f, point, 1e-5).unwrap();
            if err >= 1e-4 {
                failures.push(format!("{name}: {err}"));
            }
        };

        // elementwise binary ops + reductions
        let mut p = ParamSet::new();
        p.insert("a", rand_tensor(&mut rng, &[2, 3])).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[2, 3])).unwrap();
        check(
            "add+mul+sub+scale",
            &p,
            Box::new(|t, v| {
                let a = v.get("a")?;
                let b = v.get("b")?;
                let s = t.add(a, b)?;
                let m = t.mul(s, a)?;
                let d = t.sub(m, b)?;
                let sc = t.scale(d, 0.7)?;
                t.mean(sc)
            }),
        );

        // matmul
        let mut p = ParamSet::new();
        p.insert("a", rand_tensor(&mut rng, &[3, 4])).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[4, 2])).unwrap();
        check(
            "matmul",
            &p,
            Box::new(|t, v| {
                let y = t.matmul(v.get("a")?, v.get("b")?)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
        );

        // linear over a batched input
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[2, 3, 4])).unwrap();
        p.insert("w", rand_tensor(&mut rng, &[4, 5])).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[5])).unwrap();
        check(
            "linear",
            &p,
            Box::new(|t, v| {
                let y = t.linear(v.get("x")?, v.get("w")?, v.get("b")?)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
        );

        // weight-normalized linear
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[4, 3])).unwrap();
        p.insert("v", rand_tensor(&mut rng, &[3, 5])).unwrap();
        p.insert("g", rand_tensor(&mut rng, &[5])).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[5])).unwrap();
        check(
            "weight_norm_linear",
            &p,
            Box::new(|t, v| {
                let y = t.weight_norm_linear(v.get("x")?, v.get("v")?, v.get("g")?, v.get("b")?)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
        );

        // dilated causal convolutions
        for d in [1usize, 2, 4] {
            let mut p = ParamSet::new();
            p.insert("z", rand_tensor(&mut rng, &[2, 3, 8])).unwrap();
            p.insert("k", rand_tensor(&mut rng, &[2, 3, 3])).unwrap();
            check(
                &format!("conv1d_causal d={d}"),
                &p,
                Box::new(move |t, v| {
                    let y = t.conv1d_causal(v.get("z")?, v.get("k")?, d)?;
                    let s = t.mul(y, y)?;
                    t.sum(s)
                }),
            );
        }

        // pointwise nonlinearities
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[3, 4])).unwrap();
        check(
            "gelu",
            &p,
            Box::new(|t, v| {
                let y = t.gelu(v.get("x")?)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
        );
        check(
            "relu",
            &p,
            Box::new(|t, v| {
                let y = t.relu(v.get("x")?)?;
                let s = t.mul(y, y)?;
                t.sum(s)
            }),
        );

        // lane-wise normalizations on a rank-3 tensor, every axis
        for axis in 0..3usize {
            let mut p = ParamSet::new();
            p.insert("x", rand_tensor(&mut rng, &[2, 3, 4])).unwrap();
            check(
                &format!("softmax axis={axis}"),
                &p,
                Box::new(move |t, v| {
                    let y = t.softmax(v.get("x")?, axis)?;
                    let s = t.mul(y, y)?;
                    t.sum(s)
                }),
            );
            let mut p = ParamSet::new();
            p.insert("x", rand_tensor(&mut rng, &[2, 3, 4])).unwrap();
            check(
                &format!("log_softmax axis={axis}"),
                &p,
                Box::new(move |t, v| {
                    let y = t.log_softmax(v.get("x")?, axis)?;
                    let s = t.mul(y, y)?;
                    t.sum(s)
                }),
            );
            let mut p = ParamSet::new();
            p.insert("x", rand_tensor(&mut rng, &[2, 3, 4])).unwrap();
            check(
                &format!("l2_normalize axis={axis}"),
                &p,
                Box::new(move |t, v| {
                    let y = t.l2_normalize(v.get("x")?, axis)?;
                    let w = t.gelu(y)?;
                    t.sum(w)
                }),
            );
        }

        // shape ops
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[2, 5, 3])).unwrap();
        check(
            "slice_time+permute",
            &p,
            Box::new(|t, v| {
                let s = t.slice_time(v.get("x")?, 1, 4)?;
                let pm = t.permute_12(s)?;
                let sq = t.mul(pm, pm)?;
                t.sum(sq)
            }),
        );

        assert!(failures.is_empty(), "gradient failures: {failures:?}");
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 4, 6]);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let b = rand_tensor(&mut rng, &[6]);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.linear(xv, wv, bv).unwrap();
            let g = tape.gelu(y).unwrap();
            let n = tape.l2_normalize(g, 2).unwrap();
            tape.value(n).clone()
        };
        assert_eq!(run(), run());
    }
}
