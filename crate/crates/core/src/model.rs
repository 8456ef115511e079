//! Projection head, dilated-causal-convolution encoder, and the paired
//! teacher/student parameter state with EMA updates and centering.
//!
//! Both branches share one forward implementation. The student registers
//! its parameters as trainable so the tape records gradients; the teacher
//! registers them as constants, which turns its whole forward pass into a
//! value-only computation — no gradient ever reaches teacher parameters.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{bernoulli_mask, MaskPlan};
use crate::error::{Error, Result};
use crate::numeric::{standard_normal, ParamSet, ParamVars, Tape, Tensor, Var};

/// Architecture extents shared by teacher and student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Input channels C.
    pub input_channels: usize,
    /// Hidden width of the projection MLP.
    pub proj_hidden: usize,
    /// Representation dimension K.
    pub repr_dim: usize,
    /// Internal channel width of the convolution blocks.
    pub conv_width: usize,
    /// Number of residual blocks Q; block p uses dilation 2^p.
    pub blocks: usize,
    /// Convolution kernel size.
    pub kernel: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_channels", self.input_channels),
            ("proj_hidden", self.proj_hidden),
            ("repr_dim", self.repr_dim),
            ("conv_width", self.conv_width),
            ("blocks", self.blocks),
            ("kernel", self.kernel),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be >= 1")));
            }
        }
        if self.blocks > 24 {
            return Err(Error::Param(format!(
                "{} blocks would overflow the dilation schedule",
                self.blocks
            )));
        }
        Ok(())
    }

    /// Defaults used for the benchmark-scale configuration.
    pub fn benchmark(input_channels: usize) -> Self {
        ModelDims {
            input_channels,
            proj_hidden: 64,
            repr_dim: 320,
            conv_width: 64,
            blocks: 10,
            kernel: 3,
        }
    }
}

/// Paired teacher/student parameters, the center vector, and the two
/// blend coefficients.
///
/// Teacher and student always share names and shapes; at initialization
/// the teacher is an exact copy of the student.
#[derive(Clone, Debug)]
pub struct TeacherStudentState {
    student: ParamSet,
    teacher: ParamSet,
    center: Tensor,
    momentum: f64,
    lambda: f64,
    dims: ModelDims,
    iteration: u64,
}

fn kaiming_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| std * standard_normal(rng)).collect(),
    )
    .unwrap()
}

fn uniform_bias(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(
        vec![len],
        (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .unwrap()
}

/// Kaiming-initialize one encoder parameter set, then copy it into the
/// teacher and zero the center.
pub fn init_params(
    seed: u64,
    dims: ModelDims,
    momentum: f64,
    lambda: f64,
) -> Result<TeacherStudentState> {
    dims.validate()?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Param(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!(
            "loss weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, k, w) = (dims.input_channels, dims.proj_hidden, dims.repr_dim, dims.conv_width);
    let mut p = ParamSet::new();

    p.insert("proj.fc1.w", kaiming_tensor(&mut rng, &[c, h], c))?;
    p.insert("proj.fc1.b", uniform_bias(&mut rng, h, c))?;
    p.insert("proj.fc2.w", kaiming_tensor(&mut rng, &[h, h], h))?;
    p.insert("proj.fc2.b", uniform_bias(&mut rng, h, h))?;
    p.insert("proj.fc3.w", kaiming_tensor(&mut rng, &[h, h], h))?;
    p.insert("proj.fc3.b", uniform_bias(&mut rng, h, h))?;

    // Weight-normalized output layer: gain starts at each column norm so the
    // initial effective weight equals v itself.
    let v = kaiming_tensor(&mut rng, &[h, k], h);
    let mut gains = vec![0.0; k];
    for o in 0..k {
        let mut sq = 0.0;
        for i in 0..h {
            let val = v.data()[i * k + o];
            sq += val * val;
        }
        gains[o] = sq.sqrt();
    }
    p.insert("proj.out.v", v)?;
    p.insert("proj.out.g", Tensor::new(vec![k], gains)?)?;
    p.insert("proj.out.b", uniform_bias(&mut rng, k, h))?;

    p.insert("enc.in.w", kaiming_tensor(&mut rng, &[k, w], k))?;
    p.insert("enc.in.b", uniform_bias(&mut rng, w, k))?;
    for block in 0..dims.blocks {
        let fan_in = w * dims.kernel;
        p.insert(
            &format!("enc.block{block}.conv1.k"),
            kaiming_tensor(&mut rng, &[w, w, dims.kernel], fan_in),
        )?;
        p.insert(
            &format!("enc.block{block}.conv2.k"),
            kaiming_tensor(&mut rng, &[w, w, dims.kernel], fan_in),
        )?;
    }
    p.insert("enc.out.w", kaiming_tensor(&mut rng, &[w, k], w))?;
    p.insert("enc.out.b", uniform_bias(&mut rng, k, w))?;

    Ok(TeacherStudentState {
        teacher: p.clone(),
        student: p,
        center: Tensor::zeros(&[k]),
        momentum,
        lambda,
        dims,
        iteration: 0,
    })
}

/// Projection head minus the final layer: three linear maps with ReLU
/// between, then L2 normalization per position. Returned for tests that
/// assert the unit-norm stage; `project` is the full head.
pub fn project_stages(
    tape: &mut Tape,
    vars: &ParamVars,
    x: Var,
    dims: &ModelDims,
) -> Result<(Var, Var)> {
    let xv = tape.value(x);
    if xv.rank() != 3 || xv.shape()[2] != dims.input_channels {
        return Err(Error::Dim(format!(
            "projection input must be [B, L, {}], got {:?}",
            dims.input_channels,
            xv.shape()
        )));
    }
    let h1 = tape.linear(x, vars.get("proj.fc1.w")?, vars.get("proj.fc1.b")?)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.linear(h1, vars.get("proj.fc2.w")?, vars.get("proj.fc2.b")?)?;
    let h2 = tape.relu(h2)?;
    let h3 = tape.linear(h2, vars.get("proj.fc3.w")?, vars.get("proj.fc3.b")?)?;
    let normed = tape.l2_normalize(h3, 2)?;
    let out = tape.weight_norm_linear(
        normed,
        vars.get("proj.out.v")?,
        vars.get("proj.out.g")?,
        vars.get("proj.out.b")?,
    )?;
    Ok((normed, out))
}

/// Map a raw crop [B, L, C] to latents [B, L, K], per timestamp.
pub fn project(tape: &mut Tape, vars: &ParamVars, x: Var, dims: &ModelDims) -> Result<Var> {
    project_stages(tape, vars, x, dims).map(|(_, out)| out)
}

/// Dilated causal residual stack: latents [B, L, K] to representations
/// [B, L, K]. Block p runs GELU -> conv(2^p) -> GELU -> conv(2^p) with a
/// residual connection from block input to block output.
pub fn encode(tape: &mut Tape, vars: &ParamVars, z: Var, dims: &ModelDims) -> Result<Var> {
    let zv = tape.value(z);
    if zv.rank() != 3 || zv.shape()[2] != dims.repr_dim {
        return Err(Error::Dim(format!(
            "encoder input must be [B, L, {}], got {:?}",
            dims.repr_dim,
            zv.shape()
        )));
    }
    let cur = tape.linear(z, vars.get("enc.in.w")?, vars.get("enc.in.b")?)?;
    let mut cur = tape.permute_12(cur)?; // [B, W, L]
    for block in 0..dims.blocks {
        let dilation = 1usize << block;
        let t = tape.gelu(cur)?;
        let t = tape.conv1d_causal(t, vars.get(&format!("enc.block{block}.conv1.k"))?, dilation)?;
        let t = tape.gelu(t)?;
        let t = tape.conv1d_causal(t, vars.get(&format!("enc.block{block}.conv2.k"))?, dilation)?;
        cur = tape.add(cur, t)?;
    }
    let cur = tape.permute_12(cur)?; // [B, L, W]
    tape.linear(cur, vars.get("enc.out.w")?, vars.get("enc.out.b")?)
}

/// Past steps covered by the stack through block `p` (inclusive), counting
/// the current position: 1 + 2*(kernel-1)*(2^(p+1) - 1).
pub fn receptive_field_through_block(kernel: usize, p: usize) -> usize {
    1 + 2 * (kernel - 1) * ((1usize << (p + 1)) - 1)
}

impl TeacherStudentState {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn student(&self) -> &ParamSet {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut ParamSet {
        &mut self.student
    }

    pub fn teacher(&self) -> &ParamSet {
        &self.teacher
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_iteration(&mut self, it: u64) {
        self.iteration = it;
    }

    /// Test-support: overwrite one parameter on both branches.
    pub fn force_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.student.set_value(name, value.clone())?;
        self.teacher.set_value(name, value)
    }

    /// Test-support: overwrite one parameter on the teacher side only.
    pub fn force_teacher_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.teacher.set_value(name, value)
    }

    /// Teacher branch: project with teacher parameters, mask whole
    /// timestamps in latent space (independent draws per batch element),
    /// then encode. Runs entirely without gradient state.
    pub fn teacher_forward(
        &self,
        raw_crop: &Tensor,
        keep_prob: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.register_params(&self.teacher, false);
        let x = tape.constant(raw_crop.clone());
        let z = project(&mut tape, &vars, x, &self.dims)?;

        let zv = tape.value(z).clone();
        let (b, l) = (zv.shape()[0], zv.shape()[1]);
        let mut masked = Tensor::zeros(zv.shape());
        for bi in 0..b {
            let plan = MaskPlan::sample(keep_prob, l, rng)?;
            let slice = Tensor::new(
                vec![l, self.dims.repr_dim],
                zv.data()[bi * l * self.dims.repr_dim..(bi + 1) * l * self.dims.repr_dim].to_vec(),
            )?;
            let ms = bernoulli_mask(&slice, &plan, 0)?;
            masked.data_mut()[bi * l * self.dims.repr_dim..(bi + 1) * l * self.dims.repr_dim]
                .copy_from_slice(ms.data());
        }

        let zm = tape.constant(masked);
        let h = encode(&mut tape, &vars, zm, &self.dims)?;
        Ok(tape.value(h).clone())
    }

    /// Student branch: project then encode with student parameters on the
    /// caller's tape, so gradients flow. The crop is expected to be already
    /// masked in raw space.
    pub fn student_forward(&self, tape: &mut Tape, masked_crop: &Tensor) -> Result<(Var, ParamVars)> {
        let vars = tape.register_params(&self.student, true);
        let x = tape.constant(masked_crop.clone());
        let z = project(tape, &vars, x, &self.dims)?;
        let h = encode(tape, &vars, z, &self.dims)?;
        Ok((h, vars))
    }

    /// Recompute the center as the mean of teacher outputs over the batch
    /// and overlap-time axes.
    pub fn update_center(&mut self, teacher_overlap: &Tensor) -> Result<()> {
        let c = self.center_of(teacher_overlap)?;
        self.center = c;
        Ok(())
    }

    fn center_of(&self, h: &Tensor) -> Result<Tensor> {
        if h.rank() != 3 || h.shape()[2] != self.dims.repr_dim {
            return Err(Error::Dim(format!(
                "teacher batch must be [B, L, {}], got {:?}",
                self.dims.repr_dim,
                h.shape()
            )));
        }
        let (b, l, k) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        if b * l == 0 {
            return Err(Error::Usage("cannot center an empty batch".into()));
        }
        let mut c = vec![0.0; k];
        for bi in 0..b {
            for t in 0..l {
                for ki in 0..k {
                    c[ki] += h.at3(bi, t, ki);
                }
            }
        }
        let denom = (b * l) as f64;
        for v in c.iter_mut() {
            *v /= denom;
        }
        Tensor::new(vec![k], c)
    }

    /// Subtract the center from every teacher output position.
    pub fn apply_center(&self, teacher_overlap: &Tensor) -> Result<Tensor> {
        if teacher_overlap.rank() != 3 || teacher_overlap.shape()[2] != self.dims.repr_dim {
            return Err(Error::Dim(format!(
                "teacher batch must be [B, L, {}], got {:?}",
                self.dims.repr_dim,
                teacher_overlap.shape()
            )));
        }
        if teacher_overlap.shape()[0] * teacher_overlap.shape()[1] == 0 {
            return Err(Error::Usage("cannot center an empty batch".into()));
        }
        let k = self.dims.repr_dim;
        let mut out = teacher_overlap.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v -= self.center.data()[i % k];
        }
        Ok(out)
    }

    /// Teacher tracks the student: theta_t <- m * theta_t + (1-m) * theta_s.
    pub fn ema_update(&mut self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        let m = self.momentum;
        for (name, t) in self.teacher.iter_mut() {
            let s = self
                .student
                .get(name)
                .ok_or_else(|| Error::Usage(format!("student is missing '{name}'")))?;
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = m * *tv + (1.0 - m) * sv;
            }
        }
        Ok(())
    }
}

// ── checkpoint format ───────────────────────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable RNG position so a resumed run replays the exact stream.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// u128 word position kept as a string for JSON friendliness.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word_pos '{}'", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    dims: ModelDims,
    momentum: f64,
    lambda: f64,
    iteration: u64,
    center: Tensor,
    student: ParamSet,
    teacher: ParamSet,
    rng: Option<RngState>,
}

/// Write the full state (and optionally the training RNG position) as a
/// self-describing JSON document. serde_json emits shortest-round-trip
/// decimals, so load returns values bit-equal to what was saved.
pub fn save_checkpoint(
    state: &TeacherStudentState,
    rng: Option<&ChaCha8Rng>,
    path: &Path,
) -> Result<()> {
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        dims: state.dims,
        momentum: state.momentum,
        lambda: state.lambda,
        iteration: state.iteration,
        center: state.center.clone(),
        student: state.student.clone(),
        teacher: state.teacher.clone(),
        rng: rng.map(RngState::capture),
    };
    let json = serde_json::to_string(&doc)
        .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TeacherStudentState, Option<ChaCha8Rng>)> {
    let raw = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&raw)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "field 'version': expected {CHECKPOINT_VERSION}, found {}",
            doc.version
        )));
    }
    doc.dims.validate()?;
    if doc.center.shape() != [doc.dims.repr_dim] {
        return Err(Error::Checkpoint(format!(
            "field 'center': length {} does not match repr_dim {}",
            doc.center.len(),
            doc.dims.repr_dim
        )));
    }
    let names_t: Vec<_> = doc.teacher.names().collect();
    let names_s: Vec<_> = doc.student.names().collect();
    if names_t != names_s {
        return Err(Error::Checkpoint(
            "field 'teacher': parameter names differ from student".into(),
        ));
    }
    let rng = doc.rng.as_ref().map(RngState::restore).transpose()?;
    Ok((
        TeacherStudentState {
            student: doc.student,
            teacher: doc.teacher,
            center: doc.center,
            momentum: doc.momentum,
            lambda: doc.lambda,
            dims: doc.dims,
            iteration: doc.iteration,
        },
        rng,
    ))
}
