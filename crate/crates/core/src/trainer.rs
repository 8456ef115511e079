//! The pretraining loop: sample windows, crop, augment, run both branches,
//! combine the losses on the overlap, update the student by SGD and the
//! teacher by EMA, and record a per-iteration trace.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_for_branches, sample_crop_pair_min_overlap};
use crate::data::{SeriesDataset, Split};
use crate::error::{Error, Result};
use crate::loss::{
    info_nce, joint_loss, nce_pair_counts, soft_label, DistillAxis, LossReport, NceConfig,
};
use crate::model::{init_params, ModelDims, TeacherStudentState};
use crate::numeric::ops::slice_time_value;
use crate::numeric::{collect_param_grads, sgd_step, Tape, Tensor};

/// Which loss drives the student update. `Joint` is the trained system;
/// the single-task variants exist for boundary checks and ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Joint,
    ContrastiveOnly,
    DistillOnly,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_distill_axis() -> DistillAxis {
    DistillAxis::Time
}

/// Hyperparameters of one pretraining run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the distillation loss in the joint objective.
    pub lambda: f64,
    /// EMA coefficient for the teacher update.
    pub momentum: f64,
    /// Bernoulli keep-probability for timestamp masking.
    pub keep_prob: f64,
    /// Contrastive temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Length of the window a crop pair is sampled from.
    pub crop_len: usize,
    pub seed: u64,
    pub dims: ModelDims,
    #[serde(default)]
    pub objective: Objective,
    /// Count student-student pairs as extra negatives.
    #[serde(default)]
    pub intra_student_negatives: bool,
    /// Distillation softmax axis (time follows the printed sum over the
    /// overlap; feature is the ablation alternative).
    #[serde(default = "default_distill_axis")]
    pub distill_axis: DistillAxis,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Param("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Param(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Param(format!(
                "keep probability must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Param(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.crop_len < 2 {
            return Err(Error::Param(format!(
                "crop window must cover at least 2 steps, got {}",
                self.crop_len
            )));
        }
        self.dims.validate()
    }
}

/// Per-iteration loss records and wall-clock timings.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub records: Vec<LossReport>,
    pub seconds: Vec<f64>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Result of a pretraining run; the RNG is returned so callers can
/// checkpoint the exact stream position.
pub struct TrainOutcome {
    pub state: TeacherStudentState,
    pub trace: TrainTrace,
    pub rng: ChaCha8Rng,
}

/// Initialize a fresh teacher/student pair and train it on random windows
/// of the training split.
pub fn pretrain(cfg: &TrainConfig, ds: &SeriesDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = init_params(cfg.seed, cfg.dims, cfg.momentum, cfg.lambda)?;
    // The init pass drew from stream 0 of the seed; the training loop gets
    // its own stream so the two never overlap.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let trace = continue_pretrain(&mut state, &mut rng, cfg, ds, cfg.iterations)?;
    Ok(TrainOutcome { state, trace, rng })
}

/// Run `iterations` more optimization steps on existing state. Resuming a
/// checkpointed (state, rng) pair replays the uninterrupted trajectory.
pub fn continue_pretrain(
    state: &mut TeacherStudentState,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    ds: &SeriesDataset,
    iterations: usize,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if cfg.dims != *state.dims() {
        return Err(Error::Dim("config dims differ from the state's dims".into()));
    }
    if ds.channels() != cfg.dims.input_channels {
        return Err(Error::Dim(format!(
            "dataset has {} channels, model expects {}",
            ds.channels(),
            cfg.dims.input_channels
        )));
    }
    let train_len = ds.split_len(Split::Train)?;
    if train_len < cfg.crop_len {
        return Err(Error::Sizing(format!(
            "training split has {train_len} steps, crop window needs {}",
            cfg.crop_len
        )));
    }

    let mut trace = TrainTrace::default();
    for _ in 0..iterations {
        let started = Instant::now();
        let it = state.iteration();
        let report = train_step(state, rng, cfg, ds, train_len)
            .map_err(|e| Error::Usage(format!("iteration {it}: {e}")))?;
        if !(report.ssl.is_finite() && report.sl.is_finite() && report.joint.is_finite()) {
            return Err(Error::NonFinite(format!(
                "iteration {it}: ssl={}, sl={}, joint={}",
                report.ssl, report.sl, report.joint
            )));
        }
        state.set_iteration(it + 1);
        trace.records.push(report);
        trace.seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(trace)
}

fn train_step(
    state: &mut TeacherStudentState,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    ds: &SeriesDataset,
    train_len: usize,
) -> Result<LossReport> {
    let b = cfg.batch_size;
    let c = cfg.dims.input_channels;

    // One crop pair per iteration, shared by the whole batch so the overlap
    // timestamps align across instances for the contrastive pairs. Overlap
    // of at least 2 keeps the temporal distillation softmax non-degenerate.
    let crop = sample_crop_pair_min_overlap(cfg.crop_len, 2, rng)?;
    let (t_len, s_len) = (crop.b1 - crop.a1, crop.b2 - crop.a2);
    let (ov_t0, ov_t1) = crop.overlap_in_first();
    let (ov_s0, ov_s1) = crop.overlap_in_second();

    let mut teacher_data = Vec::with_capacity(b * t_len * c);
    let mut student_data = Vec::with_capacity(b * s_len * c);
    for _ in 0..b {
        let instance = if ds.instances() > 1 {
            rng.random_range(0..ds.instances())
        } else {
            0
        };
        let start = rng.random_range(0..=train_len - cfg.crop_len);
        let window = ds.window(instance, start, start + cfg.crop_len)?;
        let (teacher_raw, student_masked) =
            augment_for_branches(&window, &crop, cfg.keep_prob, rng)?;
        teacher_data.extend_from_slice(teacher_raw.data());
        student_data.extend_from_slice(student_masked.data());
    }
    let teacher_batch = Tensor::new(vec![b, t_len, c], teacher_data)?;
    let student_batch = Tensor::new(vec![b, s_len, c], student_data)?;

    // teacher branch (value-only), centering on the overlap segment
    let h_t_full = state.teacher_forward(&teacher_batch, cfg.keep_prob, rng)?;
    let h_t = slice_time_value(&h_t_full, ov_t0, ov_t1)?;
    state.update_center(&h_t)?;
    let h_t_centered = state.apply_center(&h_t)?;

    // student branch on the gradient tape
    let mut tape = Tape::new();
    let (h_s_full, vars) = state.student_forward(&mut tape, &student_batch)?;
    let h_s = tape.slice_time(h_s_full, ov_s0, ov_s1)?;

    let nce_cfg = NceConfig {
        temperature: cfg.temperature,
        include_intra_student_negatives: cfg.intra_student_negatives,
    };
    let ssl = info_nce(&mut tape, &h_t, h_s, &nce_cfg)?;
    let sl = soft_label(&mut tape, &h_t_centered, h_s, cfg.distill_axis)?;
    let loss = match cfg.objective {
        Objective::Joint => joint_loss(&mut tape, ssl, sl, cfg.lambda)?,
        Objective::ContrastiveOnly => ssl,
        Objective::DistillOnly => sl,
    };

    let ssl_v = tape.value(ssl).scalar_value()?;
    let sl_v = tape.value(sl).scalar_value()?;
    let joint_v = cfg.lambda * sl_v + (1.0 - cfg.lambda) * ssl_v;

    let grads = tape.backward(loss)?;
    let grad_set = collect_param_grads(&grads, &vars, state.student())?;
    sgd_step(state.student_mut(), &grad_set, cfg.learning_rate)?;
    state.ema_update()?;

    let (positive_pairs, negative_pairs) =
        nce_pair_counts(b, crop.overlap_len(), cfg.intra_student_negatives);
    Ok(LossReport {
        ssl: ssl_v,
        sl: sl_v,
        joint: joint_v,
        lambda: cfg.lambda,
        positive_pairs,
        negative_pairs,
    })
}

/// Deterministic loss trace: same config and seed give byte-identical files.
pub fn write_trace_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,ssl,sl,joint")?;
    for (i, r) in trace.records.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i, r.ssl, r.sl, r.joint)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per iteration, kept out of the loss trace so that
/// file stays reproducible.
pub fn write_timing_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,seconds")?;
    for (i, s) in trace.seconds.iter().enumerate() {
        writeln!(w, "{},{}", i, s)?;
    }
    w.flush()?;
    Ok(())
}
