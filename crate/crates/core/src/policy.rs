//! Recurrent tanh-squashed Gaussian design policy.
//!
//! `z_t = (x_t, ξ_{t-1})` goes through a dense encoder, two stacked LSTM
//! layers and a dense head producing the mean `m` of `s ~ N(m, diag σ²)`.
//! The design is `ξ = a·tanh(s) + b`. All weights live in one flat vector so
//! optimizers and finite-difference checks can treat them uniformly.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Environment, Trajectory};
use crate::stats::{RngStream, LN_2PI};

pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 3.0;
/// `|tanh(s)|` is capped below one so squashed designs stay interior.
pub const TANH_LIMIT: f64 = 1.0 - 1e-12;
pub const CHECKPOINT_FORMAT: &str = "iosmc-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub input_dim: usize,
    pub design_dim: usize,
    /// Widths of the rectified hidden encoder layers.
    pub encoder_hidden: Vec<usize>,
    /// Width of the affine encoder output fed to the LSTM.
    pub embedding_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Widths of the rectified hidden head layers.
    pub head_hidden: Vec<usize>,
}

impl PolicyArch {
    /// Encoder 256→256→64, two LSTM layers of 64, head 256→256→d.
    pub fn standard(input_dim: usize, design_dim: usize) -> Self {
        Self {
            input_dim,
            design_dim,
            encoder_hidden: vec![256, 256],
            embedding_dim: 64,
            lstm_hidden: 64,
            lstm_layers: 2,
            head_hidden: vec![256, 256],
        }
    }

    pub fn for_environment(env: &Environment) -> Self {
        Self::standard(env.state_dim() + env.design_dim(), env.design_dim())
    }

    /// Same topology with small widths, for exhaustive gradient checks.
    pub fn compact(input_dim: usize, design_dim: usize) -> Self {
        Self {
            input_dim,
            design_dim,
            encoder_hidden: vec![12, 10],
            embedding_dim: 6,
            lstm_hidden: 5,
            lstm_layers: 2,
            head_hidden: vec![9, 7],
        }
    }

    fn validate(&self) -> Result<()> {
        let widths = self.encoder_hidden.iter().chain(&self.head_hidden).chain([
            &self.input_dim,
            &self.design_dim,
            &self.embedding_dim,
            &self.lstm_hidden,
        ]);
        if widths.into_iter().any(|w| *w == 0) || self.lstm_layers == 0 {
            return Err(Error::Config(format!("invalid policy architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DenseLayout {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
    relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LstmLayout {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    inp: usize,
    hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<DenseLayout>,
    lstm: Vec<LstmLayout>,
    head: Vec<DenseLayout>,
    log_variance: usize,
    total: usize,
}

/// A named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn dense_stack(
    widths_in: usize,
    hidden: &[usize],
    out: usize,
    last_relu: bool,
    cursor: &mut usize,
) -> Vec<DenseLayout> {
    let mut layers = Vec::new();
    let mut inp = widths_in;
    let outs: Vec<usize> = hidden.iter().copied().chain([out]).collect();
    for (k, &o) in outs.iter().enumerate() {
        let w = *cursor;
        *cursor += o * inp;
        let b = *cursor;
        *cursor += o;
        layers.push(DenseLayout {
            w,
            b,
            out: o,
            inp,
            relu: k + 1 < outs.len() || last_relu,
        });
        inp = o;
    }
    layers
}

impl Layout {
    fn new(arch: &PolicyArch) -> Self {
        let mut cursor = 0;
        let encoder = dense_stack(
            arch.input_dim,
            &arch.encoder_hidden,
            arch.embedding_dim,
            false,
            &mut cursor,
        );
        let mut lstm = Vec::new();
        let mut inp = arch.embedding_dim;
        let h = arch.lstm_hidden;
        for _ in 0..arch.lstm_layers {
            let w_ih = cursor;
            cursor += 4 * h * inp;
            let w_hh = cursor;
            cursor += 4 * h * h;
            let b = cursor;
            cursor += 4 * h;
            lstm.push(LstmLayout {
                w_ih,
                w_hh,
                b,
                inp,
                hidden: h,
            });
            inp = h;
        }
        let head = dense_stack(h, &arch.head_hidden, arch.design_dim, false, &mut cursor);
        let log_variance = cursor;
        cursor += arch.design_dim;
        Self {
            encoder,
            lstm,
            head,
            log_variance,
            total: cursor,
        }
    }

    fn groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut dense = |prefix: &str, layers: &[DenseLayout]| {
            for (k, l) in layers.iter().enumerate() {
                groups.push(ParamGroup {
                    name: format!("{prefix}.{k}.weight"),
                    offset: l.w,
                    shape: vec![l.out, l.inp],
                });
                groups.push(ParamGroup {
                    name: format!("{prefix}.{k}.bias"),
                    offset: l.b,
                    shape: vec![l.out],
                });
            }
        };
        dense("encoder", &self.encoder);
        let mut out = groups;
        for (k, l) in self.lstm.iter().enumerate() {
            out.push(ParamGroup {
                name: format!("lstm.{k}.weight_ih"),
                offset: l.w_ih,
                shape: vec![4 * l.hidden, l.inp],
            });
            out.push(ParamGroup {
                name: format!("lstm.{k}.weight_hh"),
                offset: l.w_hh,
                shape: vec![4 * l.hidden, l.hidden],
            });
            out.push(ParamGroup {
                name: format!("lstm.{k}.bias"),
                offset: l.b,
                shape: vec![4 * l.hidden],
            });
        }
        for (k, l) in self.head.iter().enumerate() {
            out.push(ParamGroup {
                name: format!("head.{k}.weight"),
                offset: l.w,
                shape: vec![l.out, l.inp],
            });
            out.push(ParamGroup {
                name: format!("head.{k}.bias"),
                offset: l.b,
                shape: vec![l.out],
            });
        }
        let d = self.head.last().map_or(0, |l| l.out);
        out.push(ParamGroup {
            name: "log_variance".into(),
            offset: self.log_variance,
            shape: vec![d],
        });
        out
    }
}

/// Policy weights plus the fixed squash constants `(a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolicyCheckpoint", try_from = "PolicyCheckpoint")]
pub struct PolicyParameters {
    arch: PolicyArch,
    layout: Layout,
    values: Vec<f64>,
    design_scale: f64,
    design_shift: f64,
    /// Environment the policy was built for, when known.
    environment: Option<String>,
}

/// Recurrent state for a batch of policies evaluated in lockstep
/// (one row per batch member).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

impl PolicyState {
    pub fn zeros(arch: &PolicyArch, batch: usize) -> Self {
        let z = || Array2::zeros((batch, arch.lstm_hidden));
        Self {
            h: (0..arch.lstm_layers).map(|_| z()).collect(),
            c: (0..arch.lstm_layers).map(|_| z()).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }

    /// Rows `rows` of this state, in order (rows may repeat).
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            h: self.h.iter().map(|a| a.select(Axis(0), rows)).collect(),
            c: self.c.iter().map(|a| a.select(Axis(0), rows)).collect(),
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 - tanh²(s))`, stable for large `|s|`.
#[inline]
pub fn log_sech2(s: f64) -> f64 {
    let a = s.abs();
    std::f64::consts::LN_2 * 2.0 - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}

/// Encoder input for `z_t`: `(x_t, ξ_{t-1})`, with zeros standing in for
/// the missing design at t = 0.
pub fn policy_input(x: &[f64], prev_design: Option<&[f64]>, design_dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + design_dim);
    v.extend_from_slice(x);
    match prev_design {
        Some(d) => v.extend_from_slice(d),
        None => v.extend(std::iter::repeat_n(0.0, design_dim)),
    }
    v
}

/// Per-layer activations of a whole-sequence forward pass.
struct LstmTape {
    input: Array2<f64>,
    /// Activated gates `[i, f, g, o]`, one row per step.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
}

struct Tape {
    /// `encoder[0]` is the raw input; `encoder[k+1]` the output of layer k.
    encoder: Vec<Array2<f64>>,
    lstm: Vec<LstmTape>,
    /// `head[0]` is the top LSTM output; `head[k+1]` the output of layer k.
    head: Vec<Array2<f64>>,
}

impl Tape {
    fn means(&self) -> &Array2<f64> {
        self.head.last().expect("head output")
    }
}

impl PolicyParameters {
    /// Fan-in scaled uniform weights, zero biases, zero log-variance.
    pub fn init(
        arch: PolicyArch,
        design_scale: f64,
        design_shift: f64,
        init_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        arch.validate()?;
        if !(design_scale > 0.0) {
            return Err(Error::Config("design scale must be positive".into()));
        }
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.total];
        let mut fill = |offset: usize, len: usize, fan_in: usize| {
            let bound = init_scale / (fan_in as f64).sqrt();
            for v in &mut values[offset..offset + len] {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        };
        for l in layout.encoder.iter().chain(&layout.head) {
            fill(l.w, l.out * l.inp, l.inp);
        }
        for l in &layout.lstm {
            fill(l.w_ih, 4 * l.hidden * l.inp, l.hidden);
            fill(l.w_hh, 4 * l.hidden * l.hidden, l.hidden);
        }
        Ok(Self {
            arch,
            layout,
            values,
            design_scale,
            design_shift,
            environment: None,
        })
    }

    /// Standard architecture sized for `env`.
    pub fn for_environment(env: &Environment, init_scale: f64, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::init(
            PolicyArch::for_environment(env),
            env.design_scale(),
            env.design_shift(),
            init_scale,
            rng,
        )?;
        p.environment = Some(env.name().to_string());
        Ok(p)
    }

    pub fn environment(&self) -> Option<&str> {
        self.environment.as_deref()
    }

    /// Tags the policy with the environment it belongs to.
    pub fn with_environment(mut self, name: &str) -> Self {
        self.environment = Some(name.to_string());
        self
    }

    pub fn from_values(arch: PolicyArch, design_scale: f64, design_shift: f64, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.total {
            return Err(Error::Dimension {
                expected: layout.total,
                got: values.len(),
            });
        }
        Ok(Self {
            arch,
            layout,
            values,
            design_scale,
            design_shift,
            environment: None,
        })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn design_dim(&self) -> usize {
        self.arch.design_dim
    }

    pub fn design_scale(&self) -> f64 {
        self.design_scale
    }

    pub fn design_shift(&self) -> f64 {
        self.design_shift
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.layout.groups()
    }

    pub fn log_variance(&self) -> &[f64] {
        let o = self.layout.log_variance;
        &self.values[o..o + self.arch.design_dim]
    }

    /// Log-variance after clamping to `[LOG_VARIANCE_MIN, LOG_VARIANCE_MAX]`.
    pub fn effective_log_variance(&self) -> Vec<f64> {
        self.log_variance()
            .iter()
            .map(|v| v.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX))
            .collect()
    }

    /// Copy with the sampling variance forced to its minimum.
    pub fn mean_policy(&self) -> Self {
        let mut out = self.clone();
        let o = out.layout.log_variance;
        for v in &mut out.values[o..o + out.arch.design_dim] {
            *v = LOG_VARIANCE_MIN;
        }
        out
    }

    /// Checks that `env` matches the input and design sizes of this policy.
    pub fn check_environment(&self, env: &Environment) -> Result<()> {
        let expected = env.state_dim() + env.design_dim();
        if self.arch.input_dim != expected || self.arch.design_dim != env.design_dim() {
            return Err(Error::Config(format!(
                "policy expects input/design sizes {}/{} but environment {} has {}/{}",
                self.arch.input_dim,
                self.arch.design_dim,
                env.name(),
                expected,
                env.design_dim()
            )));
        }
        if let Some(name) = &self.environment {
            if name != env.name() {
                return Err(Error::Config(format!(
                    "policy was trained on {name}, not {}",
                    env.name()
                )));
            }
        }
        if self.design_scale != env.design_scale() || self.design_shift != env.design_shift() {
            return Err(Error::Config(format!(
                "policy design range ({}, {}) differs from environment {} ({}, {})",
                self.design_scale,
                self.design_shift,
                env.name(),
                env.design_scale(),
                env.design_shift()
            )));
        }
        Ok(())
    }

    fn mat(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.values[offset..offset + rows * cols]).expect("layout")
    }

    fn vec(&self, offset: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[offset..offset + len])
    }

    fn dense(&self, l: &DenseLayout, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.mat(l.w, l.out, l.inp).t());
        y += &self.vec(l.b, l.out);
        if l.relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }

    /// One recurrent step for a batch: rows of `inputs` are encoder inputs.
    /// Returns the means `m` (batch × design_dim) and the advanced state.
    pub fn step(&self, state: &PolicyState, inputs: ArrayView2<f64>) -> (Array2<f64>, PolicyState) {
        let mut x = inputs.to_owned();
        for l in &self.layout.encoder {
            x = self.dense(l, x.view());
        }
        let mut next = state.clone();
        for (k, l) in self.layout.lstm.iter().enumerate() {
            let hsz = l.hidden;
            let mut a = x.dot(&self.mat(l.w_ih, 4 * hsz, l.inp).t());
            a += &self.vec(l.b, 4 * hsz);
            a += &state.h[k].dot(&self.mat(l.w_hh, 4 * hsz, hsz).t());
            let (h, c) = (&mut next.h[k], &mut next.c[k]);
            for r in 0..a.nrows() {
                for j in 0..hsz {
                    let i = sigmoid(a[(r, j)]);
                    let f = sigmoid(a[(r, hsz + j)]);
                    let g = a[(r, 2 * hsz + j)].tanh();
                    let o = sigmoid(a[(r, 3 * hsz + j)]);
                    let cn = f * c[(r, j)] + i * g;
                    c[(r, j)] = cn;
                    h[(r, j)] = o * cn.tanh();
                }
            }
            x = h.clone();
        }
        for l in &self.layout.head {
            x = self.dense(l, x.view());
        }
        (x, next)
    }

    /// Single-input convenience wrapper around [`Self::step`].
    pub fn step_one(&self, state: &PolicyState, input: &[f64]) -> (Vec<f64>, PolicyState) {
        let row = ArrayView2::from_shape((1, input.len()), input).expect("row");
        let (m, s) = self.step(state, row);
        (m.row(0).to_vec(), s)
    }

    /// Squashed design for pre-squash `s`.
    pub fn squash(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .map(|v| self.design_scale * v.tanh().clamp(-TANH_LIMIT, TANH_LIMIT) + self.design_shift)
            .collect()
    }

    /// Pre-squash value behind an interior design.
    pub fn unsquash(&self, design: &[f64]) -> Result<Vec<f64>> {
        design
            .iter()
            .map(|&xi| {
                let u = (xi - self.design_shift) / self.design_scale;
                if u.abs() < 1.0 {
                    Ok(u.atanh())
                } else {
                    Err(Error::Domain(format!(
                        "design {xi} is not strictly inside ({}, {})",
                        self.design_shift - self.design_scale,
                        self.design_shift + self.design_scale
                    )))
                }
            })
            .collect()
    }

    /// Draws `s ~ N(m, diag σ²)` and returns `(ξ, s)`.
    pub fn sample_from_mean(&self, mean: ArrayView1<f64>, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let lv = self.effective_log_variance();
        let s: Vec<f64> = mean
            .iter()
            .zip(&lv)
            .map(|(m, l)| m + (0.5 * l).exp() * rng.standard_normal())
            .collect();
        (self.squash(&s), s)
    }

    /// `log N(s | m, σ²) − Σ log(a (1 − tanh² s))` for given pre-squash `s`.
    pub fn logpdf_presquash(&self, mean: ArrayView1<f64>, s: &[f64]) -> f64 {
        let lv = self.effective_log_variance();
        let mut total = 0.0;
        for ((m, l), sv) in mean.iter().zip(&lv).zip(s) {
            let r = sv - m;
            total += -0.5 * (LN_2PI + l + r * r * (-l).exp());
            total -= self.design_scale.ln() + log_sech2(*sv);
        }
        total
    }

    fn trajectory_inputs(&self, trajectory: &Trajectory, steps: usize) -> Array2<f64> {
        let d = self.arch.design_dim;
        let mut inputs = Array2::zeros((steps, self.arch.input_dim));
        for t in 0..steps {
            let st = &trajectory.states[t];
            let row = policy_input(&st.x, st.design.as_deref(), d);
            inputs.row_mut(t).assign(&ArrayView1::from(&row));
        }
        inputs
    }

    fn presquash_values(&self, trajectory: &Trajectory) -> Result<Array2<f64>> {
        let steps = trajectory.len();
        let d = self.arch.design_dim;
        let mut out = Array2::zeros((steps, d));
        for t in 0..steps {
            let st = &trajectory.states[t + 1];
            let s = match (&st.presquash, &st.design) {
                (Some(s), _) => s.clone(),
                (None, Some(xi)) => self.unsquash(xi)?,
                (None, None) => return Err(Error::InconsistentTrajectory(format!("state {} has no design", t + 1))),
            };
            out.row_mut(t).assign(&ArrayView1::from(&s));
        }
        Ok(out)
    }

    fn forward_tape(&self, inputs: Array2<f64>) -> Tape {
        let mut encoder = vec![inputs];
        for l in &self.layout.encoder {
            let y = self.dense(l, encoder.last().expect("input").view());
            encoder.push(y);
        }
        let mut x = encoder.last().expect("embedding").clone();
        let mut lstm = Vec::new();
        for l in &self.layout.lstm {
            let tape = self.lstm_sequence(l, x);
            x = tape.h.clone();
            lstm.push(tape);
        }
        let mut head = vec![x];
        for l in &self.layout.head {
            let y = self.dense(l, head.last().expect("hidden").view());
            head.push(y);
        }
        Tape { encoder, lstm, head }
    }

    fn lstm_sequence(&self, l: &LstmLayout, input: Array2<f64>) -> LstmTape {
        let hsz = l.hidden;
        let steps = input.nrows();
        let mut gates = input.dot(&self.mat(l.w_ih, 4 * hsz, l.inp).t());
        gates += &self.vec(l.b, 4 * hsz);
        let w_hh = self.mat(l.w_hh, 4 * hsz, hsz);
        let mut c = Array2::zeros((steps, hsz));
        let mut tanh_c = Array2::zeros((steps, hsz));
        let mut h = Array2::<f64>::zeros((steps, hsz));
        for t in 0..steps {
            if t > 0 {
                let rec = w_hh.dot(&h.row(t - 1));
                let mut row = gates.row_mut(t);
                row += &rec;
            }
            for j in 0..hsz {
                let i = sigmoid(gates[(t, j)]);
                let f = sigmoid(gates[(t, hsz + j)]);
                let g = gates[(t, 2 * hsz + j)].tanh();
                let o = sigmoid(gates[(t, 3 * hsz + j)]);
                gates[(t, j)] = i;
                gates[(t, hsz + j)] = f;
                gates[(t, 2 * hsz + j)] = g;
                gates[(t, 3 * hsz + j)] = o;
                let cp = if t > 0 { c[(t - 1, j)] } else { 0.0 };
                let cn = f * cp + i * g;
                c[(t, j)] = cn;
                tanh_c[(t, j)] = cn.tanh();
                h[(t, j)] = o * tanh_c[(t, j)];
            }
        }
        LstmTape {
            input,
            gates,
            c,
            tanh_c,
            h,
        }
    }

    fn grad_mat<'a>(grad: &'a mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((rows, cols), &mut grad[offset..offset + rows * cols]).expect("layout")
    }

    /// Backpropagates `dy` (gradient w.r.t. the layer output) through a dense
    /// layer; returns the gradient w.r.t. its input.
    fn dense_backward(
        &self,
        l: &DenseLayout,
        x: &Array2<f64>,
        y: &Array2<f64>,
        mut dy: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        if l.relu {
            dy.zip_mut_with(y, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut Self::grad_mat(grad, l.w, l.out, l.inp));
        for (g, s) in grad[l.b..l.b + l.out].iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += s;
        }
        dy.dot(&self.mat(l.w, l.out, l.inp))
    }

    fn lstm_backward(&self, l: &LstmLayout, tape: &LstmTape, dh_seq: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let hsz = l.hidden;
        let steps = dh_seq.nrows();
        let w_hh = self.mat(l.w_hh, 4 * hsz, hsz);
        let mut da = Array2::<f64>::zeros((steps, 4 * hsz));
        let mut dh_next = Array1::<f64>::zeros(hsz);
        let mut dc_next = Array1::<f64>::zeros(hsz);
        for t in (0..steps).rev() {
            for j in 0..hsz {
                let dh = dh_seq[(t, j)] + dh_next[j];
                let i = tape.gates[(t, j)];
                let f = tape.gates[(t, hsz + j)];
                let g = tape.gates[(t, 2 * hsz + j)];
                let o = tape.gates[(t, 3 * hsz + j)];
                let tc = tape.tanh_c[(t, j)];
                let cp = if t > 0 { tape.c[(t - 1, j)] } else { 0.0 };
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                da[(t, j)] = dc * g * i * (1.0 - i);
                da[(t, hsz + j)] = dc * cp * f * (1.0 - f);
                da[(t, 2 * hsz + j)] = dc * i * (1.0 - g * g);
                da[(t, 3 * hsz + j)] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next = w_hh.t().dot(&da.row(t));
        }
        general_mat_mul(
            1.0,
            &da.t(),
            &tape.input,
            1.0,
            &mut Self::grad_mat(grad, l.w_ih, 4 * hsz, l.inp),
        );
        if steps > 1 {
            let da_tail = da.slice(ndarray::s![1.., ..]);
            let h_prev = tape.h.slice(ndarray::s![..steps - 1, ..]);
            general_mat_mul(
                1.0,
                &da_tail.t(),
                &h_prev,
                1.0,
                &mut Self::grad_mat(grad, l.w_hh, 4 * hsz, hsz),
            );
        }
        for (g, s) in grad[l.b..l.b + 4 * hsz].iter_mut().zip(da.sum_axis(Axis(0))) {
            *g += s;
        }
        da.dot(&self.mat(l.w_ih, 4 * hsz, l.inp))
    }

    fn backward(&self, tape: &Tape, dmeans: Array2<f64>, grad: &mut [f64]) {
        let mut dy = dmeans;
        for (k, l) in self.layout.head.iter().enumerate().rev() {
            dy = self.dense_backward(l, &tape.head[k], &tape.head[k + 1], dy, grad);
        }
        for (k, l) in self.layout.lstm.iter().enumerate().rev() {
            dy = self.lstm_backward(l, &tape.lstm[k], dy, grad);
        }
        for (k, l) in self.layout.encoder.iter().enumerate().rev() {
            dy = self.dense_backward(l, &tape.encoder[k], &tape.encoder[k + 1], dy, grad);
        }
    }

    /// Means `m_φ(z_{0:t})` for t = 0..steps-1 from a whole-sequence pass.
    pub fn trajectory_means(&self, trajectory: &Trajectory, steps: usize) -> Array2<f64> {
        let tape = self.forward_tape(self.trajectory_inputs(trajectory, steps));
        tape.means().clone()
    }

    /// `log π_φ(ξ | z_{0:t})` where `history` is `z_{0:t}`.
    pub fn logpdf(&self, history: &Trajectory, design: &[f64]) -> Result<f64> {
        let s = self.unsquash(design)?;
        let means = self.trajectory_means(history, history.states.len());
        let last = means.nrows() - 1;
        Ok(self.logpdf_presquash(means.row(last), &s))
    }

    /// `Σ_t log π_φ(ξ_t | z_{0:t})` over every design of `trajectory`.
    pub fn trajectory_logpdf(&self, trajectory: &Trajectory) -> Result<f64> {
        let steps = trajectory.len();
        if steps == 0 {
            return Ok(0.0);
        }
        let s = self.presquash_values(trajectory)?;
        let means = self.trajectory_means(trajectory, steps);
        Ok((0..steps)
            .map(|t| self.logpdf_presquash(means.row(t), s.row(t).as_slice().expect("contiguous")))
            .sum())
    }

    /// `(Σ_t log π_φ(ξ_t | z_{0:t}), ∇_φ of that sum)` by backpropagation
    /// through time. The tanh Jacobian does not depend on φ.
    pub fn trajectory_logpdf_grad(&self, trajectory: &Trajectory) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.values.len()];
        let steps = trajectory.len();
        if steps == 0 {
            return Ok((0.0, grad));
        }
        let s = self.presquash_values(trajectory)?;
        let tape = self.forward_tape(self.trajectory_inputs(trajectory, steps));
        let means = tape.means();
        let raw_lv = self.log_variance();
        let lv = self.effective_log_variance();
        let d = self.arch.design_dim;
        let mut dmeans = Array2::zeros((steps, d));
        let mut dlv = vec![0.0; d];
        let mut total = 0.0;
        for t in 0..steps {
            total += self.logpdf_presquash(means.row(t), s.row(t).as_slice().expect("contiguous"));
            for i in 0..d {
                let inv_var = (-lv[i]).exp();
                let r = s[(t, i)] - means[(t, i)];
                dmeans[(t, i)] = r * inv_var;
                dlv[i] += -0.5 + 0.5 * r * r * inv_var;
            }
        }
        self.backward(&tape, dmeans, &mut grad);
        for i in 0..d {
            if (LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(&raw_lv[i]) {
                grad[self.layout.log_variance + i] += dlv[i];
            }
        }
        Ok((total, grad))
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Uniform baseline design on `(b − a, b + a)`, i.i.d. per step.
pub fn random_policy_sample(env: &Environment, rng: &mut RngStream) -> Vec<f64> {
    let (a, b) = (env.design_scale(), env.design_shift());
    (0..env.design_dim())
        .map(|_| b + a * (2.0 * rng.uniform() - 1.0))
        .collect()
}

/// Design rule driving rollouts.
#[derive(Clone, Copy, Debug)]
pub enum DesignPolicy<'a> {
    Network(&'a PolicyParameters),
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk form of [`PolicyParameters`]: named tensors with shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    format: String,
    version: u32,
    arch: PolicyArch,
    design_scale: f64,
    design_shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    environment: Option<String>,
    tensors: Vec<TensorRecord>,
}

impl From<PolicyParameters> for PolicyCheckpoint {
    fn from(p: PolicyParameters) -> Self {
        let tensors = p
            .groups()
            .into_iter()
            .map(|g| TensorRecord {
                data: p.values[g.range()].to_vec(),
                name: g.name,
                shape: g.shape,
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: p.arch,
            design_scale: p.design_scale,
            design_shift: p.design_shift,
            environment: p.environment,
            tensors,
        }
    }
}

impl TryFrom<PolicyCheckpoint> for PolicyParameters {
    type Error = Error;

    fn try_from(c: PolicyCheckpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.arch.validate()?;
        let layout = Layout::new(&c.arch);
        let groups = layout.groups();
        if groups.len() != c.tensors.len() {
            return Err(Error::Config("checkpoint tensor count mismatch".into()));
        }
        let mut values = vec![0.0; layout.total];
        for (g, t) in groups.iter().zip(&c.tensors) {
            if g.name != t.name || g.shape != t.shape || t.data.len() != g.len() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} has shape {:?}, expected {} {:?}",
                    t.name, t.shape, g.name, g.shape
                )));
            }
            values[g.range()].copy_from_slice(&t.data);
        }
        Ok(Self {
            arch: c.arch,
            layout,
            values,
            design_scale: c.design_scale,
            design_shift: c.design_shift,
            environment: c.environment,
        })
    }
}
