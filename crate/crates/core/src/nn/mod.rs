//! Dense networks with Fourier-feature inputs, mid-network concatenation,
//! hand-written reverse mode and Adam.
//!
//! A network has a fixed list of input slots. Layer `l` reads the previous
//! hidden activation (for `l > 0`) followed by the slots joined at `l`, in
//! plan order. Hidden layers use ReLU, the last layer is linear.

mod adam;
mod loss;

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{ArrayData, Blob};

pub use adam::Adam;
pub use loss::{
    latent_prior, lipschitz_penalty, loss_mse_cos, loss_sdf, mse_cos_batch, sdf_mse_batch, COS_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Raw,
    Fourier,
}

/// Input slot `input` enters layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Join {
    pub layer: usize,
    pub input: usize,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Number of Fourier frequencies `k`; the encoding has `2k` features.
    pub fourier_k: usize,
    pub sigma_ff: f64,
    pub plan: Vec<Join>,
    pub seed: u64,
}

impl Architecture {
    /// Slots `[x, code, electrode]`; Fourier `x` at the input, code and
    /// electrode joined after the third hidden layer.
    pub fn leadfield(code_dim: usize, width: usize, depth: usize, k: usize, sigma_ff: f64, seed: u64) -> Self {
        let mid = 3.min(depth);
        Self {
            input_dims: vec![3, code_dim, 3],
            hidden: vec![width; depth],
            output: 3,
            fourier_k: k,
            sigma_ff,
            plan: vec![
                Join { layer: 0, input: 0, encoding: Encoding::Fourier },
                Join { layer: mid, input: 1, encoding: Encoding::Raw },
                Join { layer: mid, input: 2, encoding: Encoding::Raw },
            ],
            seed,
        }
    }

    /// Slots `[z, x]`; `z` and Fourier `x` at the input, raw `x` skipped in
    /// after the third hidden layer; four SDF outputs.
    pub fn sdf(code_dim: usize, width: usize, depth: usize, k: usize, sigma_ff: f64, seed: u64) -> Self {
        let mid = 3.min(depth);
        Self {
            input_dims: vec![code_dim, 3],
            hidden: vec![width; depth],
            output: 4,
            fourier_k: k,
            sigma_ff,
            plan: vec![
                Join { layer: 0, input: 0, encoding: Encoding::Raw },
                Join { layer: 0, input: 1, encoding: Encoding::Fourier },
                Join { layer: mid, input: 1, encoding: Encoding::Raw },
            ],
            seed,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn fourier_input(&self) -> Option<usize> {
        self.plan.iter().find(|j| j.encoding == Encoding::Fourier).map(|j| j.input)
    }

    fn join_width(&self, j: &Join) -> usize {
        match j.encoding {
            Encoding::Raw => self.input_dims[j.input],
            Encoding::Fourier => 2 * self.fourier_k,
        }
    }

    /// `(out, in)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers())
            .map(|l| {
                let prev = if l == 0 { 0 } else { self.hidden[l - 1] };
                let joined: usize = self.plan.iter().filter(|j| j.layer == l).map(|j| self.join_width(j)).sum();
                let out = if l == self.hidden.len() { self.output } else { self.hidden[l] };
                (out, prev + joined)
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network architecture: {m}")));
        if self.output == 0 || self.hidden.iter().any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if !self.plan.iter().any(|j| j.layer == 0) {
            return bad("nothing joins the first layer".into());
        }
        for j in &self.plan {
            if j.input >= self.input_dims.len() || j.layer > self.hidden.len() {
                return bad(format!("join {j:?} out of range"));
            }
        }
        let fourier: Vec<usize> =
            self.plan.iter().filter(|j| j.encoding == Encoding::Fourier).map(|j| j.input).collect();
        if fourier.iter().any(|&i| i != fourier[0]) {
            return bad("only one input slot may be Fourier encoded".into());
        }
        if !fourier.is_empty() && (self.fourier_k == 0 || !(self.sigma_ff > 0.0)) {
            return bad("Fourier encoding needs k > 0 and sigma_ff > 0".into());
        }
        Ok(())
    }
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    fourier_arg: Option<Array2<f64>>,
    batch: usize,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("tape has layers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: Architecture,
    /// Per layer: `W` row-major `(out, in)` then `b`.
    pub params: Vec<f64>,
    /// Fourier frequency matrix `(k, d)`.
    pub b_ff: Array2<f64>,
}

impl Mlp {
    /// Fan-in scaled uniform weights, zero biases, Gaussian Fourier frequencies.
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut params = Vec::with_capacity(arch.n_params());
        for (out, inp) in arch.layer_shapes() {
            let a = (6.0 / inp as f64).sqrt();
            params.extend((0..out * inp).map(|_| rng.random_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, out));
        }
        let d = arch.fourier_input().map_or(0, |i| arch.input_dims[i]);
        let k = if d == 0 { 0 } else { arch.fourier_k };
        let normal = Normal::new(0.0, arch.sigma_ff.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
        let b_ff = Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng));
        Ok(Self { arch, params, b_ff })
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>, b_ff: Array2<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(Error::input(format!(
                "parameter count {} does not match the architecture ({})",
                params.len(),
                arch.n_params()
            )));
        }
        let d = arch.fourier_input().map_or(0, |i| arch.input_dims[i]);
        if arch.fourier_input().is_some() && b_ff.dim() != (arch.fourier_k, d) {
            return Err(Error::input(format!("Fourier matrix shape {:?}", b_ff.dim())));
        }
        if params.iter().chain(b_ff.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite network weights"));
        }
        Ok(Self { arch, params, b_ff })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| {
                let r = (off, o, i);
                off += o * i + o;
                r
            })
            .collect()
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (off, o, i) = self.offsets()[l];
        ArrayView2::from_shape((o, i), &self.params[off..off + o * i]).unwrap()
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (off, o, i) = self.offsets()[l];
        ArrayView1::from(&self.params[off + o * i..off + o * i + o])
    }

    /// Index ranges of each layer's weight matrix inside `params`.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.offsets().into_iter().map(|(off, o, i)| off..off + o * i).collect()
    }

    fn check_inputs(&self, inputs: &[ArrayView2<f64>]) -> Result<usize> {
        if inputs.len() != self.arch.input_dims.len() {
            return Err(Error::input(format!(
                "network expects {} inputs, got {}",
                self.arch.input_dims.len(),
                inputs.len()
            )));
        }
        let batch = inputs[0].nrows();
        for (k, (x, &d)) in inputs.iter().zip(&self.arch.input_dims).enumerate() {
            if x.ncols() != d || x.nrows() != batch {
                return Err(Error::input(format!("input {k} has shape {:?}, expected ({batch}, {d})", x.dim())));
            }
        }
        Ok(batch)
    }

    /// `[sin(2 pi B x), cos(2 pi B x)]` for each row of `x`.
    pub fn fourier_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.b_ff.ncols() {
            return Err(Error::input(format!("Fourier input has {} columns, B has {}", x.ncols(), self.b_ff.ncols())));
        }
        let arg = x.dot(&self.b_ff.t()) * TAU;
        Ok(encode(&arg))
    }

    pub fn forward(&self, inputs: &[ArrayView2<f64>]) -> Result<Tape> {
        let batch = self.check_inputs(inputs)?;
        let fourier_arg = self.arch.fourier_input().map(|i| inputs[i].dot(&self.b_ff.t()) * TAU);
        let fourier = fourier_arg.as_ref().map(encode);
        let n = self.arch.n_layers();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(n);
        for l in 0..n {
            let mut parts: Vec<ArrayView2<f64>> = Vec::new();
            let relu;
            if l > 0 {
                relu = pre[l - 1].mapv(|v| v.max(0.0));
                parts.push(relu.view());
            }
            for j in self.arch.plan.iter().filter(|j| j.layer == l) {
                parts.push(match j.encoding {
                    Encoding::Raw => inputs[j.input],
                    Encoding::Fourier => fourier.as_ref().unwrap().view(),
                });
            }
            let a = concatenate(Axis(1), &parts).map_err(|e| Error::input(e.to_string()))?;
            let z = a.dot(&self.weight(l).t()) + &self.bias(l);
            layer_inputs.push(a);
            pre.push(z);
        }
        Ok(Tape { layer_inputs, pre, fourier_arg, batch })
    }

    pub fn predict(&self, inputs: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        Ok(self.forward(inputs)?.pre.pop().unwrap())
    }

    /// Reverse pass for `d_out = dL/d(output)`. Returns the parameter
    /// gradient (layout of `params`) and the gradient for every input slot.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
        let n = self.arch.n_layers();
        if tape.pre.len() != n || d_out.dim() != (tape.batch, self.arch.output) {
            return Err(Error::input("backward called with a tape or gradient that does not match the network"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut d_inputs: Vec<Array2<f64>> =
            self.arch.input_dims.iter().map(|&d| Array2::zeros((tape.batch, d))).collect();
        let mut d_fourier: Option<Array2<f64>> = None;
        let offsets = self.offsets();
        let mut dz = d_out.to_owned();
        for l in (0..n).rev() {
            let (off, o, i) = offsets[l];
            let dw = dz.t().dot(&tape.layer_inputs[l]);
            grad[off..off + o * i].iter_mut().zip(dw.iter()).for_each(|(g, v)| *g = *v);
            let db = dz.sum_axis(Axis(0));
            grad[off + o * i..off + o * i + o].copy_from_slice(db.as_slice().unwrap());
            let da = dz.dot(&self.weight(l));
            let mut col = 0;
            let prev = if l > 0 { self.arch.hidden[l - 1] } else { 0 };
            let d_prev = da.slice(s![.., 0..prev]).to_owned();
            col += prev;
            for j in self.arch.plan.iter().filter(|j| j.layer == l) {
                let w = self.arch.join_width(j);
                let part = da.slice(s![.., col..col + w]);
                match j.encoding {
                    Encoding::Raw => d_inputs[j.input] += &part,
                    Encoding::Fourier => match &mut d_fourier {
                        Some(f) => *f += &part,
                        None => d_fourier = Some(part.to_owned()),
                    },
                }
                col += w;
            }
            if l > 0 {
                let z = &tape.pre[l - 1];
                dz = d_prev;
                dz.zip_mut_with(z, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
            }
        }
        if let (Some(df), Some(arg), Some(slot)) = (d_fourier, &tape.fourier_arg, self.arch.fourier_input()) {
            let k = self.arch.fourier_k;
            let mut d_arg = Array2::zeros(arg.dim());
            ndarray::Zip::from(&mut d_arg)
                .and(arg)
                .and(df.slice(s![.., 0..k]))
                .and(df.slice(s![.., k..2 * k]))
                .for_each(|d, &a, &gs, &gc| *d = gs * a.cos() - gc * a.sin());
            d_inputs[slot] += &(d_arg.dot(&self.b_ff) * TAU);
        }
        Ok((grad, d_inputs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": "lfk-network",
            "architecture": self.arch,
            "activations": { "hidden": "relu", "output": "linear" },
            "layout": "params: per layer W (out x in, row-major) then b, in layer order; b_ff: (k, d) row-major",
        });
        let params: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
        let b_ff: Vec<f32> = self.b_ff.iter().map(|&v| v as f32).collect();
        Blob::new(meta)
            .with("params", &[params.len()], ArrayData::F32(params))
            .with("b_ff", &[self.b_ff.nrows(), self.b_ff.ncols()], ArrayData::F32(b_ff))
            .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = Blob::read(path)?;
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let arch: Architecture = serde_json::from_value(blob.meta["architecture"].clone())
            .map_err(|e| fmt(format!("architecture: {e}")))?;
        let shape = blob.shape("b_ff")?.to_vec();
        let b_ff = Array2::from_shape_vec((shape[0], shape[1]), blob.f64s("b_ff")?).map_err(|e| fmt(e.to_string()))?;
        Mlp::from_parts(arch, blob.f64s("params")?, b_ff).map_err(|e| fmt(e.to_string()))
    }

    /// Round every weight through `f32`, matching what `save` stores.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
        m.b_ff.mapv_inplace(|v| v as f32 as f64);
        m
    }
}

fn encode(arg: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[arg.mapv(f64::sin).view(), arg.mapv(f64::cos).view()]).unwrap()
}

/// Row-stack of `n` copies of a vector.
pub fn broadcast_rows(v: &[f64], n: usize) -> Array2<f64> {
    Array1::from(v.to_vec()).broadcast((n, v.len())).unwrap().to_owned()
}
