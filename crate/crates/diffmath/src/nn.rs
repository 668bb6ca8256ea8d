//! The handful of layers the forecasting pipeline is built from.

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), uniform_fan_in(rng, din, &[din, dout]))?;
        let bias = store.register(&format!("{name}.bias"), uniform_fan_in(rng, din, &[dout]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            din,
            dout,
        })
    }

    pub fn without_bias<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), uniform_fan_in(rng, din, &[din, dout]))?;
        Ok(Self {
            weight,
            bias: None,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.din {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                expected: vec![self.din],
                got: tape.value(x).shape().to_vec(),
            });
        }
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers, each followed by its activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        spec: &[(usize, Activation)],
    ) -> Result<Self> {
        if spec.is_empty() {
            return Err(DiffError::EmptySpec);
        }
        let mut layers = Vec::with_capacity(spec.len());
        let mut width = din;
        for (i, &(w, act)) in spec.iter().enumerate() {
            layers.push((Linear::new(store, rng, &format!("{name}.{i}"), width, w)?, act));
            width = w;
        }
        Ok(Self { layers })
    }

    /// Default two-layer MLP: hidden width equals output width, ReLU between.
    pub fn two_layer<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, din, &[(dout, Activation::Relu), (dout, Activation::None)])
    }

    pub fn din(&self) -> usize {
        self.layers[0].0.din
    }

    pub fn dout(&self) -> usize {
        self.layers.last().map_or(0, |l| l.0.dout)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, act) in &self.layers {
            h = layer.forward(tape, store, h)?;
            if *act == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit operating on a batch of rows.
///
/// `h' = (1 - z) * h + z * n`, so a saturated-open update gate yields the
/// candidate state and a closed one keeps the previous hidden state.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub width: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, rng, &format!("{name}.input"), din, 3 * width)?,
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), width, 3 * width)?,
            width,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, x: Var) -> Result<Var> {
        let w = self.width;
        let gi = self.input.forward(tape, store, x)?;
        let gh = self.hidden.forward(tape, store, h)?;
        let gi_rz = tape.slice_cols(gi, 0, 2 * w)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * w)?;
        let rz_pre = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz_pre)?;
        let r = tape.slice_cols(rz, 0, w)?;
        let z = tape.slice_cols(rz, w, w)?;
        let gi_n = tape.slice_cols(gi, 2 * w, w)?;
        let gh_n = tape.slice_cols(gh, 2 * w, w)?;
        let gated = tape.mul(r, gh_n)?;
        let n_pre = tape.add(gi_n, gated)?;
        let n = tape.tanh(n_pre)?;
        let delta = tape.sub(n, h)?;
        let step = tape.mul(z, delta)?;
        tape.add(h, step)
    }
}

/// Same-length 1D convolution over time with a residual skip.
///
/// Sequences are edge-replicated at both ends so the output keeps length
/// `T`. The skip is the identity when `din == dout`, otherwise a bias-free
/// projection. No activation is applied.
#[derive(Clone, Debug)]
pub struct Conv1dResidual {
    pub kernel: usize,
    pub taps: Linear,
    pub skip: Option<Linear>,
    pub din: usize,
    pub dout: usize,
}

impl Conv1dResidual {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(DiffError::InvalidArgument(format!(
                "conv kernel width must be odd, got {kernel}"
            )));
        }
        let taps = Linear::new(store, rng, &format!("{name}.taps"), kernel * din, dout)?;
        let skip = if din == dout {
            None
        } else {
            Some(Linear::without_bias(store, rng, &format!("{name}.skip"), din, dout)?)
        };
        Ok(Self {
            kernel,
            taps,
            skip,
            din,
            dout,
        })
    }

    /// `x` holds `batch` sequences of `seq_len` rows each, stacked.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (rows, cols) = tape.value(x).dims2();
        if rows != batch * seq_len || cols != self.din {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d_residual",
                expected: vec![batch * seq_len, self.din],
                got: vec![rows, cols],
            });
        }
        if seq_len == 0 {
            return Err(DiffError::InvalidArgument("conv1d over empty sequence".into()));
        }
        let half = (self.kernel / 2) as isize;
        let mut shifted = Vec::with_capacity(self.kernel);
        for j in 0..self.kernel as isize {
            let offset = j - half;
            let index: Vec<usize> = (0..batch)
                .flat_map(|b| {
                    (0..seq_len).map(move |t| {
                        let src = (t as isize + offset).clamp(0, seq_len as isize - 1) as usize;
                        b * seq_len + src
                    })
                })
                .collect();
            shifted.push(tape.gather_rows(x, &index)?);
        }
        let window = if shifted.len() == 1 {
            shifted[0]
        } else {
            tape.concat_cols(&shifted)?
        };
        let conv = self.taps.forward(tape, store, window)?;
        let skip = match &self.skip {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        tape.add(conv, skip)
    }
}
