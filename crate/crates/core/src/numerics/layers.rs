//! Parameterized building blocks recorded onto a [`Tape`].

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), &[inputs, outputs], inputs, outputs, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Re-binds a layer to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = lookup(store, &format!("{name}.bias"))?;
        let s = store.get(weight).shape();
        Ok(Linear {
            weight,
            bias,
            inputs: s[0],
            outputs: s[1],
        })
    }

    /// Applies to a vector `[in]` giving `[out]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        if n != self.inputs {
            return Err(Error::dim("linear", "input features", self.inputs, n));
        }
        let row = tape.reshape(x, &[1, n])?;
        let w = tape.param(self.weight);
        let y = tape.matmul(row, w)?;
        let b = tape.param(self.bias);
        let y = tape.add_row(y, b)?;
        tape.reshape(y, &[self.outputs])
    }

    /// Applies row-wise to a matrix `[m, in]` giving `[m, out]`.
    pub fn forward_rows(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        let b = tape.param(self.bias);
        tape.add_row(y, b)
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

/// Stack of affine layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width including input and output.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least input and output widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn bind(store: &ParamStore, name: &str, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Linear::bind(store, &format!("{name}.{i}")))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// LSTM cell with a single affine map `A: [h; y] -> 4M`, gate blocks ordered (i, f, o, g).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub affine: Linear,
    pub input_size: usize,
    pub hidden: usize,
}

/// Hidden and cell state of an [`LstmCell`].
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_size: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let affine = Linear::new(store, name, hidden + input_size, 4 * hidden, rng)?;
        // forget-gate bias +1
        let bias = store.get_mut(affine.bias).data_mut();
        bias[hidden..2 * hidden].fill(1.0);
        Ok(LstmCell {
            affine,
            input_size,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, hidden: usize) -> Result<Self> {
        let affine = Linear::bind(store, name)?;
        if affine.outputs != 4 * hidden || affine.inputs < hidden {
            return Err(Error::Checkpoint(format!("{name}: LSTM shape does not match hidden size {hidden}")));
        }
        Ok(LstmCell {
            input_size: affine.inputs - hidden,
            affine,
            hidden,
        })
    }

    /// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
    pub fn step(&self, tape: &mut Tape<'_>, y: Var, state: LstmState) -> Result<LstmState> {
        let m = self.hidden;
        let ly = tape.value(y).len();
        if ly != self.input_size {
            return Err(Error::dim("lstm_step", "input", self.input_size, ly));
        }
        for (what, v) in [("h_prev", state.h), ("c_prev", state.c)] {
            let n = tape.value(v).len();
            if n != m {
                return Err(Error::dim("lstm_step", what, m, n));
            }
        }
        let x = tape.concat(&[state.h, y]);
        let z = self.affine.forward(tape, x)?;
        let zi = tape.slice(z, 0, m)?;
        let zf = tape.slice(z, m, m)?;
        let zo = tape.slice(z, 2 * m, m)?;
        let zg = tape.slice(z, 3 * m, m)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let o = tape.sigmoid(zo);
        let g = tape.tanh(zg);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Additive soft attention over the rows of a matrix:
/// `score_i = v . tanh(W_x x_i + W_q q + b)`, weights = softmax(score).
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub key: Linear,
    pub query: Option<ParamId>,
    pub score: ParamId,
    pub features: usize,
    pub hidden: usize,
}

impl AdditiveAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        query_size: Option<usize>,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let key = Linear::new(store, &format!("{name}.key"), features, hidden, rng)?;
        let query = query_size
            .map(|q| store.add_xavier(format!("{name}.query"), &[q, hidden], q, hidden, rng))
            .transpose()?;
        let score = store.add_xavier(format!("{name}.score"), &[hidden, 1], hidden, 1, rng)?;
        Ok(AdditiveAttention {
            key,
            query,
            score,
            features,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let key = Linear::bind(store, &format!("{name}.key"))?;
        let query = store.id(&format!("{name}.query"));
        let score = lookup(store, &format!("{name}.score"))?;
        Ok(AdditiveAttention {
            features: key.inputs,
            hidden: key.outputs,
            key,
            query,
            score,
        })
    }

    /// Returns `(weights [n], context [features])` for rows `[n, features]`.
    pub fn forward(&self, tape: &mut Tape<'_>, rows: Var, query: Option<Var>) -> Result<(Var, Var)> {
        let s = tape.shape(rows).to_vec();
        if s.len() != 2 || s[1] != self.features {
            return Err(Error::dim("attention", "feature width", self.features, *s.get(1).unwrap_or(&0)));
        }
        let n = s[0];
        let mut pre = self.key.forward_rows(tape, rows)?;
        match (self.query, query) {
            (Some(wq), Some(q)) => {
                let lq = tape.value(q).len();
                let q = tape.reshape(q, &[1, lq])?;
                let wq = tape.param(wq);
                let proj = tape.matmul(q, wq)?;
                pre = tape.add_row(pre, proj)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::InvalidArgument("attention expects a query vector".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("attention has no query projection".into())),
        }
        let act = tape.tanh(pre);
        let v = tape.param(self.score);
        let scores = tape.matmul(act, v)?;
        let scores = tape.reshape(scores, &[n])?;
        let weights = tape.softmax(scores)?;
        let context = weighted_sum(tape, weights, rows)?;
        Ok((weights, context))
    }
}

/// `sum_i w_i x_i` for weights `[n]` and rows `[n, d]`.
pub fn weighted_sum(tape: &mut Tape<'_>, weights: Var, rows: Var) -> Result<Var> {
    let n = tape.value(weights).len();
    let d = tape.shape(rows)[1];
    let w = tape.reshape(weights, &[1, n])?;
    let y = tape.matmul(w, rows)?;
    tape.reshape(y, &[d])
}

/// Convolution layer: kernel `[F, C, kh, kw]`, bias `[F]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let area = kernel.0 * kernel.1;
        let k = store.add_xavier(
            format!("{name}.kernel"),
            &[filters, in_channels, kernel.0, kernel.1],
            in_channels * area,
            filters * area,
            rng,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[filters]))?;
        Ok(Conv2d {
            kernel: k,
            bias,
            stride,
            padding,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        Ok(Conv2d {
            kernel: lookup(store, &format!("{name}.kernel"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

/// Inverted dropout; identity when `rng` is `None` (inference) or `rate == 0`.
pub fn dropout<R: Rng>(tape: &mut Tape<'_>, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let n = tape.value(x).len();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}
