use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

type Mat = DMatrix<f64>;

/// Where a forward pass reads its weights from and whether their gradients
/// are wanted.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Bind {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Bind {
            store,
            trainable: false,
        }
    }

    pub fn read(&self, tape: &mut Tape, id: usize) -> Var {
        if self.trainable {
            tape.param(self.store, id)
        } else {
            tape.frozen(self.store, id)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Dense {
        Dense {
            weight: store.insert_glorot(&format!("{prefix}.weight"), in_dim, out_dim, rng),
            bias: store.insert_zeros(&format!("{prefix}.bias"), 1, out_dim),
            in_dim,
            out_dim,
        }
    }

    /// `x W + b` for an `N x in` input.
    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var) -> Var {
        let w = bind.read(tape, self.weight);
        let b = bind.read(tape, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Layer widths and activations of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> MlpSpec {
        MlpSpec {
            dims,
            hidden: Activation::Tanh,
            output: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Invalid(format!("bad layer widths {:?}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut impl Rng,
    ) -> Result<Mlp> {
        spec.validate()?;
        let layers = spec
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.dims.last().expect("validated")
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var) -> Result<Var> {
        let cols = tape.value(x).ncols();
        if cols != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {cols}",
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h);
            let act = if i == last {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    /// Forward pass on plain values (no gradients kept).
    pub fn eval(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, Bind::frozen(store), xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Gated recurrent unit:
/// `z = s(x Wz + h Uz + bz)`, `r = s(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r * h) Un + bn)`, `h' = (1 - z) * n + z * h`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: usize,
    pub recurrent_zr: usize,
    pub recurrent_n: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Gru {
        Gru {
            input: store.insert_glorot(&format!("{prefix}.w_input"), in_dim, 3 * hidden, rng),
            recurrent_zr: store.insert_glorot(
                &format!("{prefix}.w_gates"),
                hidden,
                2 * hidden,
                rng,
            ),
            recurrent_n: store.insert_glorot(&format!("{prefix}.w_candidate"), hidden, hidden, rng),
            bias: store.insert_zeros(&format!("{prefix}.bias"), 1, 3 * hidden),
            in_dim,
            hidden,
        }
    }

    /// Hidden states for every row of the `H x in` input, starting from a zero
    /// state. With `reverse` the sequence is consumed last-to-first; the
    /// output rows stay in the input's frame order.
    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var, reverse: bool) -> Result<Var> {
        self.forward_batch(tape, bind, x, 1, reverse)
    }

    /// Batched variant over `batch` equal-length sequences stored frame-major:
    /// row `h * batch + b` holds frame `h` of sequence `b`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bind: Bind,
        x: Var,
        batch: usize,
        reverse: bool,
    ) -> Result<Var> {
        let (rows, cols) = tape.value(x).shape();
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into {batch} sequences"
            )));
        }
        let frames = rows / batch;
        if frames == 0 {
            return Err(Error::Shape(
                "recurrent encoder needs a nonempty sequence".into(),
            ));
        }
        if cols != self.in_dim {
            return Err(Error::Shape(format!(
                "recurrent encoder expects {} inputs, got {cols}",
                self.in_dim
            )));
        }
        let k = self.hidden;
        let w = bind.read(tape, self.input);
        let b = bind.read(tape, self.bias);
        let uzr = bind.read(tape, self.recurrent_zr);
        let un = bind.read(tape, self.recurrent_n);
        let xw = tape.matmul(x, w);
        let xw = tape.add_row(xw, b);

        let mut h = tape.constant(Mat::zeros(batch, k));
        let mut states = vec![h; frames];
        let order: Vec<usize> = if reverse {
            (0..frames).rev().collect()
        } else {
            (0..frames).collect()
        };
        for idx in order {
            let xr = tape.slice_rows(xw, idx * batch, batch);
            let xz = tape.slice_cols(xr, 0, k);
            let xg = tape.slice_cols(xr, k, k);
            let xn = tape.slice_cols(xr, 2 * k, k);
            let hzr = tape.matmul(h, uzr);
            let hz = tape.slice_cols(hzr, 0, k);
            let hg = tape.slice_cols(hzr, k, k);
            let zs = tape.add(xz, hz);
            let z = tape.sigmoid(zs);
            let rs = tape.add(xg, hg);
            let r = tape.sigmoid(rs);
            let rh = tape.mul(r, h);
            let rhu = tape.matmul(rh, un);
            let ns = tape.add(xn, rhu);
            let n = tape.tanh(ns);
            let diff = tape.sub(h, n);
            let zd = tape.mul(z, diff);
            h = tape.add(n, zd);
            states[idx] = h;
        }
        Ok(tape.concat_rows(&states))
    }
}

/// Forward and backward GRUs with concatenated outputs.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> BiGru {
        BiGru {
            fwd: Gru::new(store, &format!("{prefix}.fwd"), in_dim, hidden, rng),
            bwd: Gru::new(store, &format!("{prefix}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var) -> Result<Var> {
        self.forward_batch(tape, bind, x, 1)
    }

    pub fn forward_batch(&self, tape: &mut Tape, bind: Bind, x: Var, batch: usize) -> Result<Var> {
        let f = self.fwd.forward_batch(tape, bind, x, batch, false)?;
        let b = self.bwd.forward_batch(tape, bind, x, batch, true)?;
        Ok(tape.concat_cols(&[f, b]))
    }
}

/// Unidirectional or bidirectional recurrent encoder.
#[derive(Clone, Debug)]
pub enum SeqEncoder {
    Forward(Gru),
    Bidirectional(BiGru),
}

impl SeqEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        if bidirectional {
            SeqEncoder::Bidirectional(BiGru::new(store, prefix, in_dim, hidden, rng))
        } else {
            SeqEncoder::Forward(Gru::new(store, prefix, in_dim, hidden, rng))
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SeqEncoder::Forward(g) => g.hidden,
            SeqEncoder::Bidirectional(b) => b.out_dim(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var) -> Result<Var> {
        self.forward_batch(tape, bind, x, 1)
    }

    pub fn forward_batch(&self, tape: &mut Tape, bind: Bind, x: Var, batch: usize) -> Result<Var> {
        match self {
            SeqEncoder::Forward(g) => g.forward_batch(tape, bind, x, batch, false),
            SeqEncoder::Bidirectional(b) => b.forward_batch(tape, bind, x, batch),
        }
    }
}

/// Hidden states of `encoder` for a plain input sequence.
pub fn seq_encode(encoder: &SeqEncoder, store: &ParamStore, seq: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let h = encoder.forward(&mut tape, Bind::frozen(store), x)?;
    Ok(tape.value(h).clone())
}
