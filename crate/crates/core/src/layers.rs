//! Parameter storage and the recurrent and dense layers built on [`crate::autograd`].

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{AutogradError, Graph, Result, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access to a parameter's values, copying only if a graph still
    /// shares the buffer.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.params[id.0].value).data_mut()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf. Trainable parameters track
    /// gradients when `track` is set.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| g.shared_leaf(Arc::clone(&p.value), track && p.trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams(vars))
    }
}

/// Graph handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl Index<ParamId> for BoundParams {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform Glorot initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `activation(W x + b)`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(output, input, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), true);
        Dense {
            w,
            b,
            input,
            output,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let wx = g.matvec(p[self.w], x)?;
        let z = g.add(wx, p[self.b])?;
        match self.activation {
            Activation::Relu => g.relu(z),
            Activation::Identity => Ok(z),
        }
    }
}

/// One LSTM layer. The four gates are stacked row-wise in the order input,
/// forget, cell candidate, output: `w` is `4h×d`, `u` is `4h×h`, `b` is `4h`.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Output of [`Lstm::encode`].
#[derive(Debug, Clone, Copy)]
pub struct LstmOutput {
    /// `n×h`, zero rows at padded positions.
    pub states: Var,
    /// Hidden state after the last non-pad step.
    pub last: Var,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = Vec::with_capacity(4 * hidden * input);
        let mut u = Vec::with_capacity(4 * hidden * hidden);
        for _ in 0..4 {
            w.extend(glorot_uniform(hidden, input, rng).into_data());
            u.extend(glorot_uniform(hidden, hidden, rng).into_data());
        }
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        Lstm {
            w: store.add(
                format!("{name}.w"),
                Tensor::matrix(4 * hidden, input, w).expect("shape"),
                true,
            ),
            u: store.add(
                format!("{name}.u"),
                Tensor::matrix(4 * hidden, hidden, u).expect("shape"),
                true,
            ),
            b: store.add(format!("{name}.b"), Tensor::vector(b), true),
            input,
            hidden,
        }
    }

    /// One recurrence step; returns `(h_t, c_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        let wx = g.matvec(p[self.w], x)?;
        let uh = g.matvec(p[self.u], h_prev)?;
        let z = g.add(wx, uh)?;
        let z = g.add(z, p[self.b])?;
        let zi = g.slice(z, 0, h)?;
        let zf = g.slice(z, h, h)?;
        let zc = g.slice(z, 2 * h, h)?;
        let zo = g.slice(z, 3 * h, h)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zc)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h_t = g.mul(o, tc)?;
        Ok((h_t, c))
    }

    /// Runs over rows `0..true_length` of `xs` (`n×d`) from a zero state,
    /// backwards when `reverse` is set. Outputs stay at their input positions.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        xs: Var,
        true_length: usize,
        reverse: bool,
    ) -> Result<LstmOutput> {
        let n = g.value(xs).shape()[0];
        if true_length > n {
            return Err(AutogradError::IndexOutOfRange {
                op: "lstm_encode",
                index: true_length,
                size: n,
            });
        }
        let zero = g.constant(Tensor::zeros(&[self.hidden]))?;
        let (mut h, mut c) = (zero, zero);
        let mut rows = vec![None; n];
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..true_length).rev())
        } else {
            Box::new(0..true_length)
        };
        for t in steps {
            let x = g.row(xs, t)?;
            (h, c) = self.step(g, p, x, h, c)?;
            rows[t] = Some(h);
        }
        let states = g.stack_rows(rows, self.hidden)?;
        Ok(LstmOutput { states, last: h })
    }
}

/// A forward and a backward LSTM whose per-step states are concatenated.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `n×2h` matrix whose row `t` is `[forward_t, backward_t]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        xs: Var,
        true_length: usize,
    ) -> Result<Var> {
        let f = self.forward.encode(g, p, xs, true_length, false)?;
        let b = self.backward.encode(g, p, xs, true_length, true)?;
        g.concat_cols(f.states, b.states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_lstm(store: &mut ParamStore, w: [f64; 4], u: [f64; 4], b: [f64; 4]) -> Lstm {
        Lstm {
            w: store.add("w", Tensor::matrix(4, 1, w.to_vec()).unwrap(), true),
            u: store.add("u", Tensor::matrix(4, 1, u.to_vec()).unwrap(), true),
            b: store.add("b", Tensor::vector(b.to_vec()), true),
            input: 1,
            hidden: 1,
        }
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let mut store = ParamStore::new();
        let lstm = scalar_lstm(&mut store, [0.0; 4], [0.0; 4], [0.0; 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::vector(vec![0.7])).unwrap();
        let z = g.constant(Tensor::vector(vec![0.0])).unwrap();
        let (h, c) = lstm.step(&mut g, &p, x, z, z).unwrap();
        assert_eq!(g.value(h).data(), &[0.0]);
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn scalar_step_matches_hand_computation() {
        // Gate order i, f, c, o with x = 0.5, h_prev = -0.3, c_prev = 0.8.
        let (w, u, b) = (
            [0.4, -0.6, 0.9, 0.2],
            [0.3, 0.5, -0.7, 1.1],
            [0.1, 1.0, -0.2, 0.05],
        );
        let (x, hp, cp) = (0.5f64, -0.3f64, 0.8f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let zi = w[0] * x + u[0] * hp + b[0];
        let zf = w[1] * x + u[1] * hp + b[1];
        let zc = w[2] * x + u[2] * hp + b[2];
        let zo = w[3] * x + u[3] * hp + b[3];
        let c_expect = sig(zf) * cp + sig(zi) * zc.tanh();
        let h_expect = sig(zo) * c_expect.tanh();

        let mut store = ParamStore::new();
        let lstm = scalar_lstm(&mut store, w, u, b);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xv = g.constant(Tensor::vector(vec![x])).unwrap();
        let hv = g.constant(Tensor::vector(vec![hp])).unwrap();
        let cv = g.constant(Tensor::vector(vec![cp])).unwrap();
        let (h, c) = lstm.step(&mut g, &p, xv, hv, cv).unwrap();
        assert!((g.value(c).data()[0] - c_expect).abs() < 1e-12);
        assert!((g.value(h).data()[0] - h_expect).abs() < 1e-12);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(
            store.get(lstm.b).value.data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn encode_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 2, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let xs = g.constant(glorot_uniform(4, 2, &mut rng)).unwrap();

        let out = lstm.encode(&mut g, &p, xs, 0, false).unwrap();
        assert!(g.value(out.states).data().iter().all(|v| *v == 0.0));
        assert!(g.value(out.last).data().iter().all(|v| *v == 0.0));

        let f = lstm.encode(&mut g, &p, xs, 1, false).unwrap();
        let r = lstm.encode(&mut g, &p, xs, 1, true).unwrap();
        assert_eq!(g.value(f.states), g.value(r.states));
        assert_eq!(g.value(f.last), g.value(r.last));
    }

    #[test]
    fn dense_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "img", 2048, 128, Activation::Relu, &mut rng);
        assert_eq!(store.get(d.w).value.shape(), &[128, 2048]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::vector(vec![0.01; 2048])).unwrap();
        let y = d.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[128]);

        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "z", 3, 2, Activation::Relu, &mut rng);
        store.values_mut(d.w).fill(0.0);
        store.values_mut(d.b).copy_from_slice(&[-1.0, 2.0]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::vector(vec![5.0, 6.0, 7.0])).unwrap();
        let y = d.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }
}
