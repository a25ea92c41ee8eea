//! Dense, MLP and LSTM building blocks over a flat parameter vector.
//!
//! Each block owns a contiguous span of the parameter vector: weights row-major
//! (`n_out × n_in`) followed by biases. Backward passes accumulate into a gradient vector
//! with the same layout.

use rand::Rng;

use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DenseSpec {
    pub off: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseSpec {
    pub fn len(&self) -> usize {
        self.n_out * self.n_in + self.n_out
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<S> {
        let block = &params[self.range()];
        let (w, b) = block.split_at(self.n_out * self.n_in);
        (0..self.n_out)
            .map(|o| {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                row.iter().zip(x).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect()
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and, when given, `dx += Wᵀ dy`.
    pub fn backward<S: Scalar>(&self, params: &[S], grad: &mut [S], x: &[S], dy: &[S], dx: Option<&mut [S]>) {
        let nw = self.n_out * self.n_in;
        {
            let (gw, gb) = grad[self.range()].split_at_mut(nw);
            for o in 0..self.n_out {
                let d = dy[o];
                if d == S::zero() {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * self.n_in..(o + 1) * self.n_in];
                for (g, &xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.off..self.off + nw];
            for o in 0..self.n_out {
                let d = dy[o];
                if d == S::zero() {
                    continue;
                }
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (dxi, &wi) in dx.iter_mut().zip(row) {
                    *dxi += d * wi;
                }
            }
        }
    }

    pub fn init<S: Scalar>(&self, params: &mut [S], rng: &mut impl Rng) {
        uniform_fill(&mut params[self.range()], self.n_in, rng);
    }
}

/// Fills `out` uniformly in `[-1/√fan_in, 1/√fan_in]`.
pub(crate) fn uniform_fill<S: Scalar>(out: &mut [S], fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in out {
        *v = S::lit(rng.random_range(-bound..=bound));
    }
}

/// Feed-forward net: tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MlpSpec {
    pub layers: Vec<DenseSpec>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache<S> {
    /// Input to each layer; `inputs[0]` is the MLP input.
    pub inputs: Vec<Vec<S>>,
    pub output: Vec<S>,
}

impl MlpSpec {
    /// Allocates consecutive dense layers starting at `*off`.
    pub fn new(off: &mut usize, n_in: usize, hidden: &[usize], n_out: usize) -> Self {
        let mut dims = vec![n_in];
        dims.extend_from_slice(hidden);
        dims.push(n_out);
        let layers = dims
            .windows(2)
            .map(|w| {
                let spec = DenseSpec {
                    off: *off,
                    n_in: w[0],
                    n_out: w[1],
                };
                *off += spec.len();
                spec
            })
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &[S]) -> MlpCache<S> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(params, &cur);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut cur, y));
        }
        MlpCache { inputs, output: cur }
    }

    pub fn backward<S: Scalar>(&self, params: &[S], grad: &mut [S], cache: &MlpCache<S>, dy: &[S], mut dx: Option<&mut [S]>) {
        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            if i == 0 {
                layer.backward(params, grad, x, &delta, dx.take());
                break;
            }
            let mut dprev = vec![S::zero(); layer.n_in];
            layer.backward(params, grad, x, &delta, Some(&mut dprev));
            // x is the tanh output of the previous layer.
            for (d, &a) in dprev.iter_mut().zip(x) {
                *d *= S::one() - a * a;
            }
            delta = dprev;
        }
    }

    pub fn init<S: Scalar>(&self, params: &mut [S], rng: &mut impl Rng) {
        for layer in &self.layers {
            layer.init(params, rng);
        }
    }
}

/// One LSTM layer: `[Wx | Wh | b]` with gate blocks ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LstmSpec {
    pub off: usize,
    pub n_in: usize,
    pub n_h: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LstmStep<S> {
    pub x: Vec<S>,
    pub h_prev: Vec<S>,
    pub c_prev: Vec<S>,
    pub i: Vec<S>,
    pub f: Vec<S>,
    pub g: Vec<S>,
    pub o: Vec<S>,
    pub tanh_c: Vec<S>,
    pub c: Vec<S>,
    pub h: Vec<S>,
}

impl LstmSpec {
    fn wx_len(&self) -> usize {
        4 * self.n_h * self.n_in
    }

    fn wh_len(&self) -> usize {
        4 * self.n_h * self.n_h
    }

    pub fn len(&self) -> usize {
        self.wx_len() + self.wh_len() + 4 * self.n_h
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }

    pub fn step<S: Scalar>(&self, params: &[S], x: &[S], h_prev: &[S], c_prev: &[S]) -> LstmStep<S> {
        let h = self.n_h;
        let block = &params[self.range()];
        let (wx, rest) = block.split_at(self.wx_len());
        let (wh, b) = rest.split_at(self.wh_len());
        let mut pre = b.to_vec();
        for (r, p) in pre.iter_mut().enumerate() {
            let rx = &wx[r * self.n_in..(r + 1) * self.n_in];
            let rh = &wh[r * h..(r + 1) * h];
            *p += rx.iter().zip(x).map(|(&w, &v)| w * v).sum::<S>()
                + rh.iter().zip(h_prev).map(|(&w, &v)| w * v).sum::<S>();
        }
        let i: Vec<S> = pre[..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<S> = pre[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<S> = pre[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
        let o: Vec<S> = pre[3 * h..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<S> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
        let hv: Vec<S> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        LstmStep {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
            c,
            h: hv,
        }
    }

    /// Backpropagation through time over a whole sequence.
    ///
    /// `dh_ext[t]` is the loss gradient w.r.t. `h_t` from outside the recurrence. Returns the
    /// gradient w.r.t. each step's input.
    pub fn backward_sequence<S: Scalar>(
        &self,
        params: &[S],
        grad: &mut [S],
        steps: &[LstmStep<S>],
        dh_ext: &[Vec<S>],
    ) -> Vec<Vec<S>> {
        let h = self.n_h;
        let n_in = self.n_in;
        let (wx_len, wh_len) = (self.wx_len(), self.wh_len());
        let block = &params[self.range()];
        let (wx, rest) = block.split_at(wx_len);
        let wh = &rest[..wh_len];
        let gblock = &mut grad[self.range()];
        let (gwx, grest) = gblock.split_at_mut(wx_len);
        let (gwh, gb) = grest.split_at_mut(wh_len);

        let mut dx_all = vec![vec![S::zero(); n_in]; steps.len()];
        let mut dh_next = vec![S::zero(); h];
        let mut dc_next = vec![S::zero(); h];
        let mut dpre = vec![S::zero(); 4 * h];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            for k in 0..h {
                let dh = dh_ext[t][k] + dh_next[k];
                let dc = dc_next[k] + dh * s.o[k] * (S::one() - s.tanh_c[k] * s.tanh_c[k]);
                dpre[k] = dc * s.g[k] * s.i[k] * (S::one() - s.i[k]);
                dpre[h + k] = dc * s.c_prev[k] * s.f[k] * (S::one() - s.f[k]);
                dpre[2 * h + k] = dc * s.i[k] * (S::one() - s.g[k] * s.g[k]);
                dpre[3 * h + k] = dh * s.tanh_c[k] * s.o[k] * (S::one() - s.o[k]);
                dc_next[k] = dc * s.f[k];
            }
            dh_next.iter_mut().for_each(|v| *v = S::zero());
            let dx = &mut dx_all[t];
            for r in 0..4 * h {
                let d = dpre[r];
                if d == S::zero() {
                    continue;
                }
                gb[r] += d;
                let rx = r * n_in;
                for j in 0..n_in {
                    gwx[rx + j] += d * s.x[j];
                    dx[j] += d * wx[rx + j];
                }
                let rh = r * h;
                for j in 0..h {
                    gwh[rh + j] += d * s.h_prev[j];
                    dh_next[j] += d * wh[rh + j];
                }
            }
        }
        dx_all
    }

    pub fn init<S: Scalar>(&self, params: &mut [S], rng: &mut impl Rng) {
        let block = &mut params[self.range()];
        let (wx, rest) = block.split_at_mut(self.wx_len());
        let (wh, b) = rest.split_at_mut(self.wh_len());
        uniform_fill(wx, self.n_in, rng);
        uniform_fill(wh, self.n_h, rng);
        uniform_fill(b, self.n_h, rng);
    }
}
