//! Single-step recurrent cells and their local backward passes.

use super::spec::{LstmLayerParams, RnnLayerParams};
use super::tensor::sigmoid;
use super::NeuralError;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(h: usize) -> Self {
        Self {
            a: vec![0.0; h],
            c: vec![0.0; h],
        }
    }
}

fn concat(a_prev: &[f64], x: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a_prev.len() + x.len());
    v.extend_from_slice(a_prev);
    v.extend_from_slice(x);
    v
}

fn check(rows: usize, cols: usize, h: usize, a_prev: usize, x: usize) -> Result<(), NeuralError> {
    if rows != h || a_prev != h || cols != h + x {
        return Err(NeuralError::ShapeMismatch(format!(
            "cell weights are {rows}x{cols} but got a_prev of {a_prev} and x of {x}"
        )));
    }
    Ok(())
}

/// `a = tanh(W·[a_prev; x] + b)`
pub fn rnn_cell_forward(p: &RnnLayerParams, x: &[f64], a_prev: &[f64]) -> Result<Vec<f64>, NeuralError> {
    check(p.w.rows, p.w.cols, p.b.len(), a_prev.len(), x.len())?;
    Ok(RnnStep::forward(p, concat(a_prev, x)).a)
}

pub fn lstm_cell_forward(p: &LstmLayerParams, x: &[f64], prev: &LstmState) -> Result<LstmState, NeuralError> {
    check(p.w_c.rows, p.w_c.cols, p.b_c.len(), prev.a.len(), x.len())?;
    if prev.c.len() != prev.a.len() {
        return Err(NeuralError::ShapeMismatch("state a and c differ in length".into()));
    }
    let step = LstmStep::forward(p, concat(&prev.a, x), &prev.c);
    Ok(LstmState { a: step.a, c: step.c })
}

/// Everything one RNN step needs for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RnnStep {
    /// `[a_prev; x]`
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

impl RnnStep {
    pub fn forward(p: &RnnLayerParams, v: Vec<f64>) -> Self {
        let mut a = vec![0.0; p.b.len()];
        p.w.affine(&v, &p.b, &mut a);
        a.iter_mut().for_each(|z| *z = z.tanh());
        Self { v, a }
    }

    /// Accumulates parameter gradients for upstream gradient `da` and returns
    /// the gradient with respect to `[a_prev; x]`.
    pub fn backward(&self, p: &RnnLayerParams, g: &mut RnnLayerParams, da: &[f64]) -> Vec<f64> {
        let dz: Vec<f64> = da.iter().zip(&self.a).map(|(d, a)| d * (1.0 - a * a)).collect();
        g.w.outer_acc(&dz, &self.v);
        g.b.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
        let mut dv = vec![0.0; self.v.len()];
        p.w.transpose_mul_acc(&dz, &mut dv);
        dv
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LstmStep {
    pub v: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub a: Vec<f64>,
}

impl LstmStep {
    pub fn forward(p: &LstmLayerParams, v: Vec<f64>, c_prev: &[f64]) -> Self {
        let h = p.b_c.len();
        let gate = |w: &super::tensor::Matrix, b: &[f64], act: fn(f64) -> f64| {
            let mut z = vec![0.0; h];
            w.affine(&v, b, &mut z);
            z.iter_mut().for_each(|x| *x = act(*x));
            z
        };
        let c_tilde = gate(&p.w_c, &p.b_c, f64::tanh);
        let u = gate(&p.w_u, &p.b_u, sigmoid);
        let f = gate(&p.w_f, &p.b_f, sigmoid);
        let o = gate(&p.w_o, &p.b_o, sigmoid);
        let c: Vec<f64> = (0..h).map(|i| u[i] * c_tilde[i] + f[i] * c_prev[i]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
        let a = (0..h).map(|i| o[i] * tanh_c[i]).collect();
        Self {
            v,
            c_tilde,
            u,
            f,
            o,
            c_prev: c_prev.to_vec(),
            c,
            tanh_c,
            a,
        }
    }

    /// Given gradients on this step's `a` and `c`, accumulates parameter
    /// gradients and returns (d[a_prev; x], dc_prev).
    pub fn backward(&self, p: &LstmLayerParams, g: &mut LstmLayerParams, da: &[f64], dc_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.a.len();
        let mut dz_c = vec![0.0; h];
        let mut dz_u = vec![0.0; h];
        let mut dz_f = vec![0.0; h];
        let mut dz_o = vec![0.0; h];
        let mut dc_prev = vec![0.0; h];
        for i in 0..h {
            let dc = dc_next[i] + da[i] * self.o[i] * (1.0 - self.tanh_c[i] * self.tanh_c[i]);
            dz_o[i] = da[i] * self.tanh_c[i] * self.o[i] * (1.0 - self.o[i]);
            dz_c[i] = dc * self.u[i] * (1.0 - self.c_tilde[i] * self.c_tilde[i]);
            dz_u[i] = dc * self.c_tilde[i] * self.u[i] * (1.0 - self.u[i]);
            dz_f[i] = dc * self.c_prev[i] * self.f[i] * (1.0 - self.f[i]);
            dc_prev[i] = dc * self.f[i];
        }
        let mut dv = vec![0.0; self.v.len()];
        for (w, gw, gb, dz) in [
            (&p.w_c, &mut g.w_c, &mut g.b_c, &dz_c),
            (&p.w_u, &mut g.w_u, &mut g.b_u, &dz_u),
            (&p.w_f, &mut g.w_f, &mut g.b_f, &dz_f),
            (&p.w_o, &mut g.w_o, &mut g.b_o, &dz_o),
        ] {
            gw.outer_acc(dz, &self.v);
            gb.iter_mut().zip(dz).for_each(|(b, d)| *b += d);
            w.transpose_mul_acc(dz, &mut dv);
        }
        (dv, dc_prev)
    }
}
