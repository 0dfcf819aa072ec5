use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::params::{named, NamedTensor, ParamSet};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{affine_backward, axpy, matvec_backward, matvec_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// GRU weights with gates stacked `[z, r, h]`: `w` is `3H × D`, `u` is `3H × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: Matrix::uniform(3 * hidden, inputs, 1.0 / (inputs as f64).sqrt(), rng),
            u: Matrix::uniform(3 * hidden, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            b: vec![T::zero(); 3 * hidden],
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(3 * hidden, inputs),
            u: Matrix::zeros(3 * hidden, hidden),
            b: vec![T::zero(); 3 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let h = self.hidden();
        if self.u.rows() != 3 * h || self.w.rows() != 3 * h || self.b.len() != 3 * h {
            return Err(LayerError::Shape(format!(
                "GRU shapes W {:?}, U {:?}, b {} inconsistent with H = {h}",
                self.w.shape(),
                self.u.shape(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for GruParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        vec![
            named("w", &[self.w.rows(), self.w.cols()], self.w.as_slice()),
            named("u", &[self.u.rows(), self.u.cols()], self.u.as_slice()),
            named("b", &[self.b.len()], &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w.as_mut_slice(), self.u.as_mut_slice(), &mut self.b]
    }
}

/// Intermediate values of one step, enough to backpropagate it.
#[derive(Clone, Debug)]
pub struct GruStepCache<T> {
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub cand: Vec<T>,
    pub uh: Vec<T>,
}

/// One recurrence step from pre-gates `a` (length 3H). Writes `h_next`.
#[inline]
pub fn gru_step<T: Scalar>(a: &[T], h_prev: &[T], u: &Matrix<T>, h_next: &mut [T]) -> GruStepCache<T> {
    let h = h_prev.len();
    let mut uh = vec![T::zero(); 3 * h];
    matvec_into(u, h_prev, &mut uh);
    let mut z = vec![T::zero(); h];
    let mut r = vec![T::zero(); h];
    let mut cand = vec![T::zero(); h];
    for i in 0..h {
        z[i] = sigmoid(a[i] + uh[i]);
        r[i] = sigmoid(a[h + i] + uh[h + i]);
        cand[i] = (a[2 * h + i] + r[i] * uh[2 * h + i]).tanh();
        h_next[i] = z[i] * h_prev[i] + (T::one() - z[i]) * cand[i];
    }
    GruStepCache { z, r, cand, uh }
}

/// Backward of [`gru_step`]. Accumulates into `du`, returns `(d a, d h_prev)`.
pub fn gru_step_backward<T: Scalar>(
    dh: &[T],
    h_prev: &[T],
    u: &Matrix<T>,
    cache: &GruStepCache<T>,
    du: &mut Matrix<T>,
) -> (Vec<T>, Vec<T>) {
    let h = h_prev.len();
    let one = T::one();
    let mut da = vec![T::zero(); 3 * h];
    let mut duh = vec![T::zero(); 3 * h];
    let mut dh_prev = vec![T::zero(); h];
    for i in 0..h {
        let (z, r, c) = (cache.z[i], cache.r[i], cache.cand[i]);
        let dz = dh[i] * (h_prev[i] - c);
        let dah = dh[i] * (one - z) * (one - c * c);
        let dr = dah * cache.uh[2 * h + i];
        da[i] = dz * z * (one - z);
        da[h + i] = dr * r * (one - r);
        da[2 * h + i] = dah;
        duh[i] = da[i];
        duh[h + i] = da[h + i];
        duh[2 * h + i] = dah * r;
        dh_prev[i] = dh[i] * z;
    }
    matvec_backward(u, h_prev, &duh, du, Some(&mut dh_prev));
    (da, dh_prev)
}

#[derive(Clone, Debug)]
pub struct RecurrenceCache<T> {
    direction: Direction,
    h0: Vec<T>,
    hs: Matrix<T>,
    steps: Vec<GruStepCache<T>>,
}

impl<T: Scalar> RecurrenceCache<T> {
    /// State after the last processed step (`h0` when empty).
    pub fn final_state(&self) -> Vec<T> {
        if self.hs.rows() == 0 {
            return self.h0.clone();
        }
        let last = match self.direction {
            Direction::Forward => self.hs.rows() - 1,
            Direction::Backward => 0,
        };
        self.hs.row(last).to_vec()
    }

    fn prev_state(&self, t: usize) -> &[T] {
        let n = self.hs.rows();
        match self.direction {
            Direction::Forward if t == 0 => &self.h0,
            Direction::Forward => self.hs.row(t - 1),
            Direction::Backward if t + 1 == n => &self.h0,
            Direction::Backward => self.hs.row(t + 1),
        }
    }
}

/// Runs the recurrence over pre-gates `a` (`T × 3H`); hidden states are
/// returned at their own time indices in either direction.
pub fn gru_recurrence<T: Scalar>(
    a: &Matrix<T>,
    u: &Matrix<T>,
    direction: Direction,
    h0: &[T],
) -> (Matrix<T>, RecurrenceCache<T>) {
    let h = u.cols();
    let n = a.rows();
    let mut hs = Matrix::zeros(n, h);
    let mut steps = Vec::with_capacity(n);
    let mut prev = h0.to_vec();
    let order: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Forward => Box::new(0..n),
        Direction::Backward => Box::new((0..n).rev()),
    };
    let mut steps_rev = Vec::with_capacity(n);
    for t in order {
        let c = gru_step(a.row(t), &prev, u, hs.row_mut(t));
        prev.copy_from_slice(hs.row(t));
        steps_rev.push(c);
    }
    if direction == Direction::Backward {
        steps_rev.reverse();
    }
    steps.extend(steps_rev);
    let cache = RecurrenceCache {
        direction,
        h0: h0.to_vec(),
        hs: hs.clone(),
        steps,
    };
    (hs, cache)
}

/// Backpropagation through time. Returns `(dA, dU, dh0)`.
pub fn gru_recurrence_backward<T: Scalar>(
    grad_hs: &Matrix<T>,
    u: &Matrix<T>,
    cache: &RecurrenceCache<T>,
) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let n = cache.hs.rows();
    let h = u.cols();
    let mut da = Matrix::zeros(n, 3 * h);
    let mut du = Matrix::zeros(u.rows(), u.cols());
    let mut carry = vec![T::zero(); h];
    let order: Box<dyn Iterator<Item = usize>> = match cache.direction {
        Direction::Forward => Box::new((0..n).rev()),
        Direction::Backward => Box::new(0..n),
    };
    for t in order {
        let mut dh = grad_hs.row(t).to_vec();
        axpy(T::one(), &carry, &mut dh);
        let (dat, dprev) = gru_step_backward(&dh, cache.prev_state(t), u, &cache.steps[t], &mut du);
        da.row_mut(t).copy_from_slice(&dat);
        carry = dprev;
    }
    (da, du, carry)
}

/// Full layer: input affine computed once, then the recurrence.
pub fn gru_layer<T: Scalar>(
    x: &Matrix<T>,
    params: &GruParams<T>,
    direction: Direction,
    h0: &[T],
) -> (Matrix<T>, RecurrenceCache<T>) {
    let a = x.affine(&params.w, &params.b);
    gru_recurrence(&a, &params.u, direction, h0)
}

/// Returns `(dX, dParams, dh0)`.
pub fn gru_layer_backward<T: Scalar>(
    x: &Matrix<T>,
    params: &GruParams<T>,
    cache: &RecurrenceCache<T>,
    grad_hs: &Matrix<T>,
) -> (Matrix<T>, GruParams<T>, Vec<T>) {
    let (da, du, dh0) = gru_recurrence_backward(grad_hs, &params.u, cache);
    let mut g = GruParams::zeros(params.inputs(), params.hidden());
    g.u = du;
    let dx = affine_backward(x, &params.w, &da, &mut g.w, &mut g.b);
    (dx, g, dh0)
}

#[derive(Clone, Debug)]
pub struct BgruCache<T> {
    fwd: RecurrenceCache<T>,
    bwd: RecurrenceCache<T>,
}

/// Full-utterance bidirectional layer, output `[h_fwd | h_bwd]`.
pub fn bgru<T: Scalar>(x: &Matrix<T>, fwd: &GruParams<T>, bwd: &GruParams<T>) -> (Matrix<T>, BgruCache<T>) {
    let (hf, cf) = gru_layer(x, fwd, Direction::Forward, &vec![T::zero(); fwd.hidden()]);
    let (hb, cb) = gru_layer(x, bwd, Direction::Backward, &vec![T::zero(); bwd.hidden()]);
    (Matrix::hcat(&hf, &hb), BgruCache { fwd: cf, bwd: cb })
}

/// Returns `(dX, dFwd, dBwd)`.
pub fn bgru_backward<T: Scalar>(
    x: &Matrix<T>,
    fwd: &GruParams<T>,
    bwd: &GruParams<T>,
    cache: &BgruCache<T>,
    grad_out: &Matrix<T>,
) -> (Matrix<T>, GruParams<T>, GruParams<T>) {
    let (gf, gb) = grad_out.hsplit(fwd.hidden());
    let (mut dx, df, _) = gru_layer_backward(x, fwd, &cache.fwd, &gf);
    let (dxb, db, _) = gru_layer_backward(x, bwd, &cache.bwd, &gb);
    dx.add_assign(&dxb);
    (dx, df, db)
}

/// Chunk context `c_W` and step `c_S`, both in timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcBgruConfig {
    pub context: usize,
    pub step: usize,
}

impl LcBgruConfig {
    pub fn new(context: usize, step: usize) -> Result<Self, LayerError> {
        let c = Self { context, step };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        if self.step == 0 || self.step > self.context {
            return Err(LayerError::InvalidConfig(format!(
                "need 1 <= c_S <= c_W, got c_W = {}, c_S = {}",
                self.context, self.step
            )));
        }
        Ok(())
    }

    /// Nominal lookahead `c_W − c_S`.
    pub fn lookahead(&self) -> usize {
        self.context - self.step
    }

    /// Lookahead of the first frame of a chunk, `c_W − 1`.
    pub fn worst_lookahead(&self) -> usize {
        self.context - 1
    }
}

/// Chunk start indices `0, c_S, 2c_S, …` below `frames`.
pub fn chunk_starts(frames: usize, cfg: &LcBgruConfig) -> Vec<usize> {
    (0..frames).step_by(cfg.step.max(1)).collect()
}

#[derive(Clone, Debug)]
pub struct ChunkedCache<T> {
    fwd: RecurrenceCache<T>,
    chunks: Vec<(usize, usize, RecurrenceCache<T>)>,
}

fn rows_of<T: Scalar>(m: &Matrix<T>, start: usize, end: usize) -> Matrix<T> {
    Matrix::from_vec(end - start, m.cols(), m.as_slice()[start * m.cols()..end * m.cols()].to_vec())
}

/// Forward recurrence over all of `a_f`; the backward recurrence restarts
/// from zero at each chunk start, spans `min(c_W, remaining)` frames and
/// emits its first `c_S` states.
pub fn chunked_bidirectional<T: Scalar>(
    a_f: &Matrix<T>,
    a_b: &Matrix<T>,
    u_f: &Matrix<T>,
    u_b: &Matrix<T>,
    cfg: &LcBgruConfig,
) -> (Matrix<T>, ChunkedCache<T>) {
    let n = a_f.rows();
    let hf_dim = u_f.cols();
    let hb_dim = u_b.cols();
    let (hf, cf) = gru_recurrence(a_f, u_f, Direction::Forward, &vec![T::zero(); hf_dim]);
    let mut hb = Matrix::zeros(n, hb_dim);
    let mut chunks = Vec::new();
    for s in chunk_starts(n, cfg) {
        let e = (s + cfg.context).min(n);
        let (h, c) = gru_recurrence(&rows_of(a_b, s, e), u_b, Direction::Backward, &vec![T::zero(); hb_dim]);
        for k in 0..cfg.step.min(e - s) {
            hb.row_mut(s + k).copy_from_slice(h.row(k));
        }
        chunks.push((s, e, c));
    }
    (Matrix::hcat(&hf, &hb), ChunkedCache { fwd: cf, chunks })
}

/// Returns `(dA_f, dA_b, dU_f, dU_b)`.
pub fn chunked_bidirectional_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    u_f: &Matrix<T>,
    u_b: &Matrix<T>,
    cfg: &LcBgruConfig,
    cache: &ChunkedCache<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
    let (gf, gb) = grad_out.hsplit(u_f.cols());
    let (da_f, du_f, _) = gru_recurrence_backward(&gf, u_f, &cache.fwd);
    let mut da_b = Matrix::zeros(grad_out.rows(), u_b.rows());
    let mut du_b = Matrix::zeros(u_b.rows(), u_b.cols());
    for (s, e, c) in &cache.chunks {
        let mut g = Matrix::zeros(e - s, u_b.cols());
        for k in 0..cfg.step.min(e - s) {
            g.row_mut(k).copy_from_slice(gb.row(s + k));
        }
        let (da, du, _) = gru_recurrence_backward(&g, u_b, c);
        for k in 0..e - s {
            axpy(T::one(), da.row(k), da_b.row_mut(s + k));
        }
        du_b.add_assign(&du);
    }
    (da_f, da_b, du_f, du_b)
}

/// Latency-controlled BGRU: one input affine feeds both directions, each
/// with its own recurrent matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LcBgruParams<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
    pub u_f: Matrix<T>,
    pub u_b: Matrix<T>,
}

impl<T: Scalar> LcBgruParams<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        Self {
            w: Matrix::uniform(3 * hidden, inputs, 1.0 / (inputs as f64).sqrt(), rng),
            b: vec![T::zero(); 3 * hidden],
            u_f: Matrix::uniform(3 * hidden, hidden, s, rng),
            u_b: Matrix::uniform(3 * hidden, hidden, s, rng),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(3 * hidden, inputs),
            b: vec![T::zero(); 3 * hidden],
            u_f: Matrix::zeros(3 * hidden, hidden),
            u_b: Matrix::zeros(3 * hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_f.cols()
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }
}

impl<T: Scalar> ParamSet<T> for LcBgruParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        vec![
            named("w", &[self.w.rows(), self.w.cols()], self.w.as_slice()),
            named("b", &[self.b.len()], &self.b),
            named("u_f", &[self.u_f.rows(), self.u_f.cols()], self.u_f.as_slice()),
            named("u_b", &[self.u_b.rows(), self.u_b.cols()], self.u_b.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w.as_mut_slice(), &mut self.b, self.u_f.as_mut_slice(), self.u_b.as_mut_slice()]
    }
}

#[derive(Clone, Debug)]
pub struct LcBgruCache<T> {
    inner: ChunkedCache<T>,
}

pub fn lc_bgru<T: Scalar>(
    x: &Matrix<T>,
    params: &LcBgruParams<T>,
    cfg: &LcBgruConfig,
) -> (Matrix<T>, LcBgruCache<T>) {
    let a = x.affine(&params.w, &params.b);
    let (y, inner) = chunked_bidirectional(&a, &a, &params.u_f, &params.u_b, cfg);
    (y, LcBgruCache { inner })
}

/// Returns `(dX, dParams)`.
pub fn lc_bgru_backward<T: Scalar>(
    x: &Matrix<T>,
    params: &LcBgruParams<T>,
    cfg: &LcBgruConfig,
    cache: &LcBgruCache<T>,
    grad_out: &Matrix<T>,
) -> (Matrix<T>, LcBgruParams<T>) {
    let (mut da, da_b, du_f, du_b) =
        chunked_bidirectional_backward(grad_out, &params.u_f, &params.u_b, cfg, &cache.inner);
    da.add_assign(&da_b);
    let mut g = LcBgruParams::zeros(params.inputs(), params.hidden());
    g.u_f = du_f;
    g.u_b = du_b;
    let dx = affine_backward(x, &params.w, &da, &mut g.w, &mut g.b);
    (dx, g)
}

/// Inference with full-BGRU weights under chunked backward context.
pub fn run_bgru_as_lc_bgru<T: Scalar>(
    x: &Matrix<T>,
    fwd: &GruParams<T>,
    bwd: &GruParams<T>,
    cfg: &LcBgruConfig,
) -> Matrix<T> {
    let a_f = x.affine(&fwd.w, &fwd.b);
    let a_b = x.affine(&bwd.w, &bwd.b);
    chunked_bidirectional(&a_f, &a_b, &fwd.u, &bwd.u, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::testutil::{assert_grads_close, numeric_grad, rng};

    fn weighted(y: &Matrix<f64>, w: &Matrix<f64>) -> f64 {
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_params_halve_unit_state() {
        let u = Matrix::<f64>::zeros(6, 2);
        let mut h = [0.0; 2];
        gru_step(&[0.0; 6], &[1.0, 1.0], &u, &mut h);
        assert_eq!(h, [0.5, 0.5]);
        gru_step(&[0.0; 6], &[0.0, 0.0], &u, &mut h);
        assert_eq!(h, [0.0, 0.0]);
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut r = rng(10);
        let h = 3;
        let a = Matrix::<f64>::uniform(1, 3 * h, 1.5, &mut r);
        let hp = Matrix::<f64>::uniform(1, h, 1.0, &mut r);
        let u = Matrix::<f64>::uniform(3 * h, h, 0.8, &mut r);
        let w = Matrix::<f64>::uniform(1, h, 1.0, &mut r);
        let f = |a: &[f64], hp: &[f64], u: &Matrix<f64>| {
            let mut o = vec![0.0; h];
            gru_step(a, hp, u, &mut o);
            o.iter().zip(w.as_slice()).map(|(x, y)| x * y).sum::<f64>()
        };
        let mut o = vec![0.0; h];
        let c = gru_step(a.as_slice(), hp.as_slice(), &u, &mut o);
        let mut du = u.zeros_like();
        let (da, dhp) = gru_step_backward(w.as_slice(), hp.as_slice(), &u, &c, &mut du);
        assert_grads_close(&da, &numeric_grad(a.as_slice(), |v| f(v, hp.as_slice(), &u)), 1e-4, "da");
        assert_grads_close(&dhp, &numeric_grad(hp.as_slice(), |v| f(a.as_slice(), v, &u)), 1e-4, "dh");
        let num = numeric_grad(u.as_slice(), |v| f(a.as_slice(), hp.as_slice(), &Matrix::from_vec(3 * h, h, v.to_vec())));
        assert_grads_close(du.as_slice(), &num, 1e-4, "du");
    }

    #[test]
    fn single_frame_layer_is_one_step() {
        let mut r = rng(11);
        let p = GruParams::<f64>::init(4, 3, &mut r);
        let x = Matrix::<f64>::uniform(1, 4, 1.0, &mut r);
        let (hs, c) = gru_layer(&x, &p, Direction::Forward, &[0.1, 0.2, 0.3]);
        let a = x.affine(&p.w, &p.b);
        let mut h = [0.0; 3];
        gru_step(a.row(0), &[0.1, 0.2, 0.3], &p.u, &mut h);
        assert_eq!(hs.row(0), &h);
        assert_eq!(c.final_state(), h.to_vec());
    }

    #[test]
    fn backward_direction_mirrors_forward() {
        let mut r = rng(12);
        let p = GruParams::<f64>::init(4, 3, &mut r);
        let x = Matrix::<f64>::uniform(7, 4, 1.0, &mut r);
        let (hf, _) = gru_layer(&x, &p, Direction::Forward, &[0.0; 3]);
        let (hb, _) = gru_layer(&x.reversed_rows(), &p, Direction::Backward, &[0.0; 3]);
        assert_eq!(hf, hb.reversed_rows());
    }

    #[test]
    fn layer_is_bitwise_repeatable() {
        let mut r = rng(13);
        let p = GruParams::<f64>::init(5, 4, &mut r);
        let x = Matrix::<f64>::uniform(9, 5, 1.0, &mut r);
        assert_eq!(gru_layer(&x, &p, Direction::Forward, &[0.0; 4]).0, gru_layer(&x, &p, Direction::Forward, &[0.0; 4]).0);
    }

    #[test]
    fn layer_bptt_matches_finite_differences() {
        let mut r = rng(14);
        for dir in [Direction::Forward, Direction::Backward] {
            let p = GruParams::<f64>::init(3, 2, &mut r);
            let x = Matrix::<f64>::uniform(5, 3, 1.0, &mut r);
            let w = Matrix::<f64>::uniform(5, 2, 1.0, &mut r);
            let h0 = [0.3, -0.2];
            let loss = |x: &Matrix<f64>, p: &GruParams<f64>| weighted(&gru_layer(x, p, dir, &h0).0, &w);
            let (_, c) = gru_layer(&x, &p, dir, &h0);
            let (dx, dp, _) = gru_layer_backward(&x, &p, &c, &w);
            let num = numeric_grad(x.as_slice(), |v| loss(&Matrix::from_vec(5, 3, v.to_vec()), &p));
            assert_grads_close(dx.as_slice(), &num, 1e-4, "dx");
            let analytic: Vec<f64> = dp.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
            let flat: Vec<f64> = p.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
            let num = numeric_grad(&flat, |v| {
                let mut q = p.clone();
                let mut off = 0;
                for s in q.tensors_mut() {
                    s.copy_from_slice(&v[off..off + s.len()]);
                    off += s.len();
                }
                loss(&x, &q)
            });
            assert_grads_close(&analytic, &num, 1e-4, "dparams");
        }
    }

    #[test]
    fn zero_params_bgru_is_zero() {
        let x = Matrix::<f64>::uniform(4, 3, 1.0, &mut rng(15));
        let p = GruParams::<f64>::zeros(3, 2);
        let (y, _) = bgru(&x, &p, &p);
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bgru_single_frame_halves_agree() {
        let mut r = rng(16);
        let p = GruParams::<f64>::init(3, 2, &mut r);
        let x = Matrix::<f64>::uniform(1, 3, 1.0, &mut r);
        let (y, _) = bgru(&x, &p, &p);
        assert_eq!(y.row(0)[..2], y.row(0)[2..]);
    }

    #[test]
    fn bgru_gradients_match_finite_differences() {
        let mut r = rng(17);
        let pf = GruParams::<f64>::init(3, 2, &mut r);
        let pb = GruParams::<f64>::init(3, 2, &mut r);
        let x = Matrix::<f64>::uniform(4, 3, 1.0, &mut r);
        let w = Matrix::<f64>::uniform(4, 4, 1.0, &mut r);
        let (_, c) = bgru(&x, &pf, &pb);
        let (dx, _, _) = bgru_backward(&x, &pf, &pb, &c, &w);
        let num = numeric_grad(x.as_slice(), |v| weighted(&bgru(&Matrix::from_vec(4, 3, v.to_vec()), &pf, &pb).0, &w));
        assert_grads_close(dx.as_slice(), &num, 1e-4, "dx");
    }

    fn as_lc(p: &GruParams<f64>, q: &GruParams<f64>) -> LcBgruParams<f64> {
        LcBgruParams {
            w: p.w.clone(),
            b: p.b.clone(),
            u_f: p.u.clone(),
            u_b: q.u.clone(),
        }
    }

    #[test]
    fn full_context_equals_bgru() {
        let mut r = rng(18);
        let pf = GruParams::<f64>::init(3, 4, &mut r);
        let mut pb = GruParams::<f64>::init(3, 4, &mut r);
        pb.w = pf.w.clone();
        pb.b = pf.b.clone();
        let x = Matrix::<f64>::uniform(11, 3, 1.0, &mut r);
        let full = bgru(&x, &pf, &pb).0;
        let cfg = LcBgruConfig::new(11, 11).unwrap();
        assert!(lc_bgru(&x, &as_lc(&pf, &pb), &cfg).0.max_abs_diff(&full) < 1e-12);
        let wide = LcBgruConfig::new(20, 3).unwrap();
        let pb2 = GruParams::<f64>::init(3, 4, &mut r);
        let full2 = bgru(&x, &pf, &pb2).0;
        assert!(run_bgru_as_lc_bgru(&x, &pf, &pb2, &LcBgruConfig::new(11, 11).unwrap()).max_abs_diff(&full2) < 1e-12);
        let lc = run_bgru_as_lc_bgru(&x, &pf, &pb2, &wide);
        // Frames whose chunk reaches the end see the full backward context.
        for t in 0..11 {
            if (t / 3) * 3 + 20 >= 11 {
                for j in 0..8 {
                    assert!((lc[(t, j)] - full2[(t, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_chunks_are_zero_state_steps() {
        let mut r = rng(19);
        let p = LcBgruParams::<f64>::init(3, 2, &mut r);
        let x = Matrix::<f64>::uniform(5, 3, 1.0, &mut r);
        let (y, _) = lc_bgru(&x, &p, &LcBgruConfig::new(1, 1).unwrap());
        let a = x.affine(&p.w, &p.b);
        for t in 0..5 {
            let mut h = [0.0; 2];
            gru_step(a.row(t), &[0.0, 0.0], &p.u_b, &mut h);
            assert_eq!(&y.row(t)[2..], &h);
        }
    }

    /// Independent scalar loop reference.
    fn reference_lc(x: &Matrix<f64>, p: &LcBgruParams<f64>, cw: usize, cs: usize) -> Matrix<f64> {
        let (n, d, h) = (x.rows(), x.cols(), p.hidden());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut a = vec![vec![0.0; 3 * h]; n];
        for t in 0..n {
            for g in 0..3 * h {
                let mut s = p.b[g];
                for i in 0..d {
                    s += p.w[(g, i)] * x[(t, i)];
                }
                a[t][g] = s;
            }
        }
        let step = |a: &[f64], hp: &[f64], u: &Matrix<f64>| -> Vec<f64> {
            let mut out = vec![0.0; h];
            for i in 0..h {
                let mut uz = 0.0;
                let mut ur = 0.0;
                let mut uc = 0.0;
                for k in 0..h {
                    uz += u[(i, k)] * hp[k];
                    ur += u[(h + i, k)] * hp[k];
                    uc += u[(2 * h + i, k)] * hp[k];
                }
                let z = sig(a[i] + uz);
                let r = sig(a[h + i] + ur);
                let c = (a[2 * h + i] + r * uc).tanh();
                out[i] = z * hp[i] + (1.0 - z) * c;
            }
            out
        };
        let mut y = Matrix::zeros(n, 2 * h);
        let mut hf = vec![0.0; h];
        for t in 0..n {
            hf = step(&a[t], &hf, &p.u_f);
            y.row_mut(t)[..h].copy_from_slice(&hf);
        }
        let mut s = 0;
        while s < n {
            let e = (s + cw).min(n);
            let mut hb = vec![0.0; h];
            let mut states = vec![vec![0.0; h]; e - s];
            for t in (s..e).rev() {
                hb = step(&a[t], &hb, &p.u_b);
                states[t - s] = hb.clone();
            }
            for k in 0..cs.min(e - s) {
                y.row_mut(s + k)[h..].copy_from_slice(&states[k]);
            }
            s += cs;
        }
        y
    }

    #[test]
    fn lc_bgru_matches_reference_loop() {
        let mut r = rng(20);
        let p = LcBgruParams::<f64>::init(4, 3, &mut r);
        let x = Matrix::<f64>::uniform(10, 4, 1.0, &mut r);
        let (y, _) = lc_bgru(&x, &p, &LcBgruConfig::new(6, 2).unwrap());
        assert!(y.max_abs_diff(&reference_lc(&x, &p, 6, 2)) < 1e-12);
    }

    #[test]
    fn lc_bgru_gradients_match_finite_differences() {
        let mut r = rng(21);
        let p = LcBgruParams::<f64>::init(3, 2, &mut r);
        let x = Matrix::<f64>::uniform(7, 3, 1.0, &mut r);
        let w = Matrix::<f64>::uniform(7, 4, 1.0, &mut r);
        let cfg = LcBgruConfig::new(3, 2).unwrap();
        let loss = |x: &Matrix<f64>, p: &LcBgruParams<f64>| weighted(&lc_bgru(x, p, &cfg).0, &w);
        let (_, c) = lc_bgru(&x, &p, &cfg);
        let (dx, dp) = lc_bgru_backward(&x, &p, &cfg, &c, &w);
        let num = numeric_grad(x.as_slice(), |v| loss(&Matrix::from_vec(7, 3, v.to_vec()), &p));
        assert_grads_close(dx.as_slice(), &num, 1e-4, "dx");
        let analytic: Vec<f64> = dp.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let flat: Vec<f64> = p.tensors().iter().flat_map(|t| t.data.to_vec()).collect();
        let num = numeric_grad(&flat, |v| {
            let mut q = p.clone();
            let mut off = 0;
            for s in q.tensors_mut() {
                s.copy_from_slice(&v[off..off + s.len()]);
                off += s.len();
            }
            loss(&x, &q)
        });
        assert_grads_close(&analytic, &num, 1e-4, "dparams");
    }

    #[test]
    fn lc_bgru_parameter_count_shares_input_affine() {
        let p = LcBgruParams::<f64>::zeros(10, 4);
        assert_eq!(p.param_count(), 12 * 10 + 12 + 2 * 12 * 4);
        let g = GruParams::<f64>::zeros(10, 4);
        assert_eq!(p.param_count(), 2 * g.param_count() - g.w.len() - g.b.len());
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(LcBgruConfig::new(3, 0).is_err());
        assert!(LcBgruConfig::new(3, 4).is_err());
        assert_eq!(LcBgruConfig::new(30, 10).unwrap().lookahead(), 20);
    }

    #[test]
    fn divergence_shrinks_with_context() {
        let mut means = Vec::new();
        for cw in [4usize, 16, 64] {
            let mut total = 0.0;
            for seed in 0..20 {
                let mut r = rng(100 + seed);
                let pf = GruParams::<f64>::init(4, 6, &mut r);
                let pb = GruParams::<f64>::init(4, 6, &mut r);
                let x = Matrix::<f64>::uniform(96, 4, 1.0, &mut r);
                let full = bgru(&x, &pf, &pb).0;
                let lc = run_bgru_as_lc_bgru(&x, &pf, &pb, &LcBgruConfig::new(cw, cw.min(4)).unwrap());
                let mut d = 0.0;
                for t in 0..96 {
                    for j in 0..12 {
                        d += (lc[(t, j)] - full[(t, j)]).abs();
                    }
                }
                total += d / (96.0 * 12.0);
            }
            means.push(total / 20.0);
        }
        assert!(means[2] < means[1] && means[1] < means[0], "{means:?}");
    }
}
