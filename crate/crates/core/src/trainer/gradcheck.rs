use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::TrainError;
use crate::alphabet::Alphabet;
use crate::frontend::{pcen_backward, pcen_forward, PcenInit, PcenParams, Spectrogram};
use crate::layers::{
    batchnorm_backward, batchnorm_seq, bgru, bgru_backward, conv2d, conv2d_backward, fully_connected,
    fully_connected_backward, gru_layer, gru_layer_backward, la_conv, la_conv_backward, lc_bgru,
    lc_bgru_backward, log_softmax, log_softmax_backward, relu, relu_backward, softmax, softmax_backward,
    BatchNorm, Conv2dParams, Conv2dSpec, DenseParams, Direction, GruParams, LaConvParams, LcBgruConfig,
    LcBgruParams, Mode,
};
use crate::losses::{build_gram_lattice, ce_alignment_loss, ctc_loss, gramctc_loss, Alignment, GramSet};
use crate::params::ParamSet;
use crate::tensor::Matrix;

/// Worst coordinate of one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Registered component ids, in report order.
pub const COMPONENTS: &[&str] = &[
    "linear", "pcen", "conv2d", "batchnorm", "gru", "bgru", "lc_bgru", "la_conv", "fc", "softmax",
    "log_softmax", "ctc", "gramctc", "ce",
];

/// Default relative step.
pub const DEFAULT_EPS: f64 = 1e-5;

type Objective = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>;

/// Starting point and a closure returning `(value, analytic gradient)`.
struct Instance {
    x: Vec<f64>,
    f: Objective,
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn weighted_sum(y: &Matrix<f64>, w: &Matrix<f64>) -> f64 {
    y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

/// Packs a parameter struct followed by plain input values into one vector.
fn pack<P: ParamSet<f64>>(p: &P, rest: &[&[f64]]) -> Vec<f64> {
    let mut v = p.to_flat();
    for r in rest {
        v.extend_from_slice(r);
    }
    v
}

/// Inverse of [`pack`]: fills `p` and returns the remaining slices.
fn unpack<'a, P: ParamSet<f64>>(x: &'a [f64], p: &mut P, sizes: &[usize]) -> Vec<&'a [f64]> {
    let n = p.param_count();
    p.set_flat(&x[..n]);
    let mut off = n;
    sizes
        .iter()
        .map(|&s| {
            let r = &x[off..off + s];
            off += s;
            r
        })
        .collect()
}

fn build(id: &str, seed: u64) -> Option<Instance> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inst = match id {
        "linear" => {
            let p = DenseParams::<f64>::init(4, 3, &mut r);
            let x = uniform(&mut r, 5 * 4, -1.0, 1.0);
            let w = Matrix::uniform(5, 3, 1.0, &mut r);
            let t = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = t.clone();
                    let s = unpack(v, &mut p, &[20]);
                    let xm = Matrix::from_vec(5, 4, s[0].to_vec());
                    let y = fully_connected(&xm, &p);
                    let (dx, dp) = fully_connected_backward(&xm, &p, &w);
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "fc" => {
            let p = DenseParams::<f64>::init(4, 3, &mut r);
            let x = uniform(&mut r, 5 * 4, -1.0, 1.0);
            let w = Matrix::uniform(5, 3, 1.0, &mut r);
            let t = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = t.clone();
                    let s = unpack(v, &mut p, &[20]);
                    let xm = Matrix::from_vec(5, 4, s[0].to_vec());
                    let y = relu(&fully_connected(&xm, &p));
                    let (dx, dp) = fully_connected_backward(&xm, &p, &relu_backward(&y, &w));
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "softmax" | "log_softmax" => {
            let log = id == "log_softmax";
            let x = uniform(&mut r, 4 * 5, -2.0, 2.0);
            let w = Matrix::uniform(4, 5, 1.0, &mut r);
            Instance {
                x,
                f: Box::new(move |v| {
                    let xm = Matrix::from_vec(4, 5, v.to_vec());
                    if log {
                        let y = log_softmax(&xm);
                        (weighted_sum(&y, &w), log_softmax_backward(&y, &w).into_vec())
                    } else {
                        let y = softmax(&xm);
                        (weighted_sum(&y, &w), softmax_backward(&y, &w).into_vec())
                    }
                }),
            }
        }
        "pcen" => {
            let (t, f) = (7, 3);
            let mut p = PcenParams::<f64>::new(f, PcenInit::default());
            for (i, v) in p.tensors_mut().into_iter().flat_map(|s| s.iter_mut()).enumerate() {
                *v += 0.1 * ((i * 37 % 11) as f64 / 11.0 - 0.5);
            }
            let x = uniform(&mut r, t * f, 0.1, 2.0);
            let w = Matrix::uniform(t, f, 1.0, &mut r);
            let tp = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = tp.clone();
                    let s = unpack(v, &mut p, &[t * f]);
                    let spec = Spectrogram::new(Matrix::from_vec(t, f, s[0].to_vec()), 10.0, false);
                    let (y, cache) = pcen_forward(&spec, &p).expect("finite PCEN");
                    let (dx, dp) = pcen_backward(&w, &cache).expect("matching cache");
                    (weighted_sum(&y.values, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "conv2d" => {
            let spec = Conv2dSpec::new(2, (3, 2), 2, (2, 2));
            let (t, f) = (6, 5);
            let p = Conv2dParams::<f64>::init(&spec, &mut r);
            let x = uniform(&mut r, t * f * 2, -1.0, 1.0);
            let out_shape = {
                let y = conv2d(&Matrix::from_vec(t, f * 2, x.clone()), &spec, &p).expect("valid conv");
                y.shape()
            };
            let w = Matrix::uniform(out_shape.0, out_shape.1, 1.0, &mut r);
            let tp = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = tp.clone();
                    let s = unpack(v, &mut p, &[t * f * 2]);
                    let xm = Matrix::from_vec(t, f * 2, s[0].to_vec());
                    let y = conv2d(&xm, &spec, &p).expect("valid conv");
                    let (dx, dp) = conv2d_backward(&xm, &spec, &p, &w).expect("valid conv");
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "batchnorm" => {
            let f = 3;
            let lens = [4usize, 3];
            let mut bn = BatchNorm::<f64>::new(f);
            bn.gamma = uniform(&mut r, f, 0.5, 1.5);
            bn.beta = uniform(&mut r, f, -0.5, 0.5);
            let xs: Vec<Vec<f64>> = lens.iter().map(|&t| uniform(&mut r, t * f, -2.0, 2.0)).collect();
            let ws: Vec<Matrix<f64>> = lens.iter().map(|&t| Matrix::uniform(t, f, 1.0, &mut r)).collect();
            let tb = bn.clone();
            Instance {
                x: pack(&bn, &[&xs[0], &xs[1]]),
                f: Box::new(move |v| {
                    let mut bn = tb.clone();
                    let s = unpack(v, &mut bn, &[lens[0] * f, lens[1] * f]);
                    let batch: Vec<Matrix<f64>> =
                        s.iter().zip(&lens).map(|(d, &t)| Matrix::from_vec(t, f, d.to_vec())).collect();
                    let (y, cache) = batchnorm_seq(&batch, &bn, Mode::Train).expect("enough samples");
                    let (dx, dbn) = batchnorm_backward(&ws, &bn, &cache).expect("matching cache");
                    let val = y.iter().zip(&ws).map(|(a, b)| weighted_sum(a, b)).sum();
                    (val, pack(&dbn, &[dx[0].as_slice(), dx[1].as_slice()]))
                }),
            }
        }
        "gru" => {
            let (t, d, h) = (5, 3, 4);
            let p = GruParams::<f64>::init(d, h, &mut r);
            let x = uniform(&mut r, t * d, -1.0, 1.0);
            let h0 = uniform(&mut r, h, -0.5, 0.5);
            let w = Matrix::uniform(t, h, 1.0, &mut r);
            let tp = p.clone();
            Instance {
                x: pack(&p, &[&x, &h0]),
                f: Box::new(move |v| {
                    let mut p = tp.clone();
                    let s = unpack(v, &mut p, &[t * d, h]);
                    let xm = Matrix::from_vec(t, d, s[0].to_vec());
                    let (y, cache) = gru_layer(&xm, &p, Direction::Forward, s[1]);
                    let (dx, dp, dh0) = gru_layer_backward(&xm, &p, &cache, &w);
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice(), &dh0]))
                }),
            }
        }
        "bgru" => {
            let (t, d, h) = (5, 3, 2);
            let f = GruParams::<f64>::init(d, h, &mut r);
            let b = GruParams::<f64>::init(d, h, &mut r);
            let x = uniform(&mut r, t * d, -1.0, 1.0);
            let w = Matrix::uniform(t, 2 * h, 1.0, &mut r);
            let (tf, tb) = (f.clone(), b.clone());
            let nb = b.param_count();
            Instance {
                x: pack(&f, &[&b.to_flat(), &x]),
                f: Box::new(move |v| {
                    let mut f = tf.clone();
                    let mut b = tb.clone();
                    let s = unpack(v, &mut f, &[nb, t * d]);
                    b.set_flat(s[0]);
                    let xm = Matrix::from_vec(t, d, s[1].to_vec());
                    let (y, cache) = bgru(&xm, &f, &b);
                    let (dx, df, db) = bgru_backward(&xm, &f, &b, &cache, &w);
                    (weighted_sum(&y, &w), pack(&df, &[&db.to_flat(), dx.as_slice()]))
                }),
            }
        }
        "lc_bgru" => {
            let (t, d, h) = (7, 3, 2);
            let cfg = LcBgruConfig { context: 3, step: 2 };
            let p = LcBgruParams::<f64>::init(d, h, &mut r);
            let x = uniform(&mut r, t * d, -1.0, 1.0);
            let w = Matrix::uniform(t, 2 * h, 1.0, &mut r);
            let tp = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = tp.clone();
                    let s = unpack(v, &mut p, &[t * d]);
                    let xm = Matrix::from_vec(t, d, s[0].to_vec());
                    let (y, cache) = lc_bgru(&xm, &p, &cfg);
                    let (dx, dp) = lc_bgru_backward(&xm, &p, &cfg, &cache, &w);
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "la_conv" => {
            let (t, h) = (6, 3);
            let p = LaConvParams::<f64>::init(2, h, &mut r);
            let x = uniform(&mut r, t * h, -1.0, 1.0);
            let w = Matrix::uniform(t, h, 1.0, &mut r);
            let tp = p.clone();
            Instance {
                x: pack(&p, &[&x]),
                f: Box::new(move |v| {
                    let mut p = tp.clone();
                    let s = unpack(v, &mut p, &[t * h]);
                    let xm = Matrix::from_vec(t, h, s[0].to_vec());
                    let y = la_conv(&xm, &p).expect("matching width");
                    let (dx, dp) = la_conv_backward(&xm, &p, &w);
                    (weighted_sum(&y, &w), pack(&dp, &[dx.as_slice()]))
                }),
            }
        }
        "ctc" | "ce" => {
            let (t, v) = (6, 4);
            let logits = uniform(&mut r, t * v, -2.0, 2.0);
            let label = vec![1usize, 2, 2];
            let ce = id == "ce";
            let align = Alignment::new((0..t).map(|_| r.random_range(0..v)).collect());
            Instance {
                x: logits,
                f: Box::new(move |x| {
                    let lp = log_softmax(&Matrix::from_vec(t, v, x.to_vec()));
                    let (loss, g) = if ce {
                        ce_alignment_loss(&lp, &align).expect("matching alignment")
                    } else {
                        ctc_loss(&lp, &label).expect("label fits")
                    };
                    (loss, log_softmax_backward(&lp, &g).into_vec())
                }),
            }
        }
        "gramctc" => {
            let alphabet: Alphabet = "ab".parse().expect("valid alphabet");
            let grams = GramSet::new(alphabet, vec!["a".into(), "b".into(), "ab".into(), "ba".into()])
                .expect("valid grams");
            let lattice = build_gram_lattice("abab", &grams).expect("coverable");
            let (t, v) = (6, grams.output_size());
            let logits = uniform(&mut r, t * v, -2.0, 2.0);
            Instance {
                x: logits,
                f: Box::new(move |x| {
                    let lp = log_softmax(&Matrix::from_vec(t, v, x.to_vec()));
                    let (loss, g) = gramctc_loss(&lp, &lattice).expect("label fits");
                    (loss, log_softmax_backward(&lp, &g).into_vec())
                }),
            }
        }
        _ => return None,
    };
    Some(inst)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` with `h = eps·max(1, |x|)`
/// against the analytic gradient scaled by `1 + fault`.
pub fn grad_check_with_fault(id: &str, seed: u64, eps: f64, fault: f64) -> Result<GradCheckReport, TrainError> {
    let inst = build(id, seed).ok_or_else(|| TrainError::UnknownComponent(id.to_string()))?;
    let (_, analytic) = (inst.f)(&inst.x);
    let mut x = inst.x.clone();
    let mut report = GradCheckReport {
        component: id.to_string(),
        coordinates: x.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let h = eps * inst.x[i].abs().max(1.0);
        x[i] = inst.x[i] + h;
        let fp = (inst.f)(&x).0;
        x[i] = inst.x[i] - h;
        let fm = (inst.f)(&x).0;
        x[i] = inst.x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i] * (1.0 + fault);
        let e = rel_err(a, numeric);
        if e > report.max_rel_err || i == 0 {
            report.max_rel_err = e;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

pub fn grad_check(id: &str, seed: u64, eps: f64) -> Result<GradCheckReport, TrainError> {
    grad_check_with_fault(id, seed, eps, 0.0)
}

/// Every registered component, in [`COMPONENTS`] order.
pub fn grad_check_all(seed: u64, eps: f64) -> Vec<GradCheckReport> {
    COMPONENTS
        .iter()
        .map(|id| grad_check(id, seed, eps).expect("registered component"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for seed in [1, 2] {
            for rep in grad_check_all(seed, DEFAULT_EPS) {
                assert!(rep.passes(1e-4), "{rep:?}");
            }
        }
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let rep = grad_check("linear", 3, DEFAULT_EPS).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn injected_fault_is_detected() {
        for id in COMPONENTS {
            let rep = grad_check_with_fault(id, 4, DEFAULT_EPS, 0.01).unwrap();
            assert!(rep.max_rel_err > 1e-3, "{rep:?}");
        }
    }

    #[test]
    fn unknown_component() {
        assert!(matches!(grad_check("nope", 0, 1e-5), Err(TrainError::UnknownComponent(_))));
    }
}
