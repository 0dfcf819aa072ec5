use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{FrontendKind, ModelSpec, RecurrentKind};
use super::ModelError;
use crate::frontend::{pcen_backward, pcen_forward, FeatureStats, PcenCache, PcenInit, PcenParams, Spectrogram, LOG_FLOOR};
use crate::layers::{
    batchnorm_backward, batchnorm_seq, chunked_bidirectional, chunked_bidirectional_backward, conv2d,
    conv2d_backward, gru_recurrence, gru_recurrence_backward, la_conv, la_conv_backward, log_softmax,
    log_softmax_backward, relu, relu_backward, BatchNorm, BatchNormCache, ChunkedCache, Conv2dParams, DenseParams,
    Direction, GruParams, LaConvParams, LcBgruConfig, LcBgruParams, Mode, RecurrenceCache,
};
use crate::params::{prefixed, zeroed, NamedTensor, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{affine_backward, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2dParams<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// Parameters of one recurrent slot. Bidirectional weights serve both the
/// full and the chunked evaluation kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum Recurrent<T> {
    Forward {
        gru: GruParams<T>,
        bn: Option<BatchNorm<T>>,
    },
    Bidirectional {
        fwd: GruParams<T>,
        bwd: GruParams<T>,
        bn_f: Option<BatchNorm<T>>,
        bn_b: Option<BatchNorm<T>>,
    },
    LatencyControlled {
        lc: LcBgruParams<T>,
        bn: Option<BatchNorm<T>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub pcen: Option<PcenParams<T>>,
    pub convs: Vec<ConvBlock<T>>,
    pub recurrent: Vec<Recurrent<T>>,
    pub la: Option<LaConvParams<T>>,
    pub fc: DenseParams<T>,
    pub char_head: DenseParams<T>,
    pub gram_head: Option<DenseParams<T>>,
}

/// Gradients share the parameter layout.
pub type ModelGrads<T> = ModelParams<T>;

fn push_bn<'a, T: Scalar>(out: &mut Vec<NamedTensor<'a, T>>, prefix: &str, bn: &'a Option<BatchNorm<T>>) {
    if let Some(bn) = bn {
        out.extend(prefixed(prefix, bn.tensors()));
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Every batch-norm layer in canonical order.
    pub fn batch_norms(&self) -> Vec<(String, &BatchNorm<T>)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            if let Some(bn) = &c.bn {
                v.push((format!("conv{i}.bn"), bn));
            }
        }
        for (i, r) in self.recurrent.iter().enumerate() {
            match r {
                Recurrent::Forward { bn, .. } | Recurrent::LatencyControlled { bn, .. } => {
                    if let Some(bn) = bn {
                        v.push((format!("rnn{i}.bn"), bn));
                    }
                }
                Recurrent::Bidirectional { bn_f, bn_b, .. } => {
                    if let Some(bn) = bn_f {
                        v.push((format!("rnn{i}.bn_f"), bn));
                    }
                    if let Some(bn) = bn_b {
                        v.push((format!("rnn{i}.bn_b"), bn));
                    }
                }
            }
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend(c.bn.as_mut());
        }
        for r in &mut self.recurrent {
            match r {
                Recurrent::Forward { bn, .. } | Recurrent::LatencyControlled { bn, .. } => v.extend(bn.as_mut()),
                Recurrent::Bidirectional { bn_f, bn_b, .. } => {
                    v.extend(bn_f.as_mut());
                    v.extend(bn_b.as_mut());
                }
            }
        }
        v
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut v = Vec::new();
        if let Some(p) = &self.pcen {
            v.extend(prefixed("pcen", p.tensors()));
        }
        for (i, c) in self.convs.iter().enumerate() {
            v.extend(prefixed(&format!("conv{i}"), c.conv.tensors()));
            push_bn(&mut v, &format!("conv{i}.bn"), &c.bn);
        }
        for (i, r) in self.recurrent.iter().enumerate() {
            let p = format!("rnn{i}");
            match r {
                Recurrent::Forward { gru, bn } => {
                    v.extend(prefixed(&p, gru.tensors()));
                    push_bn(&mut v, &format!("{p}.bn"), bn);
                }
                Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b } => {
                    v.extend(prefixed(&format!("{p}.fwd"), fwd.tensors()));
                    v.extend(prefixed(&format!("{p}.bwd"), bwd.tensors()));
                    push_bn(&mut v, &format!("{p}.bn_f"), bn_f);
                    push_bn(&mut v, &format!("{p}.bn_b"), bn_b);
                }
                Recurrent::LatencyControlled { lc, bn } => {
                    v.extend(prefixed(&p, lc.tensors()));
                    push_bn(&mut v, &format!("{p}.bn"), bn);
                }
            }
        }
        if let Some(la) = &self.la {
            v.extend(prefixed("la", la.tensors()));
        }
        v.extend(prefixed("fc", self.fc.tensors()));
        v.extend(prefixed("head.char", self.char_head.tensors()));
        if let Some(g) = &self.gram_head {
            v.extend(prefixed("head.gram", g.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        if let Some(p) = &mut self.pcen {
            v.extend(p.tensors_mut());
        }
        for c in &mut self.convs {
            v.extend(c.conv.tensors_mut());
            if let Some(bn) = &mut c.bn {
                v.extend(bn.tensors_mut());
            }
        }
        for r in &mut self.recurrent {
            match r {
                Recurrent::Forward { gru, bn } => {
                    v.extend(gru.tensors_mut());
                    if let Some(bn) = bn {
                        v.extend(bn.tensors_mut());
                    }
                }
                Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b } => {
                    v.extend(fwd.tensors_mut());
                    v.extend(bwd.tensors_mut());
                    if let Some(bn) = bn_f {
                        v.extend(bn.tensors_mut());
                    }
                    if let Some(bn) = bn_b {
                        v.extend(bn.tensors_mut());
                    }
                }
                Recurrent::LatencyControlled { lc, bn } => {
                    v.extend(lc.tensors_mut());
                    if let Some(bn) = bn {
                        v.extend(bn.tensors_mut());
                    }
                }
            }
        }
        if let Some(la) = &mut self.la {
            v.extend(la.tensors_mut());
        }
        v.extend(self.fc.tensors_mut());
        v.extend(self.char_head.tensors_mut());
        if let Some(g) = &mut self.gram_head {
            v.extend(g.tensors_mut());
        }
        v
    }
}

/// A network instance: spec, trainable parameters and normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    /// Log-frontend normalization; identity until fitted.
    pub feature_stats: FeatureStats,
}

struct ConvCache<T> {
    input: Vec<Matrix<T>>,
    bn: Option<BatchNormCache<T>>,
    out: Vec<Matrix<T>>,
}

enum RecCache<T> {
    Forward {
        input: Vec<Matrix<T>>,
        bn: Option<BatchNormCache<T>>,
        rec: Vec<RecurrenceCache<T>>,
    },
    Bidirectional {
        input: Vec<Matrix<T>>,
        bn_f: Option<BatchNormCache<T>>,
        bn_b: Option<BatchNormCache<T>>,
        rec_f: Vec<RecurrenceCache<T>>,
        rec_b: Vec<RecurrenceCache<T>>,
    },
    Chunked {
        input: Vec<Matrix<T>>,
        cfg: LcBgruConfig,
        bn_f: Option<BatchNormCache<T>>,
        bn_b: Option<BatchNormCache<T>>,
        chunks: Vec<ChunkedCache<T>>,
    },
}

/// Everything the backward pass needs from one batched forward pass.
pub struct ModelCache<T> {
    pcen: Option<Vec<PcenCache<T>>>,
    convs: Vec<ConvCache<T>>,
    recs: Vec<RecCache<T>>,
    la_input: Option<Vec<Matrix<T>>>,
    fc_input: Vec<Matrix<T>>,
    fc_out: Vec<Matrix<T>>,
    char_lp: Vec<Matrix<T>>,
    gram_lp: Option<Vec<Matrix<T>>>,
}

impl<T> ModelCache<T> {
    fn bn_caches(&self) -> Vec<&BatchNormCache<T>> {
        let mut v = Vec::new();
        for c in &self.convs {
            v.extend(c.bn.as_ref());
        }
        for r in &self.recs {
            match r {
                RecCache::Forward { bn, .. } => v.extend(bn.as_ref()),
                RecCache::Bidirectional { bn_f, bn_b, .. } | RecCache::Chunked { bn_f, bn_b, .. } => {
                    v.extend(bn_f.as_ref());
                    v.extend(bn_b.as_ref());
                }
            }
        }
        v
    }
}

pub struct ForwardOutput<T> {
    pub char_log_probs: Vec<Matrix<T>>,
    pub gram_log_probs: Option<Vec<Matrix<T>>>,
    pub cache: ModelCache<T>,
}

/// Per-utterance outputs without the training cache.
#[derive(Clone, Debug, PartialEq)]
pub struct StackOutput<T> {
    pub char_log_probs: Matrix<T>,
    pub gram_log_probs: Option<Matrix<T>>,
}

fn apply_bn<T: Scalar>(
    bn: &Option<BatchNorm<T>>,
    batch: Vec<Matrix<T>>,
    mode: Mode,
) -> Result<(Vec<Matrix<T>>, Option<BatchNormCache<T>>), ModelError> {
    match bn {
        None => Ok((batch, None)),
        Some(bn) => {
            let (y, c) = batchnorm_seq(&batch, bn, mode)?;
            Ok((y, Some(c)))
        }
    }
}

fn back_bn<T: Scalar>(
    bn: &Option<BatchNorm<T>>,
    cache: &Option<BatchNormCache<T>>,
    grad: Vec<Matrix<T>>,
    slot: &mut Option<BatchNorm<T>>,
) -> Result<Vec<Matrix<T>>, ModelError> {
    match (bn, cache) {
        (Some(bn), Some(c)) => {
            let (dx, g) = batchnorm_backward(&grad, bn, c)?;
            if let Some(s) = slot {
                s.gamma = g.gamma;
                s.beta = g.beta;
            }
            Ok(dx)
        }
        _ => Ok(grad),
    }
}

fn affine_all<T: Scalar>(xs: &[Matrix<T>], w: &Matrix<T>, b: &[T]) -> Vec<Matrix<T>> {
    xs.iter().map(|x| x.affine(w, b)).collect()
}

fn add_all<T: Scalar>(a: &mut [Matrix<T>], b: &[Matrix<T>]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y);
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed` (uniform, scaled by fan-in).
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = spec.conv_geometry()?;
        let bn = |n: usize| spec.batch_norm.then(|| BatchNorm::new(n));
        let pcen = (spec.frontend == FrontendKind::Pcen).then(|| PcenParams::new(spec.n_bins, PcenInit::default()));
        let convs = spec
            .convs
            .iter()
            .map(|c| ConvBlock {
                conv: Conv2dParams::init(c, &mut rng),
                bn: bn(c.filters),
            })
            .collect();
        let mut width = geometry.last().map(|&(f, c)| f * c).unwrap_or(spec.n_bins);
        let h = spec.hidden;
        let mut recurrent = Vec::with_capacity(spec.recurrent.len());
        for kind in &spec.recurrent {
            recurrent.push(match kind {
                RecurrentKind::Forward => Recurrent::Forward {
                    gru: GruParams::init(width, h, &mut rng),
                    bn: bn(3 * h),
                },
                RecurrentKind::Bidirectional | RecurrentKind::BidirectionalChunked(_) => Recurrent::Bidirectional {
                    fwd: GruParams::init(width, h, &mut rng),
                    bwd: GruParams::init(width, h, &mut rng),
                    bn_f: bn(3 * h),
                    bn_b: bn(3 * h),
                },
                RecurrentKind::LatencyControlled(_) => Recurrent::LatencyControlled {
                    lc: LcBgruParams::init(width, h, &mut rng),
                    bn: bn(3 * h),
                },
            });
            width = kind.output_width(h);
        }
        let la = spec.la_context.map(|c| LaConvParams::init(c, width, &mut rng));
        let fc = DenseParams::init(width, h, &mut rng);
        let char_head = DenseParams::init(h, spec.alphabet.output_size(), &mut rng);
        let gram_head = spec.grams.as_ref().map(|g| DenseParams::init(h, g.output_size(), &mut rng));
        Ok(Self {
            feature_stats: FeatureStats::identity(spec.n_bins),
            spec,
            params: ModelParams {
                pcen,
                convs,
                recurrent,
                la,
                fc,
                char_head,
                gram_head,
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        self.spec.convs.iter().fold(frames, |t, c| c.out_time(t))
    }

    /// Fits the log-frontend normalization on training power spectrograms.
    pub fn fit_feature_stats<'a>(&mut self, powers: impl IntoIterator<Item = &'a Matrix<T>>) {
        let floor = T::lit(LOG_FLOOR);
        let logs: Vec<Matrix<T>> = powers.into_iter().map(|p| p.map(|v| (v + floor).ln())).collect();
        self.feature_stats = FeatureStats::from_matrices(&logs);
    }

    /// Log-frontend features of one power frame, in place.
    #[inline]
    pub fn log_features_row(&self, row: &mut [T]) {
        let floor = T::lit(LOG_FLOOR);
        for v in row.iter_mut() {
            *v = (*v + floor).ln();
        }
        self.feature_stats.apply_row(row);
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Names and shapes of parameters followed by batch-norm buffers.
    pub fn state_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut v: Vec<(String, Vec<usize>)> =
            self.params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        for (name, bn) in self.params.batch_norms() {
            v.push((format!("{name}.running_mean"), vec![bn.features()]));
            v.push((format!("{name}.running_var"), vec![bn.features()]));
        }
        v
    }

    /// Values in [`Model::state_layout`] order.
    pub fn state_values(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.params.tensors().into_iter().map(|t| t.data).collect();
        for (_, bn) in self.params.batch_norms() {
            v.push(&bn.running_mean);
            v.push(&bn.running_var);
        }
        v
    }

    /// Overwrites every value in [`Model::state_layout`] order. Lengths
    /// must already match the layout.
    pub fn set_state(&mut self, values: &[Vec<T>]) {
        let mut it = values.iter();
        for dst in self.params.tensors_mut() {
            dst.copy_from_slice(it.next().expect("state value"));
        }
        for bn in self.params.batch_norms_mut() {
            bn.running_mean.copy_from_slice(it.next().expect("running mean"));
            bn.running_var.copy_from_slice(it.next().expect("running var"));
        }
        assert!(it.next().is_none(), "extra state values");
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        zeroed(&self.params)
    }

    /// Batched forward pass over power spectrograms (`T_i × n_bins`).
    pub fn forward(&self, batch: &[Matrix<T>], mode: Mode) -> Result<ForwardOutput<T>, ModelError> {
        for p in batch {
            if p.cols() != self.spec.n_bins {
                return Err(ModelError::FeatureShape {
                    got: p.cols(),
                    expected: self.spec.n_bins,
                });
            }
        }
        let mut pcen_caches = None;
        let mut x: Vec<Matrix<T>> = match &self.params.pcen {
            Some(pp) => {
                let mut outs = Vec::with_capacity(batch.len());
                let mut caches = Vec::with_capacity(batch.len());
                for p in batch {
                    let (y, c) = pcen_forward(&Spectrogram::new(p.clone(), 10.0, false), pp)?;
                    outs.push(y.values);
                    caches.push(c);
                }
                pcen_caches = Some(caches);
                outs
            }
            None => batch
                .iter()
                .map(|p| {
                    let mut m = p.clone();
                    for t in 0..m.rows() {
                        self.log_features_row(m.row_mut(t));
                    }
                    m
                })
                .collect(),
        };

        let mut conv_caches = Vec::with_capacity(self.spec.convs.len());
        for (spec, block) in self.spec.convs.iter().zip(&self.params.convs) {
            let mut z = Vec::with_capacity(x.len());
            for m in &x {
                z.push(conv2d(m, spec, &block.conv)?);
            }
            let c = spec.filters;
            let shapes: Vec<(usize, usize)> = z.iter().map(Matrix::shape).collect();
            let flat: Vec<Matrix<T>> = z.into_iter().map(|m| {
                let (r, w) = m.shape();
                m.reshaped(r * w / c, c)
            }).collect();
            let (normed, bn_cache) = apply_bn(&block.bn, flat, mode)?;
            let out: Vec<Matrix<T>> = normed
                .into_iter()
                .zip(&shapes)
                .map(|(m, &(r, w))| relu(&m.reshaped(r, w)))
                .collect();
            conv_caches.push(ConvCache {
                input: x,
                bn: bn_cache,
                out: out.clone(),
            });
            x = out;
        }

        let mut rec_caches = Vec::with_capacity(self.spec.recurrent.len());
        for (kind, params) in self.spec.recurrent.iter().zip(&self.params.recurrent) {
            let (y, cache) = self.recurrent_forward(kind, params, x, mode)?;
            rec_caches.push(cache);
            x = y;
        }

        let mut la_input = None;
        if let Some(la) = &self.params.la {
            let mut y = Vec::with_capacity(x.len());
            for m in &x {
                y.push(la_conv(m, la)?);
            }
            la_input = Some(x);
            x = y;
        }

        let fc_out: Vec<Matrix<T>> = affine_all(&x, &self.params.fc.weight, &self.params.fc.bias)
            .iter()
            .map(relu)
            .collect();
        let char_lp: Vec<Matrix<T>> = affine_all(&fc_out, &self.params.char_head.weight, &self.params.char_head.bias)
            .iter()
            .map(log_softmax)
            .collect();
        let gram_lp: Option<Vec<Matrix<T>>> = self
            .params
            .gram_head
            .as_ref()
            .map(|g| affine_all(&fc_out, &g.weight, &g.bias).iter().map(log_softmax).collect());
        Ok(ForwardOutput {
            char_log_probs: char_lp.clone(),
            gram_log_probs: gram_lp.clone(),
            cache: ModelCache {
                pcen: pcen_caches,
                convs: conv_caches,
                recs: rec_caches,
                la_input,
                fc_input: x,
                fc_out,
                char_lp,
                gram_lp,
            },
        })
    }

    fn recurrent_forward(
        &self,
        kind: &RecurrentKind,
        params: &Recurrent<T>,
        x: Vec<Matrix<T>>,
        mode: Mode,
    ) -> Result<(Vec<Matrix<T>>, RecCache<T>), ModelError> {
        let h = self.spec.hidden;
        let zeros = vec![T::zero(); h];
        match (kind, params) {
            (RecurrentKind::Forward, Recurrent::Forward { gru, bn }) => {
                let (a, bn_c) = apply_bn(bn, affine_all(&x, &gru.w, &gru.b), mode)?;
                let mut ys = Vec::with_capacity(a.len());
                let mut rec = Vec::with_capacity(a.len());
                for m in &a {
                    let (y, c) = gru_recurrence(m, &gru.u, Direction::Forward, &zeros);
                    ys.push(y);
                    rec.push(c);
                }
                Ok((ys, RecCache::Forward { input: x, bn: bn_c, rec }))
            }
            (RecurrentKind::Bidirectional, Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b }) => {
                let (a_f, c_f) = apply_bn(bn_f, affine_all(&x, &fwd.w, &fwd.b), mode)?;
                let (a_b, c_b) = apply_bn(bn_b, affine_all(&x, &bwd.w, &bwd.b), mode)?;
                let mut ys = Vec::with_capacity(a_f.len());
                let mut rec_f = Vec::with_capacity(a_f.len());
                let mut rec_b = Vec::with_capacity(a_f.len());
                for (mf, mb) in a_f.iter().zip(&a_b) {
                    let (yf, cf) = gru_recurrence(mf, &fwd.u, Direction::Forward, &zeros);
                    let (yb, cb) = gru_recurrence(mb, &bwd.u, Direction::Backward, &zeros);
                    ys.push(Matrix::hcat(&yf, &yb));
                    rec_f.push(cf);
                    rec_b.push(cb);
                }
                Ok((
                    ys,
                    RecCache::Bidirectional {
                        input: x,
                        bn_f: c_f,
                        bn_b: c_b,
                        rec_f,
                        rec_b,
                    },
                ))
            }
            (RecurrentKind::BidirectionalChunked(cfg), Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b }) => {
                let (a_f, c_f) = apply_bn(bn_f, affine_all(&x, &fwd.w, &fwd.b), mode)?;
                let (a_b, c_b) = apply_bn(bn_b, affine_all(&x, &bwd.w, &bwd.b), mode)?;
                let mut ys = Vec::with_capacity(a_f.len());
                let mut chunks = Vec::with_capacity(a_f.len());
                for (mf, mb) in a_f.iter().zip(&a_b) {
                    let (y, c) = chunked_bidirectional(mf, mb, &fwd.u, &bwd.u, cfg);
                    ys.push(y);
                    chunks.push(c);
                }
                Ok((
                    ys,
                    RecCache::Chunked {
                        input: x,
                        cfg: *cfg,
                        bn_f: c_f,
                        bn_b: c_b,
                        chunks,
                    },
                ))
            }
            (RecurrentKind::LatencyControlled(cfg), Recurrent::LatencyControlled { lc, bn }) => {
                let (a, c) = apply_bn(bn, affine_all(&x, &lc.w, &lc.b), mode)?;
                let mut ys = Vec::with_capacity(a.len());
                let mut chunks = Vec::with_capacity(a.len());
                for m in &a {
                    let (y, ch) = chunked_bidirectional(m, m, &lc.u_f, &lc.u_b, cfg);
                    ys.push(y);
                    chunks.push(ch);
                }
                Ok((
                    ys,
                    RecCache::Chunked {
                        input: x,
                        cfg: *cfg,
                        bn_f: c,
                        bn_b: None,
                        chunks,
                    },
                ))
            }
            _ => Err(ModelError::InvalidSpec(format!("recurrent kind {kind:?} does not match its parameters"))),
        }
    }

    /// Folds the batch statistics of a train-mode pass into running stats.
    pub fn update_running_stats(&mut self, cache: &ModelCache<T>) {
        for (bn, c) in self.params.batch_norms_mut().into_iter().zip(cache.bn_caches()) {
            bn.update_running(c);
        }
    }

    /// Backpropagates gradients w.r.t. each head's log-probabilities.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        d_char: &[Matrix<T>],
        d_gram: Option<&[Matrix<T>]>,
    ) -> Result<ModelGrads<T>, ModelError> {
        let mut g = self.zero_grads();
        let p = &self.params;
        let n = cache.fc_out.len();
        if d_char.len() != n {
            return Err(ModelError::InvalidSpec("gradient batch size mismatch".into()));
        }

        let mut d_fc_out: Vec<Matrix<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let dz = log_softmax_backward(&cache.char_lp[i], &d_char[i]);
            let dx = affine_backward(&cache.fc_out[i], &p.char_head.weight, &dz, &mut g.char_head.weight, &mut g.char_head.bias);
            d_fc_out.push(dx);
        }
        if let (Some(dg), Some(lp), Some(head), Some(gh)) = (d_gram, &cache.gram_lp, &p.gram_head, &mut g.gram_head) {
            for i in 0..n {
                let dz = log_softmax_backward(&lp[i], &dg[i]);
                let dx = affine_backward(&cache.fc_out[i], &head.weight, &dz, &mut gh.weight, &mut gh.bias);
                d_fc_out[i].add_assign(&dx);
            }
        }
        let mut dx: Vec<Matrix<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let dz = relu_backward(&cache.fc_out[i], &d_fc_out[i]);
            dx.push(affine_backward(&cache.fc_input[i], &p.fc.weight, &dz, &mut g.fc.weight, &mut g.fc.bias));
        }

        if let (Some(la), Some(input), Some(gla)) = (&p.la, &cache.la_input, &mut g.la) {
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let (d, dp) = la_conv_backward(&input[i], la, &dx[i]);
                gla.weights.add_assign(&dp.weights);
                next.push(d);
            }
            dx = next;
        }

        for (k, rc) in cache.recs.iter().enumerate().rev() {
            dx = self.recurrent_backward(&p.recurrent[k], rc, dx, &mut g.recurrent[k])?;
        }

        for (k, cc) in cache.convs.iter().enumerate().rev() {
            let spec = &self.spec.convs[k];
            let c = spec.filters;
            let dz: Vec<Matrix<T>> = dx
                .iter()
                .zip(&cc.out)
                .map(|(d, y)| {
                    let m = relu_backward(y, d);
                    let (r, w) = m.shape();
                    m.reshaped(r * w / c, c)
                })
                .collect();
            let shapes: Vec<(usize, usize)> = cc.out.iter().map(Matrix::shape).collect();
            let dz = back_bn(&p.convs[k].bn, &cc.bn, dz, &mut g.convs[k].bn)?;
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let (r, w) = shapes[i];
                let (d, dp) = conv2d_backward(&cc.input[i], spec, &p.convs[k].conv, &dz[i].clone().reshaped(r, w))?;
                g.convs[k].conv.weight.add_assign(&dp.weight);
                for (a, b) in g.convs[k].conv.bias.iter_mut().zip(&dp.bias) {
                    *a += *b;
                }
                next.push(d);
            }
            dx = next;
        }

        if let (Some(caches), Some(gp)) = (&cache.pcen, &mut g.pcen) {
            for (c, d) in caches.iter().zip(&dx) {
                let (_, mut dp) = pcen_backward(d, c)?;
                for (dst, src) in gp.tensors_mut().into_iter().zip(dp.tensors_mut()) {
                    for (a, b) in dst.iter_mut().zip(src.iter()) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(g)
    }

    fn recurrent_backward(
        &self,
        params: &Recurrent<T>,
        cache: &RecCache<T>,
        grad: Vec<Matrix<T>>,
        slot: &mut Recurrent<T>,
    ) -> Result<Vec<Matrix<T>>, ModelError> {
        let h = self.spec.hidden;
        match (params, cache, slot) {
            (Recurrent::Forward { gru, bn }, RecCache::Forward { input, bn: bn_c, rec }, Recurrent::Forward { gru: gg, bn: gbn }) => {
                let mut da = Vec::with_capacity(grad.len());
                for (d, c) in grad.iter().zip(rec) {
                    let (a, du, _) = gru_recurrence_backward(d, &gru.u, c);
                    gg.u.add_assign(&du);
                    da.push(a);
                }
                let da = back_bn(bn, bn_c, da, gbn)?;
                Ok(input
                    .iter()
                    .zip(&da)
                    .map(|(x, d)| affine_backward(x, &gru.w, d, &mut gg.w, &mut gg.b))
                    .collect())
            }
            (
                Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b },
                RecCache::Bidirectional { input, bn_f: cf, bn_b: cb, rec_f, rec_b },
                Recurrent::Bidirectional { fwd: gf, bwd: gb, bn_f: gbf, bn_b: gbb },
            ) => {
                let mut da_f = Vec::with_capacity(grad.len());
                let mut da_b = Vec::with_capacity(grad.len());
                for i in 0..grad.len() {
                    let (df, db) = grad[i].hsplit(h);
                    let (a, du, _) = gru_recurrence_backward(&df, &fwd.u, &rec_f[i]);
                    gf.u.add_assign(&du);
                    da_f.push(a);
                    let (a, du, _) = gru_recurrence_backward(&db, &bwd.u, &rec_b[i]);
                    gb.u.add_assign(&du);
                    da_b.push(a);
                }
                let da_f = back_bn(bn_f, cf, da_f, gbf)?;
                let da_b = back_bn(bn_b, cb, da_b, gbb)?;
                let mut dx: Vec<Matrix<T>> = input
                    .iter()
                    .zip(&da_f)
                    .map(|(x, d)| affine_backward(x, &fwd.w, d, &mut gf.w, &mut gf.b))
                    .collect();
                let dxb: Vec<Matrix<T>> = input
                    .iter()
                    .zip(&da_b)
                    .map(|(x, d)| affine_backward(x, &bwd.w, d, &mut gb.w, &mut gb.b))
                    .collect();
                add_all(&mut dx, &dxb);
                Ok(dx)
            }
            (
                Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b },
                RecCache::Chunked { input, cfg, bn_f: cf, bn_b: cb, chunks },
                Recurrent::Bidirectional { fwd: gf, bwd: gb, bn_f: gbf, bn_b: gbb },
            ) => {
                let mut da_f = Vec::with_capacity(grad.len());
                let mut da_b = Vec::with_capacity(grad.len());
                for (d, c) in grad.iter().zip(chunks) {
                    let (af, ab, duf, dub) = chunked_bidirectional_backward(d, &fwd.u, &bwd.u, cfg, c);
                    gf.u.add_assign(&duf);
                    gb.u.add_assign(&dub);
                    da_f.push(af);
                    da_b.push(ab);
                }
                let da_f = back_bn(bn_f, cf, da_f, gbf)?;
                let da_b = back_bn(bn_b, cb, da_b, gbb)?;
                let mut dx: Vec<Matrix<T>> = input
                    .iter()
                    .zip(&da_f)
                    .map(|(x, d)| affine_backward(x, &fwd.w, d, &mut gf.w, &mut gf.b))
                    .collect();
                let dxb: Vec<Matrix<T>> = input
                    .iter()
                    .zip(&da_b)
                    .map(|(x, d)| affine_backward(x, &bwd.w, d, &mut gb.w, &mut gb.b))
                    .collect();
                add_all(&mut dx, &dxb);
                Ok(dx)
            }
            (
                Recurrent::LatencyControlled { lc, bn },
                RecCache::Chunked { input, cfg, bn_f: c, chunks, .. },
                Recurrent::LatencyControlled { lc: gl, bn: gbn },
            ) => {
                let mut da = Vec::with_capacity(grad.len());
                for (d, ch) in grad.iter().zip(chunks) {
                    let (mut af, ab, duf, dub) = chunked_bidirectional_backward(d, &lc.u_f, &lc.u_b, cfg, ch);
                    gl.u_f.add_assign(&duf);
                    gl.u_b.add_assign(&dub);
                    af.add_assign(&ab);
                    da.push(af);
                }
                let da = back_bn(bn, c, da, gbn)?;
                Ok(input
                    .iter()
                    .zip(&da)
                    .map(|(x, d)| affine_backward(x, &lc.w, d, &mut gl.w, &mut gl.b))
                    .collect())
            }
            _ => Err(ModelError::InvalidSpec("recurrent cache does not match its parameters".into())),
        }
    }

    /// Eval-mode outputs for one utterance.
    pub fn infer(&self, power: &Matrix<T>) -> Result<StackOutput<T>, ModelError> {
        let out = self.forward(std::slice::from_ref(power), Mode::Eval)?;
        Ok(StackOutput {
            char_log_probs: out.char_log_probs.into_iter().next().expect("one utterance"),
            gram_log_probs: out.gram_log_probs.and_then(|g| g.into_iter().next()),
        })
    }

    /// Same weights in another numeric type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.spec.clone(), 0).expect("spec already validated");
        out.feature_stats = self.feature_stats.clone();
        let src = self.params.to_flat();
        out.params.set_flat(&src.iter().map(|v| U::lit(v.as_f64())).collect::<Vec<_>>());
        for (dst, (_, s)) in out.params.batch_norms_mut().into_iter().zip(self.params.batch_norms()) {
            dst.running_mean = s.running_mean.iter().map(|v| U::lit(v.as_f64())).collect();
            dst.running_var = s.running_var.iter().map(|v| U::lit(v.as_f64())).collect();
            dst.momentum = s.momentum;
        }
        out
    }

    /// Replaces the evaluation kind of full-BGRU slots with chunked context.
    pub fn with_chunked_bidirectional(&self, cfg: LcBgruConfig) -> Self {
        let mut m = self.clone();
        for k in &mut m.spec.recurrent {
            if *k == RecurrentKind::Bidirectional {
                *k = RecurrentKind::BidirectionalChunked(cfg);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;
    use crate::layers::Conv2dSpec;
    use crate::losses::{ctc_loss, GramSet};
    use crate::model::spec::{Preset, Scale};
    use crate::testutil::rng;
    use rand::Rng;

    fn alphabet() -> Alphabet {
        "ab".parse().unwrap()
    }

    fn tiny(kind: Vec<RecurrentKind>, frontend: FrontendKind, la: Option<usize>) -> ModelSpec {
        ModelSpec {
            frontend,
            n_bins: 6,
            convs: vec![Conv2dSpec::new(2, (3, 2), 1, (2, 2)), Conv2dSpec::new(2, (3, 2), 2, (1, 1))],
            recurrent: kind,
            hidden: 3,
            la_context: la,
            batch_norm: true,
            alphabet: alphabet(),
            grams: None,
        }
    }

    fn powers(r: &mut impl Rng, lens: &[usize], bins: usize) -> Vec<Matrix<f64>> {
        lens.iter()
            .map(|&t| Matrix::from_vec(t, bins, (0..t * bins).map(|_| r.random_range(0.05..1.0)).collect()))
            .collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let s = ModelSpec::preset(Preset::Proposed, Scale::Desk, 16, 41, alphabet());
        let a = Model::<f64>::new(s.clone(), 7).unwrap();
        let b = Model::<f64>::new(s.clone(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::<f64>::new(s, 8).unwrap());
    }

    #[test]
    fn lc_layer_has_fewer_parameters_than_bgru() {
        let mut s = ModelSpec::preset(Preset::Proposed, Scale::Desk, 16, 41, alphabet());
        s.recurrent = vec![RecurrentKind::LatencyControlled(LcBgruConfig { context: 30, step: 10 })];
        let lc = Model::<f64>::new(s.clone(), 0).unwrap().param_count();
        s.recurrent = vec![RecurrentKind::Bidirectional];
        let full = Model::<f64>::new(s.clone(), 0).unwrap().param_count();
        let d = s.recurrent_input_width().unwrap();
        let h = 16;
        // One 3H×D input affine, its bias and one 3H batch norm are shared.
        assert_eq!(full - lc, 3 * h * d + 3 * h + 2 * 3 * h);
    }

    #[test]
    fn output_rows_are_distributions_and_lengths_follow_stride() {
        let mut r = rng(1);
        let spec = tiny(vec![RecurrentKind::Forward], FrontendKind::Log, Some(2));
        let m = Model::<f64>::new(spec, 3).unwrap();
        let x = powers(&mut r, &[7], 6).remove(0);
        let out = m.infer(&x).unwrap();
        assert_eq!(out.char_log_probs.rows(), 4);
        for row in out.char_log_probs.iter_rows() {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut doubled = x.clone();
        for t in 0..x.rows() {
            doubled.push_row(x.row(t));
        }
        let y = powers(&mut r, &[8], 6).remove(0);
        assert_eq!(m.infer(&y).unwrap().char_log_probs.rows(), 4);
        let mut yy = y.clone();
        for t in 0..8 {
            yy.push_row(y.row(t));
        }
        assert_eq!(m.infer(&yy).unwrap().char_log_probs.rows(), 8);
        assert_eq!(m.infer(&doubled).unwrap().char_log_probs.rows(), 7);
    }

    #[test]
    fn bin_mismatch_is_rejected() {
        let m = Model::<f64>::new(tiny(vec![RecurrentKind::Forward], FrontendKind::Log, None), 0).unwrap();
        assert!(matches!(
            m.infer(&Matrix::zeros(4, 5)),
            Err(ModelError::FeatureShape { got: 5, expected: 6 })
        ));
    }

    fn loss_of(m: &Model<f64>, xs: &[Matrix<f64>], w: &[Matrix<f64>], wg: Option<&[Matrix<f64>]>, mode: Mode) -> f64 {
        let out = m.forward(xs, mode).unwrap();
        let mut s = 0.0;
        for (lp, wi) in out.char_log_probs.iter().zip(w) {
            s += lp.as_slice().iter().zip(wi.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        }
        if let (Some(g), Some(wg)) = (out.gram_log_probs, wg) {
            for (lp, wi) in g.iter().zip(wg) {
                s += lp.as_slice().iter().zip(wi.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    }

    fn check_model_gradients(spec: ModelSpec, mode: Mode) {
        let mut r = rng(2);
        let mut m = Model::<f64>::new(spec, 5).unwrap();
        // Zero-initialised biases put ReLU inputs exactly on the kink; move off it.
        let jittered: Vec<f64> = m.params.to_flat().iter().map(|v| v + r.random_range(-0.05..0.05)).collect();
        m.params.set_flat(&jittered);
        let xs = powers(&mut r, &[7, 5], 6);
        let out = m.forward(&xs, mode).unwrap();
        let w: Vec<Matrix<f64>> =
            out.char_log_probs.iter().map(|lp| Matrix::uniform(lp.rows(), lp.cols(), 1.0, &mut r)).collect();
        let wg: Option<Vec<Matrix<f64>>> = out
            .gram_log_probs
            .as_ref()
            .map(|g| g.iter().map(|lp| Matrix::uniform(lp.rows(), lp.cols(), 1.0, &mut r)).collect());
        let grads = m.backward(&out.cache, &w, wg.as_deref()).unwrap();
        let analytic = grads.to_flat();
        let flat = m.params.to_flat();
        // Jacobian-vector product along a random direction.
        let dir: Vec<f64> = (0..flat.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        // Small step: ReLU kinks sit close to some pre-activations.
        let eps = 1e-7;
        let shifted = |s: f64| {
            let mut q = m.clone();
            let p: Vec<f64> = flat.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            q.params.set_flat(&p);
            loss_of(&q, &xs, &w, wg.as_deref(), mode)
        };
        let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let jvp: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let rel = (jvp - numeric).abs() / jvp.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "jvp {jvp} vs numeric {numeric}");
        // A few coordinates individually, including a PCEN or first-conv one.
        for &i in &[0usize, 1, flat.len() / 3, flat.len() / 2, flat.len() - 1] {
            let f = |s: f64| {
                let mut q = m.clone();
                let mut p = flat.clone();
                p[i] += s;
                q.params.set_flat(&p);
                loss_of(&q, &xs, &w, wg.as_deref(), mode)
            };
            let num = (f(eps) - f(-eps)) / (2.0 * eps);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: {} vs {num}", analytic[i]);
        }
    }

    #[test]
    fn forward_stack_gradients() {
        check_model_gradients(tiny(vec![RecurrentKind::Forward, RecurrentKind::Forward], FrontendKind::Log, Some(2)), Mode::Train);
    }

    #[test]
    fn pcen_lc_stack_gradients_with_gram_head() {
        let lc = RecurrentKind::LatencyControlled(LcBgruConfig { context: 3, step: 2 });
        let mut s = tiny(vec![RecurrentKind::Forward, lc], FrontendKind::Pcen, None);
        s.grams = Some(GramSet::new(alphabet(), vec!["a".into(), "b".into(), "ab".into()]).unwrap());
        check_model_gradients(s, Mode::Train);
    }

    #[test]
    fn bidirectional_stack_gradients() {
        check_model_gradients(tiny(vec![RecurrentKind::Bidirectional], FrontendKind::Log, None), Mode::Train);
        let ch = RecurrentKind::BidirectionalChunked(LcBgruConfig { context: 2, step: 1 });
        check_model_gradients(tiny(vec![ch], FrontendKind::Log, None), Mode::Eval);
    }

    #[test]
    fn ctc_training_signal_flows_end_to_end() {
        let mut r = rng(3);
        let m = Model::<f64>::new(tiny(vec![RecurrentKind::Forward], FrontendKind::Pcen, None), 1).unwrap();
        let xs = powers(&mut r, &[9], 6);
        let out = m.forward(&xs, Mode::Train).unwrap();
        let (_, g) = ctc_loss(&out.char_log_probs[0], &[1, 2]).unwrap();
        let grads = m.backward(&out.cache, &[g], None).unwrap();
        assert!(grads.to_flat().iter().all(|v| v.is_finite()));
        assert!(grads.pcen.unwrap().log_alpha.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn future_frames_beyond_lookahead_do_not_matter() {
        let lc = RecurrentKind::LatencyControlled(LcBgruConfig { context: 3, step: 2 });
        let spec = tiny(vec![RecurrentKind::Forward, lc, lc], FrontendKind::Pcen, Some(2));
        let worst = match crate::model::lookahead_frames(&spec) {
            crate::model::Lookahead::Bounded { worst_case, .. } => worst_case,
            crate::model::Lookahead::Unbounded => unreachable!(),
        };
        let m = Model::<f64>::new(spec, 9).unwrap();
        let mut r = rng(4);
        let x = powers(&mut r, &[40], 6).remove(0);
        let base = m.infer(&x).unwrap().char_log_probs;
        let stride = m.spec.time_stride();
        for t in 0..base.rows() {
            let first_free = (t + worst) * stride + 1;
            if first_free >= x.rows() {
                continue;
            }
            let mut y = x.clone();
            for u in first_free..x.rows() {
                for f in 0..6 {
                    y[(u, f)] = r.random_range(0.05..1.0);
                }
            }
            let out = m.infer(&y).unwrap().char_log_probs;
            for u in 0..=t {
                assert_eq!(out.row(u), base.row(u), "frame {u} changed by input past {first_free}");
            }
        }
    }

    #[test]
    fn cast_round_trip_through_f32_is_exact_for_f32_models() {
        let m = Model::<f32>::new(tiny(vec![RecurrentKind::Forward], FrontendKind::Log, None), 2).unwrap();
        let back: Model<f32> = m.cast::<f64>().cast::<f32>();
        assert_eq!(back, m);
    }
}
