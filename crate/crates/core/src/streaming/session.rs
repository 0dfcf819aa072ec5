use std::collections::VecDeque;
use std::sync::Arc;

use super::StreamError;
use crate::decoder::greedy_decode;
use crate::frontend::{pcm16_to_f64, PcenChannels, PcenState, SpectrogramConfig, SpectrogramExtractor};
use crate::layers::{conv2d_frame, gru_recurrence, gru_step, la_conv_frame, log_softmax_row, Direction, LcBgruConfig};
use crate::model::{lookahead_frames, Lookahead, Model, ModelError, Recurrent, RecurrentKind};
use crate::scalar::Scalar;
use crate::tensor::{affine_into, Matrix};

/// One unit of audio on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub stream_id: u32,
    pub seq: u32,
    pub samples: Vec<i16>,
    pub is_final: bool,
}

/// Splits PCM16 audio into packets of `packet_samples`; the last one is
/// marked final (an empty final packet for empty audio).
pub fn packetize(stream_id: u32, pcm: &[i16], packet_samples: usize) -> Vec<Packet> {
    let n = packet_samples.max(1);
    let mut out: Vec<Packet> = pcm
        .chunks(n)
        .enumerate()
        .map(|(i, c)| Packet {
            stream_id,
            seq: i as u32,
            samples: c.to_vec(),
            is_final: false,
        })
        .collect();
    match out.last_mut() {
        Some(p) => p.is_final = true,
        None => out.push(Packet {
            stream_id,
            seq: 0,
            samples: Vec::new(),
            is_final: true,
        }),
    }
    out
}

/// Output of one `feed` call.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedOutput<T> {
    /// Character log-probabilities of the newly emitted frames only.
    pub char_log_probs: Matrix<T>,
    /// Greedy decode of every frame emitted so far.
    pub partial: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalOutput<T> {
    pub transcript: String,
    pub char_log_probs: Matrix<T>,
    pub gram_log_probs: Option<Matrix<T>>,
}

struct ConvStage<T> {
    /// Last `time_taps` input frames.
    hist: VecDeque<Vec<T>>,
    n_in: usize,
    in_freq: usize,
    out_width: usize,
}

struct RecStage<T> {
    h: Vec<T>,
    /// Forward states and backward pre-gates awaiting chunk completion.
    pending_hf: VecDeque<Vec<T>>,
    pending_ab: VecDeque<Vec<T>>,
}

struct LaStage<T> {
    buf: VecDeque<Vec<T>>,
}

enum Stage<T> {
    Conv(ConvStage<T>),
    Rec(RecStage<T>),
    La(LaStage<T>),
}

fn affine_row<T: Scalar>(w: &Matrix<T>, b: &[T], x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); w.rows()];
    affine_into(w, b, x, &mut out);
    out
}

fn chunk_cfg(kind: &RecurrentKind) -> Option<LcBgruConfig> {
    match kind {
        RecurrentKind::LatencyControlled(c) | RecurrentKind::BidirectionalChunked(c) => Some(*c),
        _ => None,
    }
}

/// Incremental inference state for one audio stream. Emitted frames are
/// final: later input never revises them.
pub struct StreamSession<T: Scalar> {
    model: Arc<Model<T>>,
    stream_id: u32,
    extractor: SpectrogramExtractor<T>,
    /// Samples from absolute index `consumed` onward.
    samples: Vec<f64>,
    consumed: usize,
    frames: usize,
    pcen: Option<(PcenChannels<T>, PcenState<T>)>,
    stages: Vec<Stage<T>>,
    next_seq: u32,
    ended: bool,
    finalized: bool,
    post_conv: usize,
    char_lp: Matrix<T>,
    gram_lp: Option<Matrix<T>>,
    work: u64,
}

impl<T: Scalar> StreamSession<T> {
    /// Fails with [`StreamError::NotStreamable`] for unbounded lookahead.
    pub fn open(
        model: Arc<Model<T>>,
        stream_id: u32,
        spectrogram: SpectrogramConfig,
        sample_rate: u32,
    ) -> Result<Self, StreamError> {
        if lookahead_frames(&model.spec) == Lookahead::Unbounded {
            return Err(StreamError::NotStreamable);
        }
        if spectrogram.n_bins != model.spec.n_bins {
            return Err(ModelError::FeatureShape {
                got: spectrogram.n_bins,
                expected: model.spec.n_bins,
            }
            .into());
        }
        let extractor = SpectrogramExtractor::new(spectrogram, sample_rate)?;
        let geometry = model.spec.conv_geometry()?;
        let mut stages = Vec::new();
        for w in geometry.windows(2) {
            stages.push(Stage::Conv(ConvStage {
                hist: VecDeque::new(),
                n_in: 0,
                in_freq: w[0].0,
                out_width: w[1].0 * w[1].1,
            }));
        }
        let h = model.spec.hidden;
        for _ in &model.spec.recurrent {
            stages.push(Stage::Rec(RecStage {
                h: vec![T::zero(); h],
                pending_hf: VecDeque::new(),
                pending_ab: VecDeque::new(),
            }));
        }
        if model.spec.la_context.is_some() {
            stages.push(Stage::La(LaStage { buf: VecDeque::new() }));
        }
        let pcen = model.params.pcen.as_ref().map(|p| (p.channels(), PcenState::default()));
        let v = model.spec.alphabet.output_size();
        let gram_lp = model.params.gram_head.as_ref().map(|g| Matrix::zeros(0, g.outputs()));
        Ok(Self {
            model,
            stream_id,
            extractor,
            samples: Vec::new(),
            consumed: 0,
            frames: 0,
            pcen,
            stages,
            next_seq: 0,
            ended: false,
            finalized: false,
            post_conv: 0,
            char_lp: Matrix::zeros(0, v),
            gram_lp,
            work: 0,
        })
    }

    pub fn stream_id(&self) -> u32 {
        self.stream_id
    }

    /// Post-convolution frames received by the recurrent stack but not yet emitted.
    pub fn pending_frames(&self) -> usize {
        self.post_conv - self.char_lp.rows()
    }

    pub fn emitted_frames(&self) -> usize {
        self.char_lp.rows()
    }

    /// Multiply-adds performed so far, a deterministic cost measure.
    pub fn work(&self) -> u64 {
        self.work
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// True once a packet flagged final has been fed.
    pub fn has_ended(&self) -> bool {
        self.ended
    }

    pub fn emitted_log_probs(&self) -> &Matrix<T> {
        &self.char_lp
    }

    /// Greedy decode of every frame emitted so far.
    pub fn partial(&self) -> String {
        greedy_decode(&self.char_lp, &self.model.spec.alphabet)
    }

    /// Accepts the next packet in sequence.
    pub fn feed(&mut self, packet: &Packet) -> Result<FeedOutput<T>, StreamError> {
        if self.finalized || self.ended {
            return Err(StreamError::Finalized);
        }
        if packet.stream_id != self.stream_id {
            return Err(StreamError::WrongStream {
                expected: self.stream_id,
                got: packet.stream_id,
            });
        }
        if packet.seq != self.next_seq {
            return Err(StreamError::PacketLoss {
                stream_id: self.stream_id,
                expected: self.next_seq,
                got: packet.seq,
            });
        }
        self.next_seq += 1;
        let samples: Vec<f64> = packet.samples.iter().map(|&s| pcm16_to_f64(s)).collect();
        let out = self.push_audio(&samples)?;
        self.ended = packet.is_final;
        Ok(out)
    }

    /// Feeds raw samples outside the packet sequence.
    pub fn push_audio(&mut self, samples: &[f64]) -> Result<FeedOutput<T>, StreamError> {
        if self.finalized {
            return Err(StreamError::Finalized);
        }
        let before = self.char_lp.rows();
        self.samples.extend_from_slice(samples);
        let (w, hop) = (self.extractor.window_len(), self.extractor.hop_len());
        let n_bins = self.model.spec.n_bins;
        let fft = self.extractor.config().fft_len();
        let mut rows = Vec::new();
        while (self.frames * hop + w) - self.consumed <= self.samples.len() {
            let start = self.frames * hop - self.consumed;
            let mut p = vec![T::zero(); n_bins];
            self.extractor.frame_power(&self.samples[start..start + w], &mut p);
            self.work += (fft * (usize::BITS - fft.leading_zeros()) as usize) as u64 + w as u64;
            let mut x = vec![T::zero(); n_bins];
            match &mut self.pcen {
                Some((ch, st)) => ch.step(&p, st, &mut x),
                None => {
                    x.copy_from_slice(&p);
                    self.model.log_features_row(&mut x);
                }
            }
            self.work += 4 * n_bins as u64;
            rows.push(x);
            self.frames += 1;
            let drop = (self.frames * hop).saturating_sub(self.consumed).min(self.samples.len());
            self.samples.drain(..drop);
            self.consumed += drop;
        }
        self.run(rows, false);
        Ok(FeedOutput {
            char_log_probs: self.tail_from(before),
            partial: self.partial(),
        })
    }

    /// Flushes every pending frame and returns the full transcript.
    pub fn finalize(&mut self) -> Result<FinalOutput<T>, StreamError> {
        if self.finalized {
            return Err(StreamError::Finalized);
        }
        self.run(Vec::new(), true);
        self.finalized = true;
        Ok(FinalOutput {
            transcript: self.partial(),
            char_log_probs: self.char_lp.clone(),
            gram_log_probs: self.gram_lp.clone(),
        })
    }

    fn tail_from(&self, start: usize) -> Matrix<T> {
        let c = self.char_lp.cols();
        Matrix::from_vec(
            self.char_lp.rows() - start,
            c,
            self.char_lp.as_slice()[start * c..].to_vec(),
        )
    }

    fn run(&mut self, mut rows: Vec<Vec<T>>, flush: bool) {
        let model = Arc::clone(&self.model);
        let n_conv = model.spec.convs.len();
        for i in 0..self.stages.len() {
            if i == n_conv {
                self.post_conv += rows.len();
            }
            let mut out = Vec::new();
            let stage = &mut self.stages[i];
            for r in rows {
                push(&model, stage, i, r, &mut out, &mut self.work);
            }
            if flush {
                flush_stage(&model, stage, i, &mut out, &mut self.work);
            }
            rows = out;
        }
        let p = &model.params;
        for x in rows {
            let mut f = affine_row(&p.fc.weight, &p.fc.bias, &x);
            for v in &mut f {
                *v = v.max(T::zero());
            }
            self.work += (p.fc.weight.rows() * p.fc.weight.cols()) as u64;
            let z = affine_row(&p.char_head.weight, &p.char_head.bias, &f);
            let mut lp = vec![T::zero(); z.len()];
            log_softmax_row(&z, &mut lp);
            self.char_lp.push_row(&lp);
            self.work += (p.char_head.weight.rows() * p.char_head.weight.cols()) as u64;
            if let (Some(g), Some(glp)) = (&p.gram_head, &mut self.gram_lp) {
                let z = affine_row(&g.weight, &g.bias, &f);
                let mut lp = vec![T::zero(); z.len()];
                log_softmax_row(&z, &mut lp);
                glp.push_row(&lp);
                self.work += (g.weight.rows() * g.weight.cols()) as u64;
            }
        }
    }
}

fn push<T: Scalar>(model: &Model<T>, stage: &mut Stage<T>, idx: usize, row: Vec<T>, out: &mut Vec<Vec<T>>, work: &mut u64) {
    let n_conv = model.spec.convs.len();
    match stage {
        Stage::Conv(s) => {
            let spec = &model.spec.convs[idx];
            let block = &model.params.convs[idx];
            let (_, kt) = spec.kernel;
            s.hist.push_back(row);
            if s.hist.len() > kt {
                s.hist.pop_front();
            }
            let t = s.n_in;
            s.n_in += 1;
            if t % spec.stride.1 != 0 {
                return;
            }
            let base = (t + 1 - s.hist.len()) as isize;
            let hist = &s.hist;
            let mut y = vec![T::zero(); s.out_width];
            conv2d_frame(
                spec,
                &block.conv,
                s.in_freq,
                t / spec.stride.1,
                |i| (i >= base && i <= t as isize).then(|| hist[(i - base) as usize].as_slice()),
                &mut y,
            );
            *work += (s.out_width * spec.taps()) as u64;
            if let Some(bn) = &block.bn {
                let mut tmp = vec![T::zero(); spec.filters];
                for ch in y.chunks_mut(spec.filters) {
                    bn.eval_row(ch, &mut tmp);
                    ch.copy_from_slice(&tmp);
                }
            }
            for v in &mut y {
                *v = v.max(T::zero());
            }
            out.push(y);
        }
        Stage::Rec(s) => {
            let r = idx - n_conv;
            let kind = &model.spec.recurrent[r];
            let normed = |bn: &Option<crate::layers::BatchNorm<T>>, a: Vec<T>| match bn {
                Some(bn) => {
                    let mut o = vec![T::zero(); a.len()];
                    bn.eval_row(&a, &mut o);
                    o
                }
                None => a,
            };
            let step = |h: &mut Vec<T>, a: &[T], u: &Matrix<T>, work: &mut u64| {
                let mut next = vec![T::zero(); h.len()];
                gru_step(a, h, u, &mut next);
                *work += (u.rows() * u.cols()) as u64;
                *h = next;
            };
            match &model.params.recurrent[r] {
                Recurrent::Forward { gru, bn } => {
                    let a = normed(bn, affine_row(&gru.w, &gru.b, &row));
                    *work += (gru.w.rows() * gru.w.cols()) as u64;
                    step(&mut s.h, &a, &gru.u, work);
                    out.push(s.h.clone());
                }
                Recurrent::LatencyControlled { lc, bn } => {
                    let a = normed(bn, affine_row(&lc.w, &lc.b, &row));
                    *work += (lc.w.rows() * lc.w.cols()) as u64;
                    step(&mut s.h, &a, &lc.u_f, work);
                    s.pending_hf.push_back(s.h.clone());
                    s.pending_ab.push_back(a);
                    let cfg = chunk_cfg(kind).expect("chunked kind");
                    if s.pending_ab.len() == cfg.context {
                        run_chunk(s, &lc.u_b, &cfg, out, work);
                    }
                }
                Recurrent::Bidirectional { fwd, bwd, bn_f, bn_b } => {
                    let cfg = chunk_cfg(kind).expect("streamable specs have bounded context");
                    let a_f = normed(bn_f, affine_row(&fwd.w, &fwd.b, &row));
                    let a_b = normed(bn_b, affine_row(&bwd.w, &bwd.b, &row));
                    *work += 2 * (fwd.w.rows() * fwd.w.cols()) as u64;
                    step(&mut s.h, &a_f, &fwd.u, work);
                    s.pending_hf.push_back(s.h.clone());
                    s.pending_ab.push_back(a_b);
                    if s.pending_ab.len() == cfg.context {
                        run_chunk(s, &bwd.u, &cfg, out, work);
                    }
                }
            }
        }
        Stage::La(s) => {
            let la = model.params.la.as_ref().expect("lookahead params");
            s.buf.push_back(row);
            if s.buf.len() == la.context() + 1 {
                emit_la(s, la, out, work);
            }
        }
    }
}

fn flush_stage<T: Scalar>(model: &Model<T>, stage: &mut Stage<T>, idx: usize, out: &mut Vec<Vec<T>>, work: &mut u64) {
    match stage {
        Stage::Conv(_) => {}
        Stage::Rec(s) => {
            let r = idx - model.spec.convs.len();
            let Some(cfg) = chunk_cfg(&model.spec.recurrent[r]) else { return };
            let u_b = match &model.params.recurrent[r] {
                Recurrent::LatencyControlled { lc, .. } => &lc.u_b,
                Recurrent::Bidirectional { bwd, .. } => &bwd.u,
                Recurrent::Forward { .. } => return,
            };
            while !s.pending_ab.is_empty() {
                run_chunk(s, u_b, &cfg, out, work);
            }
        }
        Stage::La(s) => {
            let la = model.params.la.as_ref().expect("lookahead params");
            while !s.buf.is_empty() {
                emit_la(s, la, out, work);
            }
        }
    }
}

/// Backward pass over the first `min(c_W, pending)` frames from zero state;
/// emits and drops the first `c_S`.
fn run_chunk<T: Scalar>(s: &mut RecStage<T>, u_b: &Matrix<T>, cfg: &LcBgruConfig, out: &mut Vec<Vec<T>>, work: &mut u64) {
    let len = cfg.context.min(s.pending_ab.len());
    let rows: Vec<Vec<T>> = s.pending_ab.iter().take(len).cloned().collect();
    let (hb, _) = gru_recurrence(&Matrix::from_rows(&rows), u_b, Direction::Backward, &vec![T::zero(); u_b.cols()]);
    *work += (len * u_b.rows() * u_b.cols()) as u64;
    for k in 0..cfg.step.min(len) {
        let mut y = s.pending_hf.pop_front().expect("pending state");
        s.pending_ab.pop_front();
        y.extend_from_slice(hb.row(k));
        out.push(y);
    }
}

fn emit_la<T: Scalar>(s: &mut LaStage<T>, la: &crate::layers::LaConvParams<T>, out: &mut Vec<Vec<T>>, work: &mut u64) {
    let mut y = vec![T::zero(); la.features()];
    let buf = &s.buf;
    la_conv_frame(la, |j| buf.get(j).map(Vec::as_slice), &mut y);
    *work += (la.context() * la.features()) as u64;
    s.buf.pop_front();
    out.push(y);
}

/// Whole-utterance streaming in packets of `packet_samples` raw samples.
pub fn stream_utterance<T: Scalar>(
    model: Arc<Model<T>>,
    samples: &[f64],
    packet_samples: usize,
    spectrogram: SpectrogramConfig,
    sample_rate: u32,
) -> Result<FinalOutput<T>, StreamError> {
    let mut s = StreamSession::open(model, 0, spectrogram, sample_rate)?;
    for c in samples.chunks(packet_samples.max(1)) {
        s.push_audio(c)?;
    }
    s.finalize()
}
