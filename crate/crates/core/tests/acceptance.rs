//! Acceptance suite. Every test prints one `PASS`/`FAIL` line, then asserts.
//! Tests share a lock so timing-sensitive checks never overlap.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deskasr::alphabet::{Alphabet, BLANK};
use deskasr::decoder::{beam_search, beam_search_decode, greedy_decode, train_char_lm, BeamConfig, CharLm};
use deskasr::frontend::{
    compute_power_spectrogram, log_compress, pcen_forward, AudioUtterance, PcenInit, PcenParams, Spectrogram,
};
use deskasr::harness::{
    edit_distance, gen_synthetic_dataset, synth_spectrogram_config, SynthConfig, SYNTH_BINS, SYNTH_SAMPLE_RATE,
};
use deskasr::layers::{bgru, lc_bgru, log_softmax, run_bgru_as_lc_bgru, GruParams, LcBgruConfig, LcBgruParams};
use deskasr::losses::{alignment_xcorr, build_gram_lattice, ctc_loss, gramctc_loss, Alignment, GramSet};
use deskasr::model::{
    load_checkpoint_as, save_checkpoint, CheckpointMeta, Model, ModelSpec, Preset, RecurrentKind, Scale,
};
use deskasr::streaming::{bench, stream_utterance, BenchConfig, Clock, Transport};
use deskasr::tensor::Matrix;
use deskasr::trainer::{
    evaluate, grad_check_all, grad_check_with_fault, reference_alignments, train, DecodeHead, LossSchedule, TrainConfig,
    TrainData, COMPONENTS, DEFAULT_EPS,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn verdict(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_lp(r: &mut impl Rng, t: usize, v: usize) -> Matrix<f64> {
    log_softmax(&Matrix::uniform(t, v, 2.0, r))
}

/// Calls `f` on every length-`t` sequence over `0..v`.
fn for_each_path(t: usize, v: usize, mut f: impl FnMut(&[usize])) {
    let mut p = vec![0usize; t];
    loop {
        f(&p);
        let mut i = 0;
        loop {
            if i == t {
                return;
            }
            p[i] += 1;
            if p[i] < v {
                break;
            }
            p[i] = 0;
            i += 1;
        }
    }
}

/// Merge runs, then drop blanks.
fn collapse_tokens(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn path_prob(lp: &Matrix<f64>, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &k)| lp[(t, k)]).sum::<f64>().exp()
}

fn small_alphabet(size: usize) -> Alphabet {
    Alphabet::new("abc".chars().take(size)).unwrap()
}

#[test]
fn ctc_matches_brute_force_path_sum() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 200 {
        let chars = r.random_range(1..=3);
        let t = r.random_range(1..=6);
        let l = r.random_range(1..=3);
        let label: Vec<usize> = (0..l).map(|_| r.random_range(1..=chars)).collect();
        let lp = random_lp(&mut r, t, chars + 1);
        let mut p = 0.0;
        for_each_path(t, chars + 1, |path| {
            if collapse_tokens(path) == label {
                p += path_prob(&lp, path);
            }
        });
        if p == 0.0 {
            // Infeasible instance; the DP must refuse it.
            assert!(ctc_loss(&lp, &label).is_err());
            continue;
        }
        let (nll, _) = ctc_loss(&lp, &label).unwrap();
        worst = worst.max((nll - (-p.ln())).abs());
        n += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "ctc_brute_force",
        worst < 1e-9 && secs < 30.0,
        format!("200 instances, max |Δloss| {worst:.2e}, {secs:.2} s"),
    );
}

#[test]
fn gramctc_with_unigrams_is_ctc() {
    let _g = serial();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = small_alphabet(r.random_range(1..=3));
        let l = r.random_range(1..=4);
        let label: Vec<usize> = (0..l).map(|_| r.random_range(1..=a.len())).collect();
        let t = r.random_range(2 * l..=2 * l + 6);
        let lp = random_lp(&mut r, t, a.output_size());
        let text = a.decode(&label);
        let lat = build_gram_lattice(&text, &GramSet::unigrams(a.clone())).unwrap();
        let (g, _) = gramctc_loss(&lp, &lat).unwrap();
        let (c, _) = ctc_loss(&lp, &label).unwrap();
        worst = worst.max((g - c).abs());
    }
    verdict("gramctc_unigram_reduction", worst < 1e-9, format!("200 instances, max |Δ| {worst:.2e}"));
}

/// Every gram over `a` of length ≤ 3 that occurs in `label`, plus all unigrams,
/// plus a few random distractors.
fn random_gram_set(r: &mut impl Rng, a: &Alphabet, label: &str) -> GramSet {
    let chars: Vec<char> = label.chars().collect();
    let mut grams: Vec<String> = a.chars().iter().map(|c| c.to_string()).collect();
    let mut extra: Vec<String> = Vec::new();
    for n in 2..=3 {
        for w in chars.windows(n) {
            extra.push(w.iter().collect());
        }
        let d: String = (0..n).map(|_| a.chars()[r.random_range(0..a.len())]).collect();
        extra.push(d);
    }
    for g in extra {
        if !grams.contains(&g) && r.random_bool(0.7) {
            grams.push(g);
        }
    }
    grams.truncate(6);
    GramSet::new(a.clone(), grams).unwrap()
}

#[test]
fn gramctc_matches_decomposition_alignment_enumeration() {
    let _g = serial();
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut multi = 0;
    let mut n = 0;
    while n < 100 {
        let a = small_alphabet(r.random_range(1..=3));
        let l = r.random_range(1..=4);
        let label: String = (0..l).map(|_| a.chars()[r.random_range(0..a.len())]).collect();
        let g = random_gram_set(&mut r, &a, &label);
        let t = r.random_range(1..=6);
        let lp = random_lp(&mut r, t, g.output_size());
        // Each path names one decomposition (its collapsed gram sequence) and
        // one alignment of it; keep those that spell the label.
        let mut p = 0.0;
        for_each_path(t, g.output_size(), |path| {
            let spelled: String = collapse_tokens(path).iter().map(|&k| g.gram(k).unwrap()).collect();
            if spelled == label {
                p += path_prob(&lp, path);
            }
        });
        let lat = build_gram_lattice(&label, &g).unwrap();
        match gramctc_loss(&lp, &lat) {
            Ok((nll, _)) => {
                assert!(p > 0.0);
                worst = worst.max((nll - (-p.ln())).abs());
                multi += usize::from(g.max_len() > 1);
                n += 1;
            }
            Err(_) => assert_eq!(p, 0.0, "DP refused a feasible instance"),
        }
    }
    verdict(
        "gramctc_brute_force",
        worst < 1e-9 && multi > 50,
        format!("100 instances ({multi} with multi-char grams), max |Δloss| {worst:.2e}"),
    );
}

#[test]
fn gradient_suite_and_fault_injection() {
    let _g = serial();
    let reports = grad_check_all(7, DEFAULT_EPS);
    let required = [
        "pcen", "conv2d", "batchnorm", "gru", "bgru", "lc_bgru", "la_conv", "fc", "softmax", "ctc", "gramctc", "ce",
    ];
    let covered = required.iter().all(|c| reports.iter().any(|r| r.component == *c));
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.passes(1e-4))
        .map(|r| format!("{}={:.1e}", r.component, r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let undetected: Vec<&str> = COMPONENTS
        .iter()
        .copied()
        .filter(|c| grad_check_with_fault(c, 7, DEFAULT_EPS, 0.01).unwrap().passes(1e-4))
        .collect();
    verdict(
        "gradient_suite",
        covered && failing.is_empty() && undetected.is_empty(),
        format!(
            "{} components, worst rel err {worst:.2e}, failing {failing:?}, 1% fault undetected in {undetected:?}",
            reports.len()
        ),
    );
}

#[test]
fn lc_bgru_with_full_chunk_is_bgru() {
    let _g = serial();
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (d, h, t) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..25));
        let x = Matrix::<f64>::uniform(t, d, 1.0, &mut r);
        let fwd = GruParams::<f64>::init(d, h, &mut r);
        let mut bwd = GruParams::<f64>::init(d, h, &mut r);
        let cfg = LcBgruConfig::new(t, t).unwrap();
        let (full, _) = bgru(&x, &fwd, &bwd);
        worst = worst.max(run_bgru_as_lc_bgru(&x, &fwd, &bwd, &cfg).max_abs_diff(&full));
        // The layer itself shares its input projection between directions.
        bwd.w = fwd.w.clone();
        bwd.b = fwd.b.clone();
        let p = LcBgruParams {
            w: fwd.w.clone(),
            b: fwd.b.clone(),
            u_f: fwd.u.clone(),
            u_b: bwd.u.clone(),
        };
        let (full, _) = bgru(&x, &fwd, &bwd);
        worst = worst.max(lc_bgru(&x, &p, &cfg).0.max_abs_diff(&full));
    }
    verdict("lc_bgru_degeneration", worst < 1e-12, format!("50 cases, max |Δ| {worst:.2e}"));
}

fn synth(seed: u64, n: usize) -> Vec<AudioUtterance> {
    gen_synthetic_dataset(&SynthConfig {
        seed,
        train: 0,
        holdout: n,
        ..SynthConfig::default()
    })
    .unwrap()
    .holdout
}

fn synth_alphabet() -> Alphabet {
    SynthConfig::default().alphabet
}

fn power(u: &AudioUtterance) -> Matrix<f64> {
    compute_power_spectrogram::<f64>(u, &synth_spectrogram_config()).unwrap().values
}

#[test]
fn streaming_matches_offline() {
    let _g = serial();
    let sr = SYNTH_SAMPLE_RATE as usize;
    let models: Vec<Arc<Model<f64>>> = [Preset::Proposed, Preset::Baseline]
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let spec = ModelSpec::preset(p, Scale::Desk, 24, SYNTH_BINS, synth_alphabet());
            let mut m = Model::<f64>::new(spec, 40 + i as u64).unwrap();
            let train: Vec<Matrix<f64>> = synth(99, 8).iter().map(power).collect();
            m.fit_feature_stats(train.iter());
            Arc::new(m)
        })
        .collect();
    let (mut worst, mut mismatched, mut runs) = (0.0f64, 0, 0);
    for (i, u) in synth(6, 50).iter().enumerate() {
        let m = &models[i % models.len()];
        let offline = m.infer(&power(u)).unwrap().char_log_probs;
        let want = greedy_decode(&offline, &m.spec.alphabet);
        for packet in [sr / 50, sr / 10, sr / 2, u.samples.len().max(1)] {
            let s = stream_utterance(Arc::clone(m), &u.samples, packet, synth_spectrogram_config(), SYNTH_SAMPLE_RATE)
                .unwrap();
            assert_eq!(s.char_log_probs.shape(), offline.shape());
            worst = worst.max(s.char_log_probs.max_abs_diff(&offline));
            mismatched += usize::from(s.transcript != want);
            runs += 1;
        }
    }
    verdict(
        "streaming_equivalence",
        worst < 1e-6 && mismatched == 0,
        format!("{runs} streamed runs, max |Δlogp| {worst:.2e}, {mismatched} transcript mismatches"),
    );
}

fn mean_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum();
    s / a.as_slice().len() as f64
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[test]
fn chunked_bgru_divergence_shrinks_with_context() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let contexts = [4usize, 16, 64];
    let models = 20;
    let mut means = [0.0f64; 3];
    let mut ordered = 0;
    for seed in 0..models {
        let spec = ModelSpec::preset(Preset::Bidirectional, Scale::Desk, 24, SYNTH_BINS, synth_alphabet());
        let m = Model::<f64>::new(spec.clone(), 100 + seed).unwrap();
        let path = dir.path().join(format!("bgru{seed}.ckpt"));
        save_checkpoint(&m, &CheckpointMeta::default(), &path).unwrap();
        // Long input: several utterances back to back.
        let us = synth(200 + seed, 4);
        let joined = AudioUtterance::new(us.iter().flat_map(|u| u.samples.iter().copied()).collect(), SYNTH_SAMPLE_RATE)
            .unwrap();
        let x = power(&joined);
        let full = m.infer(&x).unwrap().char_log_probs;
        let mut d = [0.0; 3];
        for (k, &cw) in contexts.iter().enumerate() {
            let mut req = spec.clone();
            let cfg = LcBgruConfig::new(cw, cw / 2).unwrap();
            req.recurrent = vec![RecurrentKind::LatencyControlled(cfg); req.recurrent.len()];
            let (lc, _, _) = load_checkpoint_as::<f64>(&path, &req).unwrap();
            d[k] = mean_abs_diff(&lc.infer(&x).unwrap().char_log_probs, &full);
            means[k] += d[k] / models as f64;
        }
        ordered += usize::from(d[0] > d[1] && d[1] > d[2]);
    }
    let p = sign_test_p(ordered, models as usize);
    verdict(
        "chunked_bgru_divergence",
        means[0] > means[1] && means[1] > means[2] && p < 0.05,
        format!(
            "mean divergence c_W=4/16/64: {:.3e}/{:.3e}/{:.3e}; monotone in {ordered}/{models} models, sign-test p {p:.1e}",
            means[0], means[1], means[2]
        ),
    );
}

fn lc_stack_spec(layers: usize, width: usize) -> ModelSpec {
    let mut s = ModelSpec::preset(Preset::Proposed, Scale::Desk, width, SYNTH_BINS, synth_alphabet());
    s.recurrent = vec![RecurrentKind::LatencyControlled(LcBgruConfig::new(30, 10).unwrap()); layers];
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn latency_grows_with_lc_depth_and_desk_model_is_real_time() {
    let _g = serial();
    let utts = synth(11, 10);
    let cfg = BenchConfig {
        streams: 10,
        packet_ms: 100.0,
        clock: Clock::Wall,
        transport: Transport::InProcess,
    };
    let mut p98 = Vec::new();
    for layers in 1..=3 {
        let m = Arc::new(Model::<f32>::new(lc_stack_spec(layers, 128), 7).unwrap());
        let reps: Vec<f64> = (0..3)
            .map(|_| bench(Arc::clone(&m), &utts, synth_spectrogram_config(), &cfg).unwrap().summary.p98_ms)
            .collect();
        p98.push(median(reps));
    }
    let desk = ModelSpec::preset(Preset::Proposed, Scale::Desk, deskasr::model::DESK_WIDTH, SYNTH_BINS, synth_alphabet());
    let rtf = bench(Arc::new(Model::<f32>::new(desk, 7).unwrap()), &utts, synth_spectrogram_config(), &cfg)
        .unwrap()
        .summary
        .rtf;
    verdict(
        "latency_trend",
        p98[0] < p98[1] && p98[1] < p98[2] && rtf < 1.0,
        format!(
            "p98 last-packet latency 1/2/3 LC layers: {:.2}/{:.2}/{:.2} ms; desk RTF {rtf:.3}",
            p98[0], p98[1], p98[2]
        ),
    );
}

/// Peaked posteriors: every frame's argmax holds at least `peak` of the mass.
fn peaky_lp(r: &mut impl Rng, t: usize, v: usize, peak: f64) -> Matrix<f64> {
    let mut m = Matrix::zeros(t, v);
    for i in 0..t {
        let top = r.random_range(0..v);
        let p = r.random_range(peak..1.0);
        let rest: Vec<f64> = (0..v - 1).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = rest.iter().sum();
        let mut it = rest.iter();
        for k in 0..v {
            m[(i, k)] = if k == top { p.ln() } else { ((1.0 - p) * it.next().unwrap() / s).ln() };
        }
    }
    m
}

/// Best label by exhaustive path enumeration with LM fusion; ties go to the
/// lexicographically smaller label.
fn exhaustive_best(lp: &Matrix<f64>, a: &Alphabet, lm: Option<&CharLm>, cfg: &BeamConfig) -> (Vec<usize>, f64) {
    let mut mass: HashMap<Vec<usize>, f64> = HashMap::new();
    for_each_path(lp.rows(), lp.cols(), |p| *mass.entry(collapse_tokens(p)).or_default() += path_prob(lp, p));
    mass.into_iter()
        .map(|(label, p)| {
            let lm_lp = lm.map_or(0.0, |lm| lm.score_prefix(&a.decode(&label)));
            let s = p.ln() + cfg.alpha * lm_lp + cfg.beta * label.len() as f64;
            (label, s)
        })
        .min_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)))
        .unwrap()
}

#[test]
fn decoder_matches_greedy_and_exhaustive_oracle() {
    let _g = serial();
    let mut r = rng(12);
    let greedy_cfg = BeamConfig {
        beam_width: 1,
        alpha: 0.0,
        beta: 0.0,
    };
    let a3 = small_alphabet(3);
    let mut greedy_mismatch = 0;
    for _ in 0..100 {
        let t = r.random_range(1..40);
        let lp = peaky_lp(&mut r, t, 4, 0.9);
        greedy_mismatch += usize::from(beam_search_decode(&lp, &a3, None, &greedy_cfg).unwrap() != greedy_decode(&lp, &a3));
    }
    let lm = train_char_lm(&["abc cab", "ba ab", "cc a"], &small_alphabet(3), 3, 0.5).unwrap();
    let (mut oracle_mismatch, mut worst) = (0, 0.0f64);
    let mut cases = 0;
    for i in 0..100 {
        let v = r.random_range(2..=4);
        let t = r.random_range(1..=5);
        let a = small_alphabet(v - 1);
        let lp = random_lp(&mut r, t, v);
        // Half the cases fuse the LM (only defined on the full alphabet).
        let use_lm = i % 2 == 1 && v == 4;
        let cfg = BeamConfig {
            beam_width: 10_000,
            alpha: if use_lm { r.random_range(0.1..2.0) } else { 0.0 },
            beta: if use_lm { r.random_range(-1.0..1.0) } else { 0.0 },
        };
        let lm = use_lm.then_some(&lm);
        let (best, score) = exhaustive_best(&lp, &a, lm, &cfg);
        let top = &beam_search(&lp, &a, lm, &cfg).unwrap()[0];
        oracle_mismatch += usize::from(top.prefix != best);
        worst = worst.max((top.score - score).abs());
        cases += 1;
    }
    verdict(
        "decoder_oracles",
        greedy_mismatch == 0 && oracle_mismatch == 0 && worst < 1e-9,
        format!(
            "width-1 vs greedy: {greedy_mismatch}/100 mismatches; exhaustive oracle: {oracle_mismatch}/{cases} mismatches, max |Δscore| {worst:.2e}"
        ),
    );
}

/// Levenshtein distance by memoized recursion.
fn lev_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let v = sub.min(go(a, b, i + 1, j, memo) + 1).min(go(a, b, i, j + 1, memo) + 1);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn random_text(r: &mut impl Rng) -> Vec<char> {
    let n = r.random_range(0..12);
    (0..n).map(|_| ['a', 'b', 'c', ' '][r.random_range(0..4)]).collect()
}

#[test]
fn edit_distance_oracle_and_metric_axioms() {
    let _g = serial();
    let mut r = rng(13);
    let mut oracle_mismatch = 0;
    for _ in 0..200 {
        let (a, b) = (random_text(&mut r), random_text(&mut r));
        oracle_mismatch += usize::from(edit_distance(&a, &b) != lev_oracle(&a, &b));
    }
    let mut violations = 0;
    for _ in 0..200 {
        let (a, b, c) = (random_text(&mut r), random_text(&mut r), random_text(&mut r));
        let d = |x: &[char], y: &[char]| edit_distance(x, y);
        let ok = d(&a, &a) == 0
            && (d(&a, &b) == 0) == (a == b)
            && d(&a, &b) == d(&b, &a)
            && d(&a, &c) <= d(&a, &b) + d(&b, &c);
        violations += usize::from(!ok);
    }
    verdict(
        "metrics_oracle",
        oracle_mismatch == 0 && violations == 0,
        format!("{oracle_mismatch}/200 oracle mismatches, {violations}/200 axiom violations"),
    );
}

fn column_variances(rows: &[Matrix<f64>]) -> Vec<f64> {
    let cols = rows[0].cols();
    let n: usize = rows.iter().map(Matrix::rows).sum();
    (0..cols)
        .map(|f| {
            let vals = rows.iter().flat_map(|m| (0..m.rows()).map(move |t| m[(t, f)]));
            let mean = vals.clone().sum::<f64>() / n as f64;
            vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect()
}

#[test]
fn pcen_reduces_gain_induced_variance() {
    let _g = serial();
    let gains = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0];
    let params = PcenParams::<f64>::new(SYNTH_BINS, PcenInit::default());
    let (mut worse, mut ratio_max, mut total) = (0, 0.0f64, 0);
    for u in synth(14, 5) {
        let base = power(&u);
        let (mut pc, mut lg) = (Vec::new(), Vec::new());
        for g in gains {
            // Amplitude gain g scales power by g².
            let s = Spectrogram::new(base.map(|p| p * g * g), 10.0, false);
            pc.push(pcen_forward(&s, &params).unwrap().0.values);
            lg.push(log_compress(&s).values);
        }
        for (vp, vl) in column_variances(&pc).into_iter().zip(column_variances(&lg)) {
            worse += usize::from(vp >= vl);
            ratio_max = ratio_max.max(vp / vl);
            total += 1;
        }
    }
    verdict(
        "pcen_gain_normalization",
        worse == 0,
        format!("{worse}/{total} channels not reduced, worst PCEN/log variance ratio {ratio_max:.3}"),
    );
}

fn dataset(seed: u64, train: usize, holdout: usize) -> TrainData<f32> {
    let d = gen_synthetic_dataset(&SynthConfig {
        seed,
        train,
        holdout,
        ..SynthConfig::default()
    })
    .unwrap();
    TrainData::from_audio(&d.train, &d.holdout, synth_spectrogram_config()).unwrap()
}

fn desk_train(epochs: usize, seed: u64, schedule: LossSchedule) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        schedule,
        ..TrainConfig::desk()
    }
}

/// Momentum 0.9 at lr 3e-3 escapes the early CTC plateau within a few epochs.
fn fast_train(epochs: usize, seed: u64, schedule: LossSchedule) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        momentum: 0.9,
        clip_norm: 20.0,
        ..desk_train(epochs, seed, schedule)
    }
}

fn proposed_spec(grams: Option<GramSet>) -> ModelSpec {
    let mut s = ModelSpec::preset(Preset::Proposed, Scale::Desk, deskasr::model::DESK_WIDTH, SYNTH_BINS, synth_alphabet());
    s.grams = grams;
    s
}

#[test]
fn joint_ce_ctc_beats_ctc_early() {
    let _g = serial();
    let t0 = Instant::now();
    let data = dataset(0, 500, 0);
    // Alignments come from a CTC model trained to convergence on the same data.
    let reference = {
        let m = Model::<f32>::new(proposed_spec(None), 1000).unwrap();
        train(&fast_train(8, 1000, LossSchedule::Ctc), m, &data, None).unwrap().0
    };
    let epoch = 2; // the third epoch
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let run = |schedule| {
            let m = Model::<f32>::new(proposed_spec(None), seed).unwrap();
            let (_, log) = train(&desk_train(epoch + 1, seed, schedule), m, &data, Some(&reference)).unwrap();
            log.records()[epoch].ctc.unwrap()
        };
        let ctc = run(LossSchedule::Ctc);
        let joint = run(LossSchedule::Joint {
            ce: 0.5,
            ctc: 0.5,
            gram: 0.0,
        });
        wins += usize::from(joint < ctc);
        pairs.push(format!("{joint:.2}/{ctc:.2}"));
    }
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    verdict(
        "joint_ce_ctc_trend",
        wins >= 8 && mins < 30.0,
        format!("joint < ctc CTC-NLL at epoch 3 in {wins}/10 seeds (joint/ctc: {}), {mins:.1} min", pairs.join(" ")),
    );
}

/// Pools per-utterance correlations; peak ties go to the smallest |lag|, then negative.
fn pooled_peak_lag(a: &[Alignment], b: &[Alignment], max_lag: usize) -> isize {
    let mut sum: Option<(Vec<isize>, Vec<f64>)> = None;
    for (x, y) in a.iter().zip(b) {
        let Ok(c) = alignment_xcorr(x, y, max_lag) else { continue };
        match &mut sum {
            None => sum = Some((c.lags, c.values)),
            Some((_, v)) => v.iter_mut().zip(&c.values).for_each(|(s, x)| *s += x),
        }
    }
    let (lags, values) = sum.expect("some non-empty alignment");
    let mut peak = 0;
    for i in 1..lags.len() {
        if values[i] > values[peak] || (values[i] == values[peak] && (lags[i].abs(), lags[i]) < (lags[peak].abs(), lags[peak]))
        {
            peak = i;
        }
    }
    lags[peak]
}

#[test]
fn forward_model_alignments_trail_bidirectional() {
    let _g = serial();
    let (mut positive, mut lags) = (0, Vec::new());
    let seeds = 10;
    for seed in 0..seeds {
        let data = dataset(300 + seed, 150, 0);
        let bi_spec = ModelSpec::preset(Preset::Bidirectional, Scale::Desk, 48, SYNTH_BINS, synth_alphabet());
        let mut fwd_spec = bi_spec.clone();
        fwd_spec.recurrent = vec![RecurrentKind::Forward; fwd_spec.recurrent.len()];
        let cfg = fast_train(10, seed, LossSchedule::Ctc);
        let bi = train(&cfg, Model::<f32>::new(bi_spec, seed).unwrap(), &data, None).unwrap().0;
        let fwd = train(&cfg, Model::<f32>::new(fwd_spec, seed).unwrap(), &data, None).unwrap().0;
        let a = reference_alignments(&bi, &data.train, 0).unwrap();
        let b = reference_alignments(&fwd, &data.train, 0).unwrap();
        let lag = pooled_peak_lag(&a, &b, 15);
        positive += usize::from(lag > 0);
        lags.push(lag);
    }
    verdict(
        "forward_alignment_delay",
        2 * positive > seeds as usize,
        format!("peak lag > 0 in {positive}/{seeds} seeds (lags {lags:?})"),
    );
}

#[test]
fn proposed_model_learns_and_gramctc_wer_direction() {
    let _g = serial();
    let data = dataset(0, 500, 50);
    let texts: Vec<&str> = data.train.iter().map(|e| e.transcript.as_str()).collect();
    // Every vocabulary word and its pieces are grams.
    let grams = GramSet::from_corpus(synth_alphabet(), &texts, SynthConfig::default().max_word_len, usize::MAX);
    let epochs = 12;
    let (seeds, need) = (10, 7);
    let (mut first_cer, mut wins, mut rows) = (f64::NAN, 0, Vec::new());
    for seed in 0..seeds {
        let m = Model::<f32>::new(proposed_spec(None), seed).unwrap();
        let ctc = train(&fast_train(epochs, seed, LossSchedule::Ctc), m, &data, None).unwrap().0;
        let ctc_m = evaluate(&ctc, &data.holdout, DecodeHead::Char).unwrap();
        let m = Model::<f32>::new(proposed_spec(Some(grams.clone())), seed).unwrap();
        let gram = train(&fast_train(epochs, seed, LossSchedule::GramCtc), m, &data, None).unwrap().0;
        let gram_m = evaluate(&gram, &data.holdout, DecodeHead::Gram).unwrap();
        if seed == 0 {
            first_cer = ctc_m.cer;
        }
        wins += usize::from(gram_m.wer <= ctc_m.wer);
        rows.push(format!("{:.3}/{:.3}", gram_m.wer, ctc_m.wer));
        let left = (seeds - seed - 1) as usize;
        // Stop once the seed count can no longer change the verdict.
        if wins >= need || wins + left < need {
            break;
        }
    }
    verdict(
        "end_to_end_learnability",
        first_cer < 0.05 && wins >= need,
        format!(
            "CTC holdout CER {first_cer:.4}; GramCTC WER <= CTC WER in {wins}/{} seeds run, need {need}/{seeds} (gram/ctc WER: {})",
            rows.len(),
            rows.join(" ")
        ),
    );
}
