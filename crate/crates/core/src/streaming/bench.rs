use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::FrameKind;
use super::{packetize, Server, StreamClient, StreamError, StreamSession};
use crate::frontend::{AudioUtterance, SpectrogramConfig};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Real sleeps and real timestamps.
    Wall,
    /// Discrete-event simulation: packets arrive on a virtual timeline and
    /// one worker serves them in arrival order, each taking
    /// `ns_per_mac` × multiply-adds. Deterministic.
    Virtual { ns_per_mac: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    /// Loopback TCP through [`Server`]; wall clock only.
    Socket,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub streams: usize,
    pub packet_ms: f64,
    pub clock: Clock,
    pub transport: Transport,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            streams: 10,
            packet_ms: 100.0,
            clock: Clock::Wall,
            transport: Transport::InProcess,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub stream: usize,
    pub audio_secs: f64,
    /// From arrival of the last audio packet to the final transcript.
    pub last_packet_latency_ms: f64,
    /// Wall-clock time spent in feed and finalize.
    pub processing_ms: f64,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub streams: usize,
    pub packet_ms: f64,
    pub p50_ms: f64,
    pub p98_ms: f64,
    /// Total processing time over total audio duration.
    pub rtf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub records: Vec<StreamRecord>,
    pub summary: StreamSummary,
}

impl StreamStats {
    fn from_records(records: Vec<StreamRecord>, cfg: &BenchConfig, processing_override: Option<Duration>) -> Self {
        let mut lat: Vec<f64> = records.iter().map(|r| r.last_packet_latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        let audio: f64 = records.iter().map(|r| r.audio_secs).sum();
        let busy = processing_override
            .map(|d| d.as_secs_f64())
            .unwrap_or_else(|| records.iter().map(|r| r.processing_ms / 1000.0).sum());
        let summary = StreamSummary {
            streams: cfg.streams,
            packet_ms: cfg.packet_ms,
            p50_ms: percentile(&lat, 50.0),
            p98_ms: percentile(&lat, 98.0),
            rtf: if audio > 0.0 { busy / audio } else { 0.0 },
        };
        Self { records, summary }
    }

    /// One JSON line per stream, then `{"summary": …}`.
    pub fn to_lines(&self) -> String {
        let mut s: String = self
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect();
        s += &serde_json::json!({ "summary": self.summary }).to_string();
        s.push('\n');
        s
    }
}

/// Nearest-rank percentile of sorted values; 0 for an empty slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Stream `i` replays `utterances[i % len]` in real-time-paced packets.
pub fn bench<T: Scalar + Send + Sync + 'static>(
    model: Arc<Model<T>>,
    utterances: &[AudioUtterance],
    spectrogram: SpectrogramConfig,
    cfg: &BenchConfig,
) -> Result<StreamStats, StreamError> {
    if cfg.streams == 0 || utterances.is_empty() {
        return Err(StreamError::Bench("need at least one stream and one utterance".into()));
    }
    if !(cfg.packet_ms > 0.0) {
        return Err(StreamError::Bench("packet_ms must be positive".into()));
    }
    let sr = utterances[0].sample_rate;
    if utterances.iter().any(|u| u.sample_rate != sr) {
        return Err(StreamError::Bench("utterances differ in sample rate".into()));
    }
    let packet_samples = ((cfg.packet_ms * sr as f64 / 1000.0).round() as usize).max(1);
    let streams: Vec<Vec<i16>> = (0..cfg.streams).map(|i| utterances[i % utterances.len()].to_pcm16()).collect();
    match (cfg.transport, cfg.clock) {
        (Transport::InProcess, Clock::Virtual { ns_per_mac }) => {
            virtual_bench(model, &streams, packet_samples, spectrogram, sr, ns_per_mac, cfg)
        }
        (Transport::InProcess, Clock::Wall) => wall_bench(model, &streams, packet_samples, spectrogram, sr, cfg),
        (Transport::Socket, Clock::Wall) => socket_bench(model, &streams, packet_samples, spectrogram, sr, cfg),
        (Transport::Socket, Clock::Virtual { .. }) => {
            Err(StreamError::Bench("socket transport runs on the wall clock".into()))
        }
    }
}

fn packet_secs(p: &super::Packet, sr: u32) -> f64 {
    p.samples.len() as f64 / sr as f64
}

fn virtual_bench<T: Scalar>(
    model: Arc<Model<T>>,
    streams: &[Vec<i16>],
    packet_samples: usize,
    spectrogram: SpectrogramConfig,
    sr: u32,
    ns_per_mac: f64,
    cfg: &BenchConfig,
) -> Result<StreamStats, StreamError> {
    let n = streams.len();
    let period = cfg.packet_ms / 1000.0;
    // (arrival seconds, stream, packet index); starts staggered across one period.
    let mut events = Vec::new();
    let mut packets = Vec::with_capacity(n);
    for (i, pcm) in streams.iter().enumerate() {
        let ps = packetize(i as u32, pcm, packet_samples);
        let mut t = period * i as f64 / n as f64;
        for (k, p) in ps.iter().enumerate() {
            t += packet_secs(p, sr);
            events.push((t, i, k));
        }
        packets.push(ps);
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sessions: Vec<StreamSession<T>> = (0..n)
        .map(|i| StreamSession::open(Arc::clone(&model), i as u32, spectrogram, sr))
        .collect::<Result<_, _>>()?;
    let mut free_at = 0.0f64;
    let mut records: Vec<Option<StreamRecord>> = vec![None; n];
    let mut busy = vec![Duration::ZERO; n];
    for (arrival, i, k) in events {
        let p = &packets[i][k];
        let s = &mut sessions[i];
        let before = s.work();
        let t0 = Instant::now();
        s.feed(p)?;
        let fin = p.is_final.then(|| s.finalize()).transpose()?;
        busy[i] += t0.elapsed();
        let service = (s.work() - before) as f64 * ns_per_mac * 1e-9;
        let done = arrival.max(free_at) + service;
        free_at = done;
        if let Some(f) = fin {
            records[i] = Some(StreamRecord {
                stream: i,
                audio_secs: streams[i].len() as f64 / sr as f64,
                last_packet_latency_ms: (done - arrival) * 1000.0,
                processing_ms: busy[i].as_secs_f64() * 1000.0,
                transcript: f.transcript,
            });
        }
    }
    Ok(StreamStats::from_records(
        records.into_iter().map(|r| r.expect("every stream finalizes")).collect(),
        cfg,
        None,
    ))
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

fn wall_bench<T: Scalar + Send + Sync + 'static>(
    model: Arc<Model<T>>,
    streams: &[Vec<i16>],
    packet_samples: usize,
    spectrogram: SpectrogramConfig,
    sr: u32,
    cfg: &BenchConfig,
) -> Result<StreamStats, StreamError> {
    let n = streams.len();
    let start = Instant::now() + Duration::from_millis(5);
    let period = Duration::from_secs_f64(cfg.packet_ms / 1000.0);
    let records = thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(i, pcm)| {
                let model = Arc::clone(&model);
                scope.spawn(move || -> Result<StreamRecord, StreamError> {
                    let mut s = StreamSession::open(model, i as u32, spectrogram, sr)?;
                    let mut due = start + period.mul_f64(i as f64 / n as f64);
                    let mut busy = Duration::ZERO;
                    for p in packetize(i as u32, pcm, packet_samples) {
                        due += Duration::from_secs_f64(packet_secs(&p, sr));
                        sleep_until(due);
                        let arrival = Instant::now();
                        s.feed(&p)?;
                        if p.is_final {
                            let f = s.finalize()?;
                            let latency = arrival.elapsed();
                            busy += latency;
                            return Ok(StreamRecord {
                                stream: i,
                                audio_secs: pcm.len() as f64 / sr as f64,
                                last_packet_latency_ms: latency.as_secs_f64() * 1000.0,
                                processing_ms: busy.as_secs_f64() * 1000.0,
                                transcript: f.transcript,
                            });
                        }
                        busy += arrival.elapsed();
                    }
                    unreachable!("packetize marks a final packet")
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(StreamStats::from_records(records, cfg, None))
}

fn socket_bench<T: Scalar + Send + Sync + 'static>(
    model: Arc<Model<T>>,
    streams: &[Vec<i16>],
    packet_samples: usize,
    spectrogram: SpectrogramConfig,
    sr: u32,
    cfg: &BenchConfig,
) -> Result<StreamStats, StreamError> {
    let server = Server::bind("127.0.0.1:0", model, spectrogram, sr)?.spawn()?;
    let addr = server.local_addr();
    let n = streams.len();
    let start = Instant::now() + Duration::from_millis(20);
    let period = Duration::from_secs_f64(cfg.packet_ms / 1000.0);
    let records = thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(i, pcm)| {
                scope.spawn(move || -> Result<StreamRecord, StreamError> {
                    let (mut reader, mut writer) = StreamClient::connect(addr)?.split();
                    let id = i as u32;
                    // Reader drains PARTIALs so the server never blocks on writes.
                    let rx = thread::spawn(move || -> Result<(String, Instant), StreamError> {
                        loop {
                            match super::protocol::read_frame(&mut reader)? {
                                Some(f) if f.kind == FrameKind::Final && f.stream_id == id => {
                                    return Ok((f.payload_text()?, Instant::now()))
                                }
                                Some(_) => {}
                                None => return Err(StreamError::Protocol("connection closed before FINAL".into())),
                            }
                        }
                    });
                    let mut due = start + period.mul_f64(i as f64 / n as f64);
                    let mut last = start;
                    for p in packetize(id, pcm, packet_samples) {
                        due += Duration::from_secs_f64(packet_secs(&p, sr));
                        sleep_until(due);
                        last = Instant::now();
                        super::protocol::write_frame(&mut writer, &super::protocol::Frame::from_packet(&p))?;
                    }
                    let (transcript, at) = rx.join().expect("reader panicked")?;
                    Ok(StreamRecord {
                        stream: i,
                        audio_secs: pcm.len() as f64 / sr as f64,
                        last_packet_latency_ms: at.saturating_duration_since(last).as_secs_f64() * 1000.0,
                        processing_ms: 0.0,
                        transcript,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let busy = server.processing_time();
    server.shutdown();
    Ok(StreamStats::from_records(records, cfg, Some(busy)))
}
