use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::protocol::{read_frame, write_frame, Frame, FrameKind};
use super::{Packet, StreamError, StreamSession};
use crate::frontend::SpectrogramConfig;
use crate::model::Model;
use crate::scalar::Scalar;

/// TCP front end: each connection may multiplex streams by id; each stream
/// gets its own session over the shared model.
pub struct Server<T: Scalar> {
    listener: TcpListener,
    model: Arc<Model<T>>,
    spectrogram: SpectrogramConfig,
    sample_rate: u32,
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    busy_ns: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Total time spent inside feed/finalize across all streams.
    pub fn processing_time(&self) -> Duration {
        Duration::from_nanos(self.busy_ns.load(Ordering::Relaxed))
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

impl<T: Scalar> Server<T> {
    pub fn bind(
        addr: impl ToSocketAddrs,
        model: Arc<Model<T>>,
        spectrogram: SpectrogramConfig,
        sample_rate: u32,
    ) -> Result<Self, StreamError> {
        // Reject unstreamable models up front rather than per connection.
        StreamSession::open(Arc::clone(&model), 0, spectrogram, sample_rate)?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            model,
            spectrogram,
            sample_rate,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, StreamError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until `stop` is set.
    fn accept_loop(self, stop: Arc<AtomicBool>, busy: Arc<AtomicU64>) {
        // Connection threads are detached: they end when their client hangs up.
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let (model, spec, sr, busy) = (Arc::clone(&self.model), self.spectrogram, self.sample_rate, Arc::clone(&busy));
            std::thread::spawn(move || {
                if let Err(e) = handle_connection(conn, model, spec, sr, &busy) {
                    eprintln!("connection closed: {e}");
                }
            });
        }
    }

    pub fn spawn(self) -> Result<ServerHandle, StreamError>
    where
        T: Send + Sync + 'static,
    {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let busy = Arc::new(AtomicU64::new(0));
        let (s, b) = (Arc::clone(&stop), Arc::clone(&busy));
        let thread = std::thread::spawn(move || self.accept_loop(s, b));
        Ok(ServerHandle {
            addr,
            stop,
            busy_ns: busy,
            thread: Some(thread),
        })
    }

    /// Blocks forever serving connections.
    pub fn run(self)
    where
        T: Send + Sync + 'static,
    {
        self.accept_loop(Arc::new(AtomicBool::new(false)), Arc::new(AtomicU64::new(0)));
    }
}

fn handle_connection<T: Scalar>(
    conn: TcpStream,
    model: Arc<Model<T>>,
    spectrogram: SpectrogramConfig,
    sample_rate: u32,
    busy: &AtomicU64,
) -> Result<(), StreamError> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut writer = BufWriter::new(conn);
    let mut sessions: HashMap<u32, (StreamSession<T>, String)> = HashMap::new();
    while let Some(frame) = read_frame(&mut reader)? {
        let packet = frame.to_packet()?;
        let id = packet.stream_id;
        if !sessions.contains_key(&id) {
            let s = StreamSession::open(Arc::clone(&model), id, spectrogram, sample_rate)?;
            sessions.insert(id, (s, String::new()));
        }
        let (session, last) = sessions.get_mut(&id).expect("session present");
        let t0 = Instant::now();
        let out = session.feed(&packet)?;
        let fin = packet.is_final.then(|| session.finalize()).transpose()?;
        busy.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        match fin {
            Some(f) => {
                write_frame(&mut writer, &Frame::text(FrameKind::Final, id, packet.seq, &f.transcript))?;
                sessions.remove(&id);
            }
            None if out.partial != *last => {
                write_frame(&mut writer, &Frame::text(FrameKind::Partial, id, packet.seq, &out.partial))?;
                *last = out.partial;
            }
            None => {}
        }
    }
    let _ = writer.get_ref().shutdown(Shutdown::Write);
    Ok(())
}

/// Client side of one connection.
pub struct StreamClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl StreamClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, StreamError> {
        let conn = TcpStream::connect(addr)?;
        conn.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(conn.try_clone()?),
            writer: BufWriter::new(conn),
        })
    }

    pub fn send(&mut self, p: &Packet) -> Result<(), StreamError> {
        Ok(write_frame(&mut self.writer, &Frame::from_packet(p))?)
    }

    pub fn recv(&mut self) -> Result<Option<Frame>, StreamError> {
        read_frame(&mut self.reader)
    }

    /// Reads frames until FINAL for `stream_id`, returning its transcript.
    pub fn await_final(&mut self, stream_id: u32) -> Result<String, StreamError> {
        loop {
            match self.recv()? {
                Some(f) if f.kind == FrameKind::Final && f.stream_id == stream_id => return f.payload_text(),
                Some(_) => {}
                None => return Err(StreamError::Protocol("connection closed before FINAL".into())),
            }
        }
    }

    /// Splits into independently owned read and write halves.
    pub fn split(self) -> (BufReader<TcpStream>, BufWriter<TcpStream>) {
        (self.reader, self.writer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{synth_spectrogram_config, SYNTH_BINS, SYNTH_SAMPLE_RATE};
    use crate::model::{ModelSpec, Preset, Scale};
    use crate::streaming::{packetize, stream_utterance};

    #[test]
    fn socket_transcript_matches_in_process() {
        let spec = ModelSpec::preset(Preset::Proposed, Scale::Desk, 10, SYNTH_BINS, "ab ".parse().unwrap());
        let m = Arc::new(Model::<f64>::new(spec, 3).unwrap());
        let pcm: Vec<i16> = (0..3000).map(|i| ((i as f64 * 0.3).sin() * 8000.0) as i16).collect();
        let samples: Vec<f64> = pcm.iter().map(|&s| crate::frontend::pcm16_to_f64(s)).collect();
        let want =
            stream_utterance(Arc::clone(&m), &samples, 400, synth_spectrogram_config(), SYNTH_SAMPLE_RATE).unwrap();
        let h = Server::bind("127.0.0.1:0", m, synth_spectrogram_config(), SYNTH_SAMPLE_RATE)
            .unwrap()
            .spawn()
            .unwrap();
        let mut c = StreamClient::connect(h.local_addr()).unwrap();
        for id in [5, 6] {
            for p in packetize(id, &pcm, 400) {
                c.send(&p).unwrap();
            }
        }
        assert_eq!(c.await_final(5).unwrap(), want.transcript);
        assert_eq!(c.await_final(6).unwrap(), want.transcript);
        assert!(h.processing_time() > Duration::ZERO);
        h.shutdown();
    }

    #[test]
    fn unstreamable_models_fail_to_bind() {
        let spec = ModelSpec::preset(Preset::Bidirectional, Scale::Desk, 8, SYNTH_BINS, "ab".parse().unwrap());
        let m = Arc::new(Model::<f64>::new(spec, 0).unwrap());
        assert!(matches!(
            Server::bind("127.0.0.1:0", m, synth_spectrogram_config(), SYNTH_SAMPLE_RATE),
            Err(StreamError::NotStreamable)
        ));
    }
}
