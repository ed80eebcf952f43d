//! Loopback TCP transport for wall-clock smoke runs.
//!
//! Every replica gets a listener on 127.0.0.1 and one outgoing stream to
//! each peer. A stream opens with the sender's id (u16 LE) and then carries
//! length-prefixed frames. Each replica runs on its own thread; reader
//! threads feed a channel that the replica thread drains between timer
//! checks.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use crate::crypto::Digest;
use crate::engine::{Dest, EngineOutput, Replica};
use crate::message::{decode_frame, encode_frame, FrameError, Message};
use crate::types::{ReplicaId, Time};

#[derive(Debug, Default, Clone)]
pub struct TcpReport {
    pub logs: Vec<Vec<Digest>>,
    pub frames_sent: u64,
    pub bytes_sent: u64,
}

struct Node {
    id: ReplicaId,
    engine: Box<dyn Replica>,
    peers: Vec<Option<TcpStream>>,
    inbox: Receiver<(ReplicaId, Message)>,
    frames: u64,
    bytes: u64,
}

impl Node {
    fn send(&mut self, out: EngineOutput) {
        for (dest, msg) in out.outbound {
            let frame = encode_frame(&msg);
            let targets: Vec<usize> = match dest {
                Dest::To(r) => vec![r as usize],
                Dest::All => (0..self.peers.len())
                    .filter(|r| *r != self.id as usize)
                    .collect(),
            };
            for t in targets {
                if let Some(s) = self.peers.get_mut(t).and_then(|p| p.as_mut()) {
                    if s.write_all(&frame).is_ok() {
                        self.frames += 1;
                        self.bytes += frame.len() as u64;
                    } else {
                        self.peers[t] = None;
                    }
                }
            }
        }
    }

    fn run(mut self, epoch: Instant, stop: Duration) -> (Vec<Digest>, u64, u64) {
        let now = |e: Instant| e.elapsed().as_micros() as Time;
        let out = self.engine.start(now(epoch));
        self.send(out);
        while epoch.elapsed() < stop {
            let t = now(epoch);
            if let Some(d) = self.engine.timer_deadline() {
                if d <= t {
                    let out = self.engine.on_timer(t);
                    self.send(out);
                    continue;
                }
            }
            let wait = self
                .engine
                .timer_deadline()
                .map_or(10_000, |d| d.saturating_sub(t).min(10_000));
            match self.inbox.recv_timeout(Duration::from_micros(wait)) {
                Ok((from, msg)) => {
                    let out = self.engine.handle(from, msg, now(epoch));
                    self.send(out);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let log = self.engine.committed().iter().map(|b| b.id).collect();
        (log, self.frames, self.bytes)
    }
}

fn reader(mut s: TcpStream, tx: Sender<(ReplicaId, Message)>) {
    let mut hello = [0u8; 2];
    if s.read_exact(&mut hello).is_err() {
        return;
    }
    let from = u16::from_le_bytes(hello);
    let mut buf = Vec::new();
    let mut chunk = [0u8; 64 * 1024];
    loop {
        let k = match s.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(k) => k,
        };
        buf.extend_from_slice(&chunk[..k]);
        loop {
            match decode_frame(&buf) {
                Ok((msg, used)) => {
                    buf.drain(..used);
                    if tx.send((from, msg)).is_err() {
                        return;
                    }
                }
                Err(FrameError::Incomplete) => break,
                // a peer sending garbage gets disconnected
                Err(_) => return,
            }
        }
    }
}

/// Runs the replicas over loopback TCP for `duration` of wall-clock time.
pub fn run_local(replicas: Vec<Box<dyn Replica>>, duration: Duration) -> io::Result<TcpReport> {
    let n = replicas.len();
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<io::Result<_>>()?;
    let addrs: Vec<SocketAddr> = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<io::Result<_>>()?;

    let mut inboxes = Vec::new();
    for l in listeners {
        let (tx, rx) = mpsc::channel();
        inboxes.push(rx);
        thread::spawn(move || {
            for _ in 1..n {
                let Ok((s, _)) = l.accept() else { return };
                let _ = s.set_nodelay(true);
                let tx = tx.clone();
                thread::spawn(move || reader(s, tx));
            }
        });
    }

    let mut nodes = Vec::new();
    for (engine, inbox) in replicas.into_iter().zip(inboxes) {
        let id = engine.id();
        let mut peers = Vec::new();
        for (j, addr) in addrs.iter().enumerate() {
            if j == id as usize {
                peers.push(None);
                continue;
            }
            let mut s = TcpStream::connect(addr)?;
            s.set_nodelay(true)?;
            s.write_all(&id.to_le_bytes())?;
            peers.push(Some(s));
        }
        nodes.push(Node {
            id,
            engine,
            peers,
            inbox,
            frames: 0,
            bytes: 0,
        });
    }

    let barrier = Arc::new(Barrier::new(n));
    let epoch = Instant::now();
    let handles: Vec<_> = nodes
        .into_iter()
        .map(|node| {
            let b = barrier.clone();
            thread::spawn(move || {
                b.wait();
                node.run(epoch, duration)
            })
        })
        .collect();

    let mut report = TcpReport::default();
    for h in handles {
        let (log, f, b) = h
            .join()
            .map_err(|_| io::Error::new(io::ErrorKind::Other, "replica thread panicked"))?;
        report.logs.push(log);
        report.frames_sent += f;
        report.bytes_sent += b;
    }
    Ok(report)
}
