//! A TCP connection seen through an impaired link: every packet in either
//! direction passes a [`LinkLane`] that may drop or delay it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use bytes::{Bytes, BytesMut};
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::sync::mpsc;
use tokio::time::{sleep_until, Instant};

use crate::codec::{self, CodecError, ControlPacket};
use crate::framing::FrameReader;
use crate::netem::{Direction, DropTrace, LinkLane, LinkProfile};

/// Packet counters for one connection, after impairment.
#[derive(Debug, Default)]
pub struct LinkStats {
    pub packets_sent: AtomicU64,
    pub packets_dropped_up: AtomicU64,
    pub packets_received: AtomicU64,
    pub packets_dropped_down: AtomicU64,
}

impl LinkStats {
    pub fn snapshot(&self) -> LinkCounts {
        LinkCounts {
            packets_sent: self.packets_sent.load(Ordering::Relaxed),
            packets_dropped_up: self.packets_dropped_up.load(Ordering::Relaxed),
            packets_received: self.packets_received.load(Ordering::Relaxed),
            packets_dropped_down: self.packets_dropped_down.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounts {
    /// Packets handed to the link, whether or not they arrived.
    pub packets_sent: u64,
    pub packets_dropped_up: u64,
    /// Packets that made it through the link to this client.
    pub packets_received: u64,
    pub packets_dropped_down: u64,
}

pub(crate) enum WriterMsg {
    Frame(Instant, Bytes),
    Close,
}

struct UpState {
    lane: LinkLane,
    last_send: Instant,
    buf: BytesMut,
}

/// Sending half. Loss and timing are decided when a packet is sent; the
/// writer task holds it back until its delivery instant.
pub(crate) struct Outbound {
    up: Mutex<UpState>,
    tx: mpsc::UnboundedSender<WriterMsg>,
    pub(crate) stats: Arc<LinkStats>,
}

impl Outbound {
    /// Returns `Ok(false)` when the link dropped the packet.
    pub(crate) fn send(&self, packet: &ControlPacket) -> Result<bool, CodecError> {
        let mut up = self.up.lock().expect("link lock poisoned");
        up.buf.clear();
        codec::encode_to(packet, &mut up.buf)?;
        let frame = up.buf.split().freeze();
        let now = Instant::now();
        up.last_send = now;
        self.stats.packets_sent.fetch_add(1, Ordering::Relaxed);
        match up.lane.admit(frame.len(), now) {
            Some(at) => {
                let _ = self.tx.send(WriterMsg::Frame(at, frame));
                Ok(true)
            }
            None => {
                self.stats.packets_dropped_up.fetch_add(1, Ordering::Relaxed);
                Ok(false)
            }
        }
    }

    pub(crate) fn last_send(&self) -> Instant {
        self.up.lock().expect("link lock poisoned").last_send
    }

    pub(crate) fn close(&self) {
        let _ = self.tx.send(WriterMsg::Close);
    }
}

pub(crate) enum Arrival {
    Frame(Bytes),
    Closed,
}

pub(crate) struct Link {
    pub(crate) outbound: Arc<Outbound>,
    pub(crate) inbound: mpsc::UnboundedReceiver<(Instant, Arrival)>,
    pub(crate) writer: tokio::task::JoinHandle<()>,
    pub(crate) reader: tokio::task::JoinHandle<()>,
}

pub(crate) fn open(
    read: OwnedReadHalf,
    write: OwnedWriteHalf,
    profile: &LinkProfile,
    link_id: &str,
    trace: Option<DropTrace>,
    max_packet_size: usize,
) -> Link {
    let stats = Arc::new(LinkStats::default());
    let (wtx, wrx) = mpsc::unbounded_channel();
    let (itx, irx) = mpsc::unbounded_channel();
    let outbound = Arc::new(Outbound {
        up: Mutex::new(UpState {
            lane: LinkLane::new(profile.clone(), link_id, Direction::Up, trace.clone()),
            last_send: Instant::now(),
            buf: BytesMut::with_capacity(4096),
        }),
        tx: wtx,
        stats: stats.clone(),
    });
    let down = LinkLane::new(profile.clone(), link_id, Direction::Down, trace);
    let writer = tokio::spawn(write_loop(write, wrx));
    let reader = tokio::spawn(read_loop(FrameReader::new(read, max_packet_size), down, itx, stats));
    Link {
        outbound,
        inbound: irx,
        writer,
        reader,
    }
}

async fn write_loop(mut w: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<WriterMsg>) {
    while let Some(msg) = rx.recv().await {
        match msg {
            WriterMsg::Frame(at, frame) => {
                sleep_until(at).await;
                if w.write_all(&frame).await.is_err() {
                    break;
                }
            }
            WriterMsg::Close => break,
        }
    }
    let _ = w.shutdown().await;
}

async fn read_loop(
    mut reader: FrameReader<OwnedReadHalf>,
    mut lane: LinkLane,
    tx: mpsc::UnboundedSender<(Instant, Arrival)>,
    stats: Arc<LinkStats>,
) {
    let mut last = Instant::now();
    while let Ok(Some(frame)) = reader.next_frame().await {
        match lane.admit(frame.len(), Instant::now()) {
            Some(at) => {
                last = at;
                stats.packets_received.fetch_add(1, Ordering::Relaxed);
                if tx.send((at, Arrival::Frame(frame))).is_err() {
                    return;
                }
            }
            None => {
                stats.packets_dropped_down.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
    let _ = tx.send((last.max(Instant::now()), Arrival::Closed));
}
