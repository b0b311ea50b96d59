//! Single-instance broker: TCP accept loop, per-connection handlers, the
//! shared subscription registry and message counters.

mod session;

pub use session::{
    AckStage, Action, Delivery, Inflight, Message, ProtocolError, QueueOverflow, SessionConfig, SessionState,
};

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::BytesMut;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, timeout, Instant};
use tracing::{debug, warn};

use crate::codec::{
    self, reason, CodecError, ConnAck, Connect, ControlPacket, Disconnect, Properties, QoS, SubscribeOptions,
};
use crate::framing::{FrameError, FrameReader};
use crate::topics::{SubscriptionTrie, TopicFilter, TopicName};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub name: String,
    pub bind: SocketAddr,
    pub session: SessionConfig,
    /// Username to password. `None` accepts any client.
    pub credentials: Option<HashMap<String, String>>,
    pub connect_timeout: Duration,
    pub max_packet_size: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            name: "broker".into(),
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            session: SessionConfig::default(),
            credentials: None,
            connect_timeout: Duration::from_secs(10),
            max_packet_size: 1 << 20,
        }
    }
}

/// Point-in-time copy of a broker's message counters.
///
/// For a terminated run with one subscriber per topic:
/// `publishes_received == messages_forwarded + messages_dropped_queue
/// + duplicates_suppressed + messages_unrouted + messages_abandoned`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerCounters {
    pub publishes_received: u64,
    pub messages_forwarded: u64,
    pub messages_dropped_queue: u64,
    pub duplicates_suppressed: u64,
    /// Accepted messages that matched no subscription.
    pub messages_unrouted: u64,
    /// QoS 2 messages whose PUBREL never arrived before the connection closed.
    pub messages_abandoned: u64,
    /// Outbound deliveries given up after the retry budget ran out.
    pub retries_exhausted: u64,
    pub connections_accepted: u64,
    pub connections_rejected: u64,
    /// Received PUBLISH packets per topic, excluding suppressed duplicates.
    pub per_topic_received: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubEntry {
    pub client_id: String,
    pub conn_id: u64,
    pub filter: TopicFilter,
    pub options: SubscribeOptions,
}

/// Resolves the sessions a message goes to and the QoS of each delivery.
///
/// Each session gets at most one delivery, at the highest QoS granted by
/// any of its matching subscriptions, capped by the publish QoS. A
/// subscription with `no_local` never matches its own client's messages.
pub fn route(
    registry: &SubscriptionTrie<SubEntry>,
    topic: &TopicName,
    qos: QoS,
    publisher: &str,
) -> BTreeMap<String, QoS> {
    let mut out: BTreeMap<String, QoS> = BTreeMap::new();
    registry.for_each_match(topic, |entry| {
        if entry.options.no_local && entry.client_id == publisher {
            return;
        }
        let granted = qos.min(entry.options.max_qos);
        out.entry(entry.client_id.clone())
            .and_modify(|q| *q = (*q).max(granted))
            .or_insert(granted);
    });
    out
}

struct SessionSlot {
    conn_id: u64,
    state: Arc<Mutex<SessionState>>,
    wake: Arc<Notify>,
    takeover: Arc<Notify>,
}

#[derive(Default)]
struct State {
    registry: SubscriptionTrie<SubEntry>,
    sessions: HashMap<String, SessionSlot>,
    counters: BrokerCounters,
}

struct Shared {
    config: BrokerConfig,
    state: Mutex<State>,
    next_conn: AtomicU64,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("broker state poisoned")
    }

    fn forward(&self, message: Message) {
        let message = Arc::new(message);
        let mut wakes = Vec::new();
        {
            let mut st = self.lock();
            let targets = route(&st.registry, &message.topic, message.qos, &message.publisher);
            if targets.is_empty() {
                st.counters.messages_unrouted += 1;
            }
            for (client_id, qos) in targets {
                let Some(slot) = st.sessions.get(&client_id) else {
                    continue;
                };
                let queued = slot.state.lock().expect("session poisoned").enqueue(Delivery {
                    message: message.clone(),
                    qos,
                });
                wakes.push(slot.wake.clone());
                match queued {
                    Ok(()) => st.counters.messages_forwarded += 1,
                    Err(_) => st.counters.messages_dropped_queue += 1,
                }
            }
        }
        for w in wakes {
            w.notify_one();
        }
    }
}

/// A running broker. Dropping it without calling [`Broker::shutdown`]
/// leaves the accept loop running until the runtime stops.
pub struct Broker {
    shared: Arc<Shared>,
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    accept: JoinHandle<()>,
}

impl Broker {
    pub async fn start(config: BrokerConfig) -> std::io::Result<Broker> {
        let listener = TcpListener::bind(config.bind).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            state: Mutex::new(State::default()),
            next_conn: AtomicU64::new(1),
        });
        let (stop, stop_rx) = watch::channel(false);
        let accept = tokio::spawn(accept_loop(listener, shared.clone(), stop_rx));
        debug!(name = %shared.config.name, %addr, "broker listening");
        Ok(Broker {
            shared,
            addr,
            stop,
            accept,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn name(&self) -> &str {
        &self.shared.config.name
    }

    pub fn counters_snapshot(&self) -> BrokerCounters {
        self.shared.lock().counters.clone()
    }

    pub fn session_count(&self) -> usize {
        self.shared.lock().sessions.len()
    }

    pub fn subscription_count(&self) -> usize {
        self.shared.lock().registry.len()
    }

    /// Stops accepting and closes every connection.
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.accept.await;
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, mut stop: watch::Receiver<bool>) {
    let mut conns = tokio::task::JoinSet::new();
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    let conn_id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
                    conns.spawn(serve(stream, peer, conn_id, shared.clone(), stop.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
    conns.shutdown().await;
}

async fn write_packet(w: &mut OwnedWriteHalf, buf: &mut BytesMut, packet: &ControlPacket) -> std::io::Result<()> {
    buf.clear();
    codec::encode_to(packet, buf).map_err(std::io::Error::other)?;
    w.write_all(buf).await
}

fn disconnect(code: u8) -> ControlPacket {
    ControlPacket::Disconnect(Disconnect {
        reason: code,
        properties: Properties::default(),
    })
}

fn disconnect_reason(err: &FrameError) -> Option<u8> {
    match err {
        FrameError::Codec(CodecError::PacketTooLarge { .. }) => Some(reason::PACKET_TOO_LARGE),
        FrameError::Codec(_) => Some(reason::MALFORMED_PACKET),
        FrameError::Io(_) => None,
    }
}

fn authorized(config: &BrokerConfig, connect: &Connect) -> bool {
    let Some(table) = &config.credentials else {
        return true;
    };
    match (&connect.username, &connect.password) {
        (Some(user), Some(pass)) => table.get(user).is_some_and(|p| p.as_bytes() == pass.as_ref()),
        _ => false,
    }
}

async fn serve(
    stream: TcpStream,
    peer: SocketAddr,
    conn_id: u64,
    shared: Arc<Shared>,
    mut stop: watch::Receiver<bool>,
) {
    let (r, mut w) = stream.into_split();
    let mut reader = FrameReader::new(r, shared.config.max_packet_size);
    let mut wbuf = BytesMut::with_capacity(4096);

    let first = timeout(shared.config.connect_timeout, reader.next_packet()).await;
    let connect = match first {
        Ok(Ok(Some(ControlPacket::Connect(c)))) => c,
        Ok(Err(e)) => {
            if let Some(code) = disconnect_reason(&e) {
                let _ = write_packet(&mut w, &mut wbuf, &disconnect(code)).await;
            }
            debug!(%peer, "bad first packet: {e}");
            return;
        }
        _ => return,
    };

    if !authorized(&shared.config, &connect) {
        shared.lock().counters.connections_rejected += 1;
        let nack = ControlPacket::ConnAck(ConnAck {
            session_present: false,
            reason: reason::BAD_USERNAME_OR_PASSWORD,
            properties: Properties::default(),
        });
        let _ = write_packet(&mut w, &mut wbuf, &nack).await;
        let _ = w.shutdown().await;
        return;
    }

    let client_id = connect.client_id.clone();
    let session = Arc::new(Mutex::new(SessionState::new(
        client_id.clone(),
        connect.clean_start,
        shared.config.session.clone(),
    )));
    let wake = Arc::new(Notify::new());
    let takeover = Arc::new(Notify::new());
    {
        let mut st = shared.lock();
        st.counters.connections_accepted += 1;
        let previous = st.sessions.insert(
            client_id.clone(),
            SessionSlot {
                conn_id,
                state: session.clone(),
                wake: wake.clone(),
                takeover: takeover.clone(),
            },
        );
        if let Some(prev) = previous {
            st.registry.retain(|e| e.conn_id != prev.conn_id);
            prev.takeover.notify_one();
        }
    }

    let ack = ControlPacket::ConnAck(ConnAck {
        session_present: false,
        reason: reason::SUCCESS,
        properties: Properties::default(),
    });
    if write_packet(&mut w, &mut wbuf, &ack).await.is_err() {
        cleanup(&shared, &client_id, conn_id, &session);
        return;
    }

    let keep_alive = (connect.keep_alive > 0).then(|| Duration::from_millis(connect.keep_alive as u64 * 1500));
    let mut last_rx = Instant::now();
    let far = || Instant::now() + Duration::from_secs(3600);

    'conn: loop {
        let retry_at = session
            .lock()
            .expect("session poisoned")
            .next_deadline()
            .unwrap_or_else(far);
        let idle_at = keep_alive.map(|k| last_rx + k).unwrap_or_else(far);

        let actions = tokio::select! {
            frame = reader.next_packet() => match frame {
                Ok(Some(packet)) => {
                    last_rx = Instant::now();
                    let handled = session.lock().expect("session poisoned").handle_packet(packet, last_rx);
                    match handled {
                        Ok(actions) => actions,
                        Err(e) => {
                            debug!(%client_id, "protocol error: {e}");
                            let _ = write_packet(&mut w, &mut wbuf, &disconnect(e.reason_code())).await;
                            break 'conn;
                        }
                    }
                }
                Ok(None) => break 'conn,
                Err(e) => {
                    if let Some(code) = disconnect_reason(&e) {
                        let _ = write_packet(&mut w, &mut wbuf, &disconnect(code)).await;
                    }
                    break 'conn;
                }
            },
            _ = wake.notified() => session.lock().expect("session poisoned").pump(Instant::now()),
            _ = sleep_until(retry_at) => session.lock().expect("session poisoned").retransmit_sweep(Instant::now()),
            _ = sleep_until(idle_at) => {
                let _ = write_packet(&mut w, &mut wbuf, &disconnect(reason::KEEP_ALIVE_TIMEOUT)).await;
                break 'conn;
            }
            _ = takeover.notified() => {
                let _ = write_packet(&mut w, &mut wbuf, &disconnect(reason::SESSION_TAKEN_OVER)).await;
                break 'conn;
            }
            _ = stop.changed() => break 'conn,
        };

        for action in actions {
            match action {
                Action::Send(packet) => {
                    if write_packet(&mut w, &mut wbuf, &packet).await.is_err() {
                        break 'conn;
                    }
                }
                Action::Received { topic, duplicate } => {
                    let mut st = shared.lock();
                    st.counters.publishes_received += 1;
                    if duplicate {
                        st.counters.duplicates_suppressed += 1;
                    } else {
                        *st.counters
                            .per_topic_received
                            .entry(topic.as_str().to_owned())
                            .or_default() += 1;
                    }
                }
                Action::Forward(message) => shared.forward(message),
                Action::Subscribed(filters) => {
                    let mut st = shared.lock();
                    for (filter, options) in filters {
                        st.registry.retain(|e| !(e.conn_id == conn_id && e.filter == filter));
                        st.registry.insert(
                            &filter,
                            SubEntry {
                                client_id: client_id.clone(),
                                conn_id,
                                filter: filter.clone(),
                                options,
                            },
                        );
                    }
                }
                Action::Unsubscribed(filters) => {
                    let mut st = shared.lock();
                    for filter in filters {
                        st.registry.retain(|e| !(e.conn_id == conn_id && e.filter == filter));
                    }
                }
                Action::RetryExhausted => shared.lock().counters.retries_exhausted += 1,
                Action::Close => break 'conn,
            }
        }
    }

    let _ = w.shutdown().await;
    cleanup(&shared, &client_id, conn_id, &session);
}

fn cleanup(shared: &Shared, client_id: &str, conn_id: u64, session: &Mutex<SessionState>) {
    let abandoned = session.lock().expect("session poisoned").inbound_qos2.len() as u64;
    let mut st = shared.lock();
    st.counters.messages_abandoned += abandoned;
    st.registry.retain(|e| e.conn_id != conn_id);
    if st.sessions.get(client_id).is_some_and(|s| s.conn_id == conn_id) {
        st.sessions.remove(client_id);
    }
}
