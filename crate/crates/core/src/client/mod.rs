//! MQTT client used by gateways, bridges and the measuring subscriber.
//!
//! Every connection runs through a [`LinkProfile`], so loss and delay apply
//! to the client's own packets and to everything the broker sends back.

mod transport;

pub use transport::{LinkCounts, LinkStats};

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::{sleep, sleep_until, timeout, Instant};
use tracing::debug;

use crate::clock::RunClock;
use crate::codec::{
    reason, Ack, CodecError, ConnAck, Connect, ControlPacket, Disconnect, Properties, Publish, QoS, Subscribe,
    SubscribeOptions, Unsubscribe, SEQ_PROPERTY, TS_PROPERTY,
};
use crate::framing::decode_frame;
use crate::netem::{DropTrace, LinkProfile};
use crate::topics::{TopicFilter, TopicName};

use transport::{Arrival, Outbound};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub client_id: String,
    pub broker: SocketAddr,
    /// Seconds; 0 disables keep-alive.
    pub keep_alive: u16,
    pub clean_start: bool,
    pub credentials: Option<(String, String)>,
    /// How long to wait for CONNACK on one attempt.
    pub connect_timeout: Duration,
    /// Total TCP+CONNECT attempts before giving up.
    pub connect_attempts: u32,
    pub ack_timeout: Duration,
    /// `None` retransmits until acknowledged or disconnected.
    pub max_retries: Option<u32>,
    pub link: LinkProfile,
    /// Name of this connection in drop traces; defaults to the client id.
    pub link_id: Option<String>,
    pub trace: Option<DropTrace>,
    pub clock: RunClock,
    pub max_packet_size: usize,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>, broker: SocketAddr) -> Self {
        Self {
            client_id: client_id.into(),
            broker,
            keep_alive: 60,
            clean_start: true,
            credentials: None,
            connect_timeout: Duration::from_secs(5),
            connect_attempts: 3,
            ack_timeout: Duration::from_secs(1),
            max_retries: Some(10),
            link: LinkProfile::ideal(),
            link_id: None,
            trace: None,
            clock: RunClock::start(),
            max_packet_size: 1 << 20,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("broker rejected credentials (reason {0:#04x})")]
    AuthFailure(u8),
    #[error("broker refused connection (reason {0:#04x})")]
    Refused(u8),
    #[error("no CONNACK after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("subscription rejected (reason {0:#04x})")]
    SubackFailure(u8),
    #[error("no acknowledgement after retries")]
    RetryExhausted,
    #[error("connection lost")]
    ConnectionLost,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    RetryExhausted,
    ConnectionLost,
    /// The message was never sent because no connection could be made.
    NotConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishResult {
    Ok,
    Failed(FailReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PublishOutcome {
    pub seq: u64,
    pub qos: QoS,
    pub t_publish_us: u64,
    /// Ack completion for QoS 1/2; equal to `t_publish_us` for QoS 0.
    pub t_complete_us: u64,
    pub retries: u32,
    pub result: PublishResult,
}

impl PublishOutcome {
    pub fn is_ok(&self) -> bool {
        self.result == PublishResult::Ok
    }
}

/// A message delivered to a subscription sink.
#[derive(Debug, Clone)]
pub struct InboundMessage {
    pub topic: TopicName,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
    pub properties: Properties,
    pub arrival_us: u64,
}

impl InboundMessage {
    pub fn ts_us(&self) -> Option<u64> {
        self.properties.user_property(TS_PROPERTY)?.parse().ok()
    }

    pub fn seq(&self) -> Option<u64> {
        self.properties.user_property(SEQ_PROPERTY)?.parse().ok()
    }
}

pub type Sink = mpsc::UnboundedSender<InboundMessage>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    PubAck,
    PubRec,
    PubComp,
}

enum AckEvent {
    Progress,
    Done,
}

struct Pending {
    stage: Stage,
    events: mpsc::UnboundedSender<AckEvent>,
}

#[derive(Default)]
struct State {
    next_id: u16,
    pending: HashMap<u16, Pending>,
    requests: HashMap<u16, oneshot::Sender<ControlPacket>>,
    inbound_qos2: HashSet<u16>,
    subs: Vec<(TopicFilter, Sink)>,
    next_seq: u64,
    connack: Option<oneshot::Sender<ConnAck>>,
}

impl State {
    fn allocate_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            let id = self.next_id;
            if !self.pending.contains_key(&id) && !self.requests.contains_key(&id) {
                return id;
            }
        }
    }
}

struct Inner {
    config: ClientConfig,
    out: Arc<Outbound>,
    state: Mutex<State>,
    closed: watch::Sender<bool>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    attempts: u32,
}

impl Inner {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("client state poisoned")
    }

    fn is_closed(&self) -> bool {
        *self.closed.borrow()
    }

    fn send(&self, packet: &ControlPacket) -> Result<bool, ClientError> {
        if self.is_closed() {
            return Err(ClientError::ConnectionLost);
        }
        Ok(self.out.send(packet)?)
    }

    /// Marks the connection gone and fails everything waiting on it.
    fn close(&self) {
        self.closed.send_replace(true);
        let mut st = self.lock();
        st.pending.clear();
        st.requests.clear();
        st.connack = None;
        drop(st);
        self.out.close();
    }
}

/// Cheaply cloneable handle to one live connection.
#[derive(Clone)]
pub struct Client {
    inner: Arc<Inner>,
}

impl Client {
    /// Connects, retrying on timeout or I/O failure up to `connect_attempts`.
    /// Each attempt is a fresh TCP connection with its own link id.
    pub async fn connect(config: ClientConfig) -> Result<Client, ClientError> {
        let attempts = config.connect_attempts.max(1);
        let mut last_err = None;
        for attempt in 1..=attempts {
            match Self::try_connect(&config, attempt).await {
                Ok(client) => return Ok(client),
                Err(e @ (ClientError::AuthFailure(_) | ClientError::Refused(_))) => return Err(e),
                Err(e) => {
                    debug!(client = %config.client_id, attempt, "connect failed: {e}");
                    last_err = Some(e);
                }
            }
        }
        match last_err {
            Some(ClientError::Io(e)) => Err(ClientError::Io(e)),
            _ => Err(ClientError::Timeout { attempts }),
        }
    }

    async fn try_connect(config: &ClientConfig, attempt: u32) -> Result<Client, ClientError> {
        sleep(config.link.connection_overhead()).await;
        let stream = timeout(config.connect_timeout, TcpStream::connect(config.broker))
            .await
            .map_err(|_| ClientError::Timeout { attempts: attempt })??;
        stream.set_nodelay(true)?;
        let (r, w) = stream.into_split();
        let base = config.link_id.as_deref().unwrap_or(&config.client_id);
        let link_id = format!("{base}@{attempt}");
        let link = transport::open(
            r,
            w,
            &config.link,
            &link_id,
            config.trace.clone(),
            config.max_packet_size,
        );

        let (connack_tx, connack_rx) = oneshot::channel();
        let inner = Arc::new(Inner {
            config: config.clone(),
            out: link.outbound.clone(),
            state: Mutex::new(State {
                connack: Some(connack_tx),
                ..State::default()
            }),
            closed: watch::channel(false).0,
            tasks: Mutex::new(vec![link.reader]),
            writer: Mutex::new(Some(link.writer)),
            attempts: attempt,
        });
        let dispatcher = tokio::spawn(dispatch(inner.clone(), link.inbound));
        inner.tasks.lock().expect("tasks poisoned").push(dispatcher);

        let (username, password) = match &config.credentials {
            Some((u, p)) => (Some(u.clone()), Some(Bytes::from(p.clone().into_bytes()))),
            None => (None, None),
        };
        inner.send(&ControlPacket::Connect(Connect {
            client_id: config.client_id.clone(),
            clean_start: config.clean_start,
            keep_alive: config.keep_alive,
            username,
            password,
            properties: Properties::default(),
        }))?;

        let client = Client { inner };
        match timeout(config.connect_timeout, connack_rx).await {
            Ok(Ok(ack)) if ack.reason == reason::SUCCESS => {
                if config.keep_alive > 0 {
                    let ka = tokio::spawn(keep_alive(client.inner.clone()));
                    client.inner.tasks.lock().expect("tasks poisoned").push(ka);
                }
                Ok(client)
            }
            Ok(Ok(ack)) => {
                client.abort();
                if matches!(ack.reason, reason::BAD_USERNAME_OR_PASSWORD | 0x87) {
                    Err(ClientError::AuthFailure(ack.reason))
                } else {
                    Err(ClientError::Refused(ack.reason))
                }
            }
            Ok(Err(_)) => {
                client.abort();
                Err(ClientError::ConnectionLost)
            }
            Err(_) => {
                client.abort();
                Err(ClientError::Timeout { attempts: attempt })
            }
        }
    }

    fn abort(&self) {
        self.inner.close();
        for t in self.inner.tasks.lock().expect("tasks poisoned").drain(..) {
            t.abort();
        }
        if let Some(w) = self.inner.writer.lock().expect("writer poisoned").take() {
            w.abort();
        }
    }

    pub fn client_id(&self) -> &str {
        &self.inner.config.client_id
    }

    /// Which attempt succeeded, starting at 1.
    pub fn connect_attempts(&self) -> u32 {
        self.inner.attempts
    }

    pub fn link_counts(&self) -> LinkCounts {
        self.inner.out.stats.snapshot()
    }

    pub fn is_connected(&self) -> bool {
        !self.inner.is_closed()
    }

    pub fn clock(&self) -> RunClock {
        self.inner.config.clock
    }

    /// Publishes with fresh `ts_us` and `seq` stamps. `seq` defaults to a
    /// per-connection counter. The timestamp is taken immediately before
    /// the packet is encoded.
    pub async fn publish(
        &self,
        topic: TopicName,
        payload: impl Into<Bytes>,
        qos: QoS,
        seq: Option<u64>,
        user: Vec<(String, String)>,
    ) -> PublishOutcome {
        let seq = seq.unwrap_or_else(|| {
            let mut st = self.inner.lock();
            let s = st.next_seq;
            st.next_seq += 1;
            s
        });
        let mut p = Publish::new(topic, qos, payload);
        p.properties.user = user;
        p.properties.set_user_property(SEQ_PROPERTY, seq.to_string());
        self.send_publish(p, seq, true).await
    }

    /// Publishes as given, keeping whatever stamps the properties carry.
    pub async fn republish(&self, p: Publish) -> PublishOutcome {
        let seq = p
            .properties
            .user_property(SEQ_PROPERTY)
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        self.send_publish(p, seq, false).await
    }

    async fn send_publish(&self, mut p: Publish, seq: u64, stamp: bool) -> PublishOutcome {
        let clock = self.inner.config.clock;
        let qos = p.qos;
        let mut outcome = PublishOutcome {
            seq,
            qos,
            t_publish_us: clock.now_us(),
            t_complete_us: 0,
            retries: 0,
            result: PublishResult::Failed(FailReason::ConnectionLost),
        };

        let mut events = None;
        if qos != QoS::AtMostOnce {
            let (tx, rx) = mpsc::unbounded_channel();
            let mut st = self.inner.lock();
            let id = st.allocate_id();
            st.pending.insert(
                id,
                Pending {
                    stage: if qos == QoS::AtLeastOnce {
                        Stage::PubAck
                    } else {
                        Stage::PubRec
                    },
                    events: tx,
                },
            );
            p.packet_id = Some(id);
            events = Some(rx);
        }
        if stamp {
            outcome.t_publish_us = clock.now_us();
            p.properties
                .set_user_property(TS_PROPERTY, outcome.t_publish_us.to_string());
        }
        let packet = ControlPacket::Publish(p);
        if self.inner.send(&packet).is_err() {
            outcome.t_complete_us = clock.now_us();
            return outcome;
        }
        let Some(mut events) = events else {
            outcome.t_complete_us = outcome.t_publish_us;
            outcome.result = PublishResult::Ok;
            return outcome;
        };
        let ControlPacket::Publish(mut p) = packet else {
            unreachable!()
        };
        let id = p.packet_id.expect("assigned above");
        p.dup = true;

        let result = loop {
            match timeout(self.inner.config.ack_timeout, events.recv()).await {
                Ok(Some(AckEvent::Done)) => break PublishResult::Ok,
                Ok(Some(AckEvent::Progress)) => continue,
                Ok(None) => break PublishResult::Failed(FailReason::ConnectionLost),
                Err(_) => {
                    if self.inner.config.max_retries.is_some_and(|m| outcome.retries >= m) {
                        self.inner.lock().pending.remove(&id);
                        break PublishResult::Failed(FailReason::RetryExhausted);
                    }
                    let stage = self.inner.lock().pending.get(&id).map(|pd| pd.stage);
                    let resend = match stage {
                        Some(Stage::PubComp) => ControlPacket::PubRel(Ack::new(id)),
                        Some(_) => ControlPacket::Publish(p.clone()),
                        None => continue,
                    };
                    outcome.retries += 1;
                    if self.inner.send(&resend).is_err() {
                        break PublishResult::Failed(FailReason::ConnectionLost);
                    }
                }
            }
        };
        outcome.result = result;
        outcome.t_complete_us = clock.now_us();
        outcome
    }

    async fn request(&self, id: u16, packet: ControlPacket) -> Result<ControlPacket, ClientError> {
        let (tx, mut rx) = oneshot::channel();
        self.inner.lock().requests.insert(id, tx);
        let mut retries = 0;
        self.inner.send(&packet)?;
        loop {
            match timeout(self.inner.config.ack_timeout, &mut rx).await {
                Ok(Ok(reply)) => return Ok(reply),
                Ok(Err(_)) => return Err(ClientError::ConnectionLost),
                Err(_) => {
                    if self.inner.config.max_retries.is_some_and(|m| retries >= m) {
                        self.inner.lock().requests.remove(&id);
                        return Err(ClientError::RetryExhausted);
                    }
                    retries += 1;
                    self.inner.send(&packet)?;
                }
            }
        }
    }

    /// Subscribes and routes matching inbound messages to `sink`. The sink is
    /// registered before SUBSCRIBE goes out, so nothing arriving after
    /// SUBACK is missed.
    pub async fn subscribe(
        &self,
        filter: TopicFilter,
        options: SubscribeOptions,
        sink: Sink,
    ) -> Result<QoS, ClientError> {
        self.subscribe_many(vec![(filter, options)], sink).await.map(|g| g[0])
    }

    pub async fn subscribe_many(
        &self,
        filters: Vec<(TopicFilter, SubscribeOptions)>,
        sink: Sink,
    ) -> Result<Vec<QoS>, ClientError> {
        let id = {
            let mut st = self.inner.lock();
            for (f, _) in &filters {
                st.subs.push((f.clone(), sink.clone()));
            }
            st.allocate_id()
        };
        let packet = ControlPacket::Subscribe(Subscribe {
            packet_id: id,
            properties: Properties::default(),
            filters,
        });
        match self.request(id, packet).await? {
            ControlPacket::SubAck(ack) => ack
                .reasons
                .iter()
                .map(|&r| QoS::from_u8(r).ok_or(ClientError::SubackFailure(r)))
                .collect(),
            _ => Err(ClientError::ConnectionLost),
        }
    }

    pub async fn unsubscribe(&self, filter: TopicFilter) -> Result<(), ClientError> {
        let id = {
            let mut st = self.inner.lock();
            st.subs.retain(|(f, _)| *f != filter);
            st.allocate_id()
        };
        let packet = ControlPacket::Unsubscribe(Unsubscribe {
            packet_id: id,
            properties: Properties::default(),
            filters: vec![filter],
        });
        self.request(id, packet).await.map(|_| ())
    }

    /// Sends DISCONNECT, waits for the link to flush it and closes the
    /// socket. Unacknowledged publishes fail with `ConnectionLost`.
    pub async fn disconnect(&self) {
        let _ = self.inner.send(&ControlPacket::Disconnect(Disconnect::default()));
        self.inner.close();
        let writer = self.inner.writer.lock().expect("writer poisoned").take();
        if let Some(w) = writer {
            let _ = w.await;
        }
        for t in self.inner.tasks.lock().expect("tasks poisoned").drain(..) {
            t.abort();
        }
    }

    /// Resolves once the connection is gone for any reason.
    pub async fn closed(&self) {
        let mut rx = self.inner.closed.subscribe();
        let _ = rx.wait_for(|c| *c).await;
    }
}

async fn keep_alive(inner: Arc<Inner>) {
    let period = Duration::from_secs(inner.config.keep_alive as u64) / 2;
    let mut closed = inner.closed.subscribe();
    loop {
        let due = inner.out.last_send() + period;
        tokio::select! {
            _ = closed.wait_for(|c| *c) => return,
            _ = sleep_until(due) => {
                if inner.out.last_send() + period <= Instant::now() && inner.send(&ControlPacket::PingReq).is_err() {
                    return;
                }
            }
        }
    }
}

async fn dispatch(inner: Arc<Inner>, mut inbound: mpsc::UnboundedReceiver<(Instant, Arrival)>) {
    while let Some((at, arrival)) = inbound.recv().await {
        sleep_until(at).await;
        let frame = match arrival {
            Arrival::Frame(f) => f,
            Arrival::Closed => break,
        };
        let packet = match decode_frame(&frame) {
            Ok(p) => p,
            Err(e) => {
                debug!(client = %inner.config.client_id, "undecodable packet: {e}");
                break;
            }
        };
        if !handle(&inner, packet) {
            break;
        }
    }
    inner.close();
}

/// Returns false when the connection should end.
fn handle(inner: &Inner, packet: ControlPacket) -> bool {
    match packet {
        ControlPacket::ConnAck(ack) => {
            if let Some(tx) = inner.lock().connack.take() {
                let _ = tx.send(ack);
            }
        }
        ControlPacket::Publish(p) => {
            let reply = match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, _) => {
                    deliver(inner, p);
                    None
                }
                (QoS::AtLeastOnce, Some(id)) => {
                    deliver(inner, p);
                    Some(ControlPacket::PubAck(Ack::new(id)))
                }
                (QoS::ExactlyOnce, Some(id)) => {
                    if inner.lock().inbound_qos2.insert(id) {
                        deliver(inner, p);
                    }
                    Some(ControlPacket::PubRec(Ack::new(id)))
                }
                _ => return false,
            };
            if let Some(r) = reply {
                let _ = inner.send(&r);
            }
        }
        ControlPacket::PubRel(a) => {
            inner.lock().inbound_qos2.remove(&a.packet_id);
            let _ = inner.send(&ControlPacket::PubComp(Ack::new(a.packet_id)));
        }
        ControlPacket::PubAck(a) | ControlPacket::PubComp(a) => {
            if let Some(pd) = inner.lock().pending.remove(&a.packet_id) {
                let _ = pd.events.send(AckEvent::Done);
            }
        }
        ControlPacket::PubRec(a) => {
            let progressed = {
                let mut st = inner.lock();
                match st.pending.get_mut(&a.packet_id) {
                    Some(pd) if pd.stage != Stage::PubAck => {
                        pd.stage = Stage::PubComp;
                        let _ = pd.events.send(AckEvent::Progress);
                        true
                    }
                    _ => false,
                }
            };
            if progressed || a.reason < 0x80 {
                let _ = inner.send(&ControlPacket::PubRel(Ack::new(a.packet_id)));
            }
        }
        ControlPacket::SubAck(ack) => {
            if let Some(tx) = inner.lock().requests.remove(&ack.packet_id) {
                let _ = tx.send(ControlPacket::SubAck(ack));
            }
        }
        ControlPacket::UnsubAck(ack) => {
            if let Some(tx) = inner.lock().requests.remove(&ack.packet_id) {
                let _ = tx.send(ControlPacket::UnsubAck(ack));
            }
        }
        ControlPacket::PingResp => {}
        ControlPacket::Disconnect(d) => {
            debug!(client = %inner.config.client_id, reason = d.reason, "broker disconnected");
            return false;
        }
        ControlPacket::Connect(_)
        | ControlPacket::Subscribe(_)
        | ControlPacket::Unsubscribe(_)
        | ControlPacket::PingReq => return false,
    }
    true
}

fn deliver(inner: &Inner, p: Publish) {
    let sink = {
        let st = inner.lock();
        st.subs
            .iter()
            .find(|(f, _)| f.matches(&p.topic))
            .map(|(_, s)| s.clone())
    };
    let Some(sink) = sink else { return };
    let _ = sink.send(InboundMessage {
        topic: p.topic,
        payload: p.payload,
        qos: p.qos,
        retain: p.retain,
        dup: p.dup,
        properties: p.properties,
        arrival_us: inner.config.clock.now_us(),
    });
}
