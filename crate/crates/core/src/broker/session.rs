//! Per-client broker state and the QoS 0/1/2 transition table.
//!
//! Inbound (client to broker):
//!
//! | packet            | state                  | actions                              |
//! |-------------------|------------------------|--------------------------------------|
//! | PUBLISH q0        | -                      | received, forward                    |
//! | PUBLISH q1        | -                      | received, forward, PUBACK            |
//! | PUBLISH q2, id    | id not stored          | received, store id, PUBREC           |
//! | PUBLISH q2, id    | id stored              | received (duplicate), PUBREC         |
//! | PUBREL id         | id stored              | forward, release id, PUBCOMP         |
//! | PUBREL id         | id not stored          | PUBCOMP (packet id not found)        |
//!
//! Outbound (broker to subscriber) messages wait in a bounded queue, move
//! into the in-flight window, and leave it on PUBACK or PUBCOMP.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;
use tokio::time::Instant;

use crate::codec::{
    reason, Ack, ControlPacket, Properties, Publish, QoS, SubAck, Subscribe, SubscribeOptions, UnsubAck, Unsubscribe,
};
use crate::topics::{TopicFilter, TopicName};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub retry_interval: Duration,
    /// `None` retries forever.
    pub max_retries: Option<u32>,
    pub queue_capacity: usize,
    pub max_inflight: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            retry_interval: Duration::from_secs(1),
            max_retries: Some(10),
            queue_capacity: 1000,
            max_inflight: 10,
        }
    }
}

/// A message accepted by the broker, shared between all its deliveries.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub topic: TopicName,
    pub qos: QoS,
    pub retain: bool,
    pub properties: Properties,
    pub payload: Bytes,
    pub publisher: String,
}

impl Message {
    pub fn from_publish(p: Publish, publisher: &str) -> Self {
        Self {
            topic: p.topic,
            qos: p.qos,
            retain: p.retain,
            properties: p.properties,
            payload: p.payload,
            publisher: publisher.to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Delivery {
    pub message: Arc<Message>,
    pub qos: QoS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStage {
    AwaitingPubAck,
    AwaitingPubRec,
    AwaitingPubComp,
}

#[derive(Debug, Clone)]
pub struct Inflight {
    pub message: Arc<Message>,
    pub qos: QoS,
    pub stage: AckStage,
    pub deadline: Instant,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("unexpected {0} from client")]
    Unexpected(&'static str),
    #[error("QoS 2 publish reused packet id {0} with a different message")]
    PacketIdReused(u16),
}

impl ProtocolError {
    pub fn reason_code(&self) -> u8 {
        reason::PROTOCOL_ERROR
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("session queue full ({capacity} messages)")]
pub struct QueueOverflow {
    pub capacity: usize,
}

/// Side effects requested by the session; the broker applies them.
#[derive(Debug, Clone)]
pub enum Action {
    Send(ControlPacket),
    /// A PUBLISH was received; duplicates are suppressed QoS 2 retransmissions.
    Received {
        topic: TopicName,
        duplicate: bool,
    },
    Forward(Message),
    Subscribed(Vec<(TopicFilter, SubscribeOptions)>),
    Unsubscribed(Vec<TopicFilter>),
    /// An outbound delivery was abandoned after exhausting its retries.
    RetryExhausted,
    Close,
}

#[derive(Debug)]
pub struct SessionState {
    pub client_id: String,
    pub clean_start: bool,
    pub subscriptions: Vec<(TopicFilter, SubscribeOptions)>,
    pub inbound_qos2: HashMap<u16, Message>,
    pub outbound_inflight: BTreeMap<u16, Inflight>,
    pub outbound_queue: VecDeque<Delivery>,
    config: SessionConfig,
    next_packet_id: u16,
}

impl SessionState {
    pub fn new(client_id: impl Into<String>, clean_start: bool, config: SessionConfig) -> Self {
        Self {
            client_id: client_id.into(),
            clean_start,
            subscriptions: Vec::new(),
            inbound_qos2: HashMap::new(),
            outbound_inflight: BTreeMap::new(),
            outbound_queue: VecDeque::new(),
            config,
            next_packet_id: 1,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn handle_packet(&mut self, packet: ControlPacket, now: Instant) -> Result<Vec<Action>, ProtocolError> {
        let mut actions = Vec::new();
        match packet {
            ControlPacket::Publish(p) => self.on_publish(p, &mut actions)?,
            ControlPacket::PubRel(a) => match self.inbound_qos2.remove(&a.packet_id) {
                Some(message) => {
                    actions.push(Action::Forward(message));
                    actions.push(Action::Send(ControlPacket::PubComp(Ack::new(a.packet_id))));
                }
                None => {
                    let mut comp = Ack::new(a.packet_id);
                    comp.reason = reason::PACKET_ID_NOT_FOUND;
                    actions.push(Action::Send(ControlPacket::PubComp(comp)));
                }
            },
            ControlPacket::PubAck(a) => {
                if matches!(self.outbound_inflight.get(&a.packet_id), Some(f) if f.stage == AckStage::AwaitingPubAck) {
                    self.outbound_inflight.remove(&a.packet_id);
                }
                actions.extend(self.pump(now));
            }
            ControlPacket::PubRec(a) => {
                if let Some(f) = self.outbound_inflight.get_mut(&a.packet_id) {
                    if matches!(f.stage, AckStage::AwaitingPubRec | AckStage::AwaitingPubComp) {
                        f.stage = AckStage::AwaitingPubComp;
                        f.deadline = now + self.config.retry_interval;
                        actions.push(Action::Send(ControlPacket::PubRel(Ack::new(a.packet_id))));
                    }
                }
            }
            ControlPacket::PubComp(a) => {
                if matches!(self.outbound_inflight.get(&a.packet_id), Some(f) if f.stage == AckStage::AwaitingPubComp) {
                    self.outbound_inflight.remove(&a.packet_id);
                }
                actions.extend(self.pump(now));
            }
            ControlPacket::Subscribe(s) => self.on_subscribe(s, &mut actions),
            ControlPacket::Unsubscribe(u) => self.on_unsubscribe(u, &mut actions),
            ControlPacket::PingReq => actions.push(Action::Send(ControlPacket::PingResp)),
            ControlPacket::Disconnect(_) => actions.push(Action::Close),
            ControlPacket::Connect(_) => return Err(ProtocolError::Unexpected("second CONNECT")),
            ControlPacket::ConnAck(_) => return Err(ProtocolError::Unexpected("CONNACK")),
            ControlPacket::SubAck(_) => return Err(ProtocolError::Unexpected("SUBACK")),
            ControlPacket::UnsubAck(_) => return Err(ProtocolError::Unexpected("UNSUBACK")),
            ControlPacket::PingResp => return Err(ProtocolError::Unexpected("PINGRESP")),
        }
        Ok(actions)
    }

    fn on_publish(&mut self, p: Publish, actions: &mut Vec<Action>) -> Result<(), ProtocolError> {
        let topic = p.topic.clone();
        match (p.qos, p.packet_id) {
            (QoS::AtMostOnce, _) => {
                actions.push(Action::Received {
                    topic,
                    duplicate: false,
                });
                actions.push(Action::Forward(Message::from_publish(p, &self.client_id)));
            }
            (QoS::AtLeastOnce, Some(id)) => {
                actions.push(Action::Received {
                    topic,
                    duplicate: false,
                });
                actions.push(Action::Forward(Message::from_publish(p, &self.client_id)));
                actions.push(Action::Send(ControlPacket::PubAck(Ack::new(id))));
            }
            (QoS::ExactlyOnce, Some(id)) => {
                if let Some(stored) = self.inbound_qos2.get(&id) {
                    if !p.dup && stored.payload != p.payload {
                        return Err(ProtocolError::PacketIdReused(id));
                    }
                    actions.push(Action::Received { topic, duplicate: true });
                } else {
                    actions.push(Action::Received {
                        topic,
                        duplicate: false,
                    });
                    self.inbound_qos2.insert(id, Message::from_publish(p, &self.client_id));
                }
                actions.push(Action::Send(ControlPacket::PubRec(Ack::new(id))));
            }
            (_, None) => return Err(ProtocolError::Unexpected("PUBLISH without packet id")),
        }
        Ok(())
    }

    fn on_subscribe(&mut self, s: Subscribe, actions: &mut Vec<Action>) {
        let mut reasons = Vec::with_capacity(s.filters.len());
        for (filter, options) in &s.filters {
            self.subscriptions.retain(|(f, _)| f != filter);
            self.subscriptions.push((filter.clone(), *options));
            reasons.push(options.max_qos.level());
        }
        actions.push(Action::Subscribed(s.filters));
        actions.push(Action::Send(ControlPacket::SubAck(SubAck {
            packet_id: s.packet_id,
            properties: Properties::default(),
            reasons,
        })));
    }

    fn on_unsubscribe(&mut self, u: Unsubscribe, actions: &mut Vec<Action>) {
        let reasons = u
            .filters
            .iter()
            .map(|filter| {
                let before = self.subscriptions.len();
                self.subscriptions.retain(|(f, _)| f != filter);
                if self.subscriptions.len() < before {
                    reason::SUCCESS
                } else {
                    reason::NO_SUBSCRIPTION_EXISTED
                }
            })
            .collect();
        actions.push(Action::Unsubscribed(u.filters));
        actions.push(Action::Send(ControlPacket::UnsubAck(UnsubAck {
            packet_id: u.packet_id,
            properties: Properties::default(),
            reasons,
        })));
    }

    /// Queues a delivery for this subscriber, bounded by `queue_capacity`.
    pub fn enqueue(&mut self, delivery: Delivery) -> Result<(), QueueOverflow> {
        if self.outbound_queue.len() >= self.config.queue_capacity {
            return Err(QueueOverflow {
                capacity: self.config.queue_capacity,
            });
        }
        self.outbound_queue.push_back(delivery);
        Ok(())
    }

    fn allocate_packet_id(&mut self) -> u16 {
        loop {
            let id = self.next_packet_id;
            self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
            if !self.outbound_inflight.contains_key(&id) {
                return id;
            }
        }
    }

    /// Moves queued deliveries into flight while the window allows.
    pub fn pump(&mut self, now: Instant) -> Vec<Action> {
        let mut actions = Vec::new();
        while let Some(front) = self.outbound_queue.front() {
            if front.qos != QoS::AtMostOnce && self.outbound_inflight.len() >= self.config.max_inflight {
                break;
            }
            let delivery = self.outbound_queue.pop_front().expect("front exists");
            let packet_id = match delivery.qos {
                QoS::AtMostOnce => None,
                qos => {
                    let id = self.allocate_packet_id();
                    self.outbound_inflight.insert(
                        id,
                        Inflight {
                            message: delivery.message.clone(),
                            qos,
                            stage: if qos == QoS::AtLeastOnce {
                                AckStage::AwaitingPubAck
                            } else {
                                AckStage::AwaitingPubRec
                            },
                            deadline: now + self.config.retry_interval,
                            retries: 0,
                        },
                    );
                    Some(id)
                }
            };
            actions.push(Action::Send(ControlPacket::Publish(outbound_publish(
                &delivery.message,
                delivery.qos,
                packet_id,
                false,
            ))));
        }
        actions
    }

    /// Re-sends in-flight messages whose ack deadline has passed.
    pub fn retransmit_sweep(&mut self, now: Instant) -> Vec<Action> {
        let mut actions = Vec::new();
        let mut exhausted = Vec::new();
        for (&id, f) in self.outbound_inflight.iter_mut() {
            if f.deadline > now {
                continue;
            }
            if self.config.max_retries.is_some_and(|max| f.retries >= max) {
                exhausted.push(id);
                continue;
            }
            f.retries += 1;
            f.deadline = now + self.config.retry_interval;
            let packet = match f.stage {
                AckStage::AwaitingPubComp => ControlPacket::PubRel(Ack::new(id)),
                _ => ControlPacket::Publish(outbound_publish(&f.message, f.qos, Some(id), true)),
            };
            actions.push(Action::Send(packet));
        }
        for id in exhausted {
            self.outbound_inflight.remove(&id);
            actions.push(Action::RetryExhausted);
        }
        if actions.iter().any(|a| matches!(a, Action::RetryExhausted)) {
            actions.extend(self.pump(now));
        }
        actions
    }

    /// Earliest retransmission deadline, if anything is in flight.
    pub fn next_deadline(&self) -> Option<Instant> {
        self.outbound_inflight.values().map(|f| f.deadline).min()
    }
}

fn outbound_publish(message: &Message, qos: QoS, packet_id: Option<u16>, dup: bool) -> Publish {
    Publish {
        topic: message.topic.clone(),
        qos,
        dup,
        retain: false,
        packet_id,
        properties: message.properties.clone(),
        payload: message.payload.clone(),
    }
}
