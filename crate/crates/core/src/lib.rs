//! MQTT 5.0 building blocks for bridge benchmarking: a wire codec, topic
//! matching, a single-instance broker, a client, and a seeded link
//! impairment layer that every client connection runs through.

pub mod broker;
pub mod client;
pub mod clock;
pub mod codec;
pub mod framing;
pub mod netem;
pub mod topics;
