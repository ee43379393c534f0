//! Streaming in-network aggregation over a pool of integer accumulator slots.
//!
//! A switch-side state machine ([`switch`]) sums fixed-size integer vectors
//! contributed by `n` workers into a small pool of `s` slots, multicasting
//! each completed sum back. Workers ([`worker`]) stream arbitrarily large
//! update vectors through the pool with a self-clocked window of at most `s`
//! outstanding packets, recover from packet loss by timeout-driven
//! retransmission, and rely on per-worker `seen` bitmaps plus a shadow copy
//! of every slot's previous result to make retransmissions idempotent.
//!
//! Floating-point updates are carried as fixed-point 32-bit integers
//! ([`quant`]); the scaling factor is chosen so that no partial sum can
//! overflow and the aggregate error stays below `n / f` per element.
//!
//! The protocol runs either over a deterministic discrete-event network
//! simulator ([`netsim`]) with seeded loss/duplication/jitter and scripted
//! fault injection, or over real UDP datagrams ([`netsim::udp`]). [`collective`]
//! layers a synchronous all-reduce for streams of tensors on top, and
//! [`bench`] holds the benchmark harness behind the `inagg` CLI.

pub mod bench;
pub mod collective;
pub mod netsim;
pub mod quant;
pub mod switch;
pub mod wire;
pub mod worker;

pub use wire::AggregationPacket;
