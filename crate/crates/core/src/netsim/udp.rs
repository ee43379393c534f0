//! Datagram transport.
