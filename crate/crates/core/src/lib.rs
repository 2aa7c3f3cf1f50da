//! Deterministic userspace NAT router simulation.
//!
//! Packets are real IPv4 datagrams ([`packet`]), routers are configured with
//! iptables command lines ([`rule`], [`chain`]), translation is connection
//! tracked ([`conntrack`]), and whole topologies run on a virtual clock
//! ([`pipeline`]) driven by plain-text scenario files ([`scenario`]).

pub mod addr;
pub mod chain;
pub mod checksum;
pub mod conntrack;
pub mod packet;
pub mod pipeline;
pub mod routing;
pub mod rule;
pub mod scenario;
pub mod trace;

pub use addr::Cidr;
pub use chain::{Chain, NatKind, Policy, TableSet, Verdict};
pub use checksum::{checksum16, ones_complement_sum};
pub use conntrack::{ConnEntry, ConnTable, NatError, PortAllocator, VirtualTime};
pub use packet::{EchoKind, Endpoint, FiveTuple, IpProtocol, Packet, PacketError, Transport};
pub use rule::{parse_rule_command, render_rule_command, rule_matches, PacketContext, Rule, RuleCommand};
