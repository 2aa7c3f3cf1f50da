//! IPv4 datagrams carrying one TCP, UDP or ICMP echo message.
//!
//! The wire layout is the standard one (big-endian, 20-byte IPv4 header with no
//! options, 20-byte TCP header with no options, 8-byte UDP and ICMP headers).
//! Every byte sequence accepted by [`Packet::parse`] is reproduced exactly by
//! [`Packet::to_bytes`].

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::checksum::{ones_complement_sum, pseudo_header_sum};

pub const IPV4_HEADER_LEN: usize = 20;
pub const TCP_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const ICMP_HEADER_LEN: usize = 8;

pub const DEFAULT_TTL: u8 = 64;

const FLAG_RESERVED: u16 = 0x8000;
const FLAG_DONT_FRAGMENT: u16 = 0x4000;
const FLAG_MORE_FRAGMENTS: u16 = 0x2000;
const FRAGMENT_OFFSET_MASK: u16 = 0x1FFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IpProtocol {
    Icmp = 1,
    Tcp = 6,
    Udp = 17,
}

impl IpProtocol {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(IpProtocol::Icmp),
            6 => Some(IpProtocol::Tcp),
            17 => Some(IpProtocol::Udp),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            IpProtocol::Icmp => "icmp",
            IpProtocol::Tcp => "tcp",
            IpProtocol::Udp => "udp",
        }
    }
}

impl fmt::Display for IpProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IpProtocol {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "icmp" => Ok(IpProtocol::Icmp),
            "tcp" => Ok(IpProtocol::Tcp),
            "udp" => Ok(IpProtocol::Udp),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    /// DSCP + ECN byte, carried verbatim.
    pub tos: u8,
    pub total_length: u16,
    pub identification: u16,
    pub dont_fragment: bool,
    pub ttl: u8,
    pub protocol: IpProtocol,
    pub header_checksum: u16,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EchoKind {
    Request = 8,
    Reply = 0,
}

impl EchoKind {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    pub urgent: u16,
    pub checksum: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    /// Zero means "no checksum" on the wire; accepted on parse only.
    pub checksum: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpEcho {
    pub kind: EchoKind,
    pub identifier: u16,
    pub sequence: u16,
    pub checksum: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Tcp(TcpHeader),
    Udp(UdpHeader),
    Icmp(IcmpEcho),
}

impl Transport {
    pub fn protocol(&self) -> IpProtocol {
        match self {
            Transport::Tcp(_) => IpProtocol::Tcp,
            Transport::Udp(_) => IpProtocol::Udp,
            Transport::Icmp(_) => IpProtocol::Icmp,
        }
    }

    pub fn header_len(&self) -> usize {
        match self {
            Transport::Tcp(_) => TCP_HEADER_LEN,
            Transport::Udp(_) => UDP_HEADER_LEN,
            Transport::Icmp(_) => ICMP_HEADER_LEN,
        }
    }

    pub fn checksum(&self) -> u16 {
        match self {
            Transport::Tcp(h) => h.checksum,
            Transport::Udp(h) => h.checksum,
            Transport::Icmp(h) => h.checksum,
        }
    }

    fn set_checksum(&mut self, value: u16) {
        match self {
            Transport::Tcp(h) => h.checksum = value,
            Transport::Udp(h) => h.checksum = value,
            Transport::Icmp(h) => h.checksum = value,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Transport::Tcp(h) => {
                out.extend_from_slice(&h.src_port.to_be_bytes());
                out.extend_from_slice(&h.dst_port.to_be_bytes());
                out.extend_from_slice(&h.seq.to_be_bytes());
                out.extend_from_slice(&h.ack.to_be_bytes());
                out.push(((TCP_HEADER_LEN / 4) as u8) << 4);
                out.push(h.flags);
                out.extend_from_slice(&h.window.to_be_bytes());
                out.extend_from_slice(&h.checksum.to_be_bytes());
                out.extend_from_slice(&h.urgent.to_be_bytes());
            }
            Transport::Udp(h) => {
                out.extend_from_slice(&h.src_port.to_be_bytes());
                out.extend_from_slice(&h.dst_port.to_be_bytes());
                out.extend_from_slice(&h.length.to_be_bytes());
                out.extend_from_slice(&h.checksum.to_be_bytes());
            }
            Transport::Icmp(h) => {
                out.push(h.kind.code());
                out.push(0);
                out.extend_from_slice(&h.checksum.to_be_bytes());
                out.extend_from_slice(&h.identifier.to_be_bytes());
                out.extend_from_slice(&h.sequence.to_be_bytes());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChecksumLayer {
    Ip,
    Transport,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("truncated packet: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad IP version {0}")]
    BadVersion(u8),
    #[error("bad {0:?} checksum")]
    BadChecksum(ChecksumLayer),
    #[error("unsupported IP protocol {0}")]
    UnsupportedProtocol(u8),
    #[error("header options present")]
    OptionsPresent,
    #[error("fragmented datagram")]
    Fragmented,
    #[error("reserved header bits set")]
    ReservedBits,
    #[error("length field disagrees with datagram size")]
    LengthMismatch,
    #[error("unsupported ICMP type {kind} code {code}")]
    UnsupportedIcmp { kind: u8, code: u8 },
}

/// Signalled by [`Packet::decrement_ttl`] when the hop limit runs out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("ttl expired")]
pub struct Expired;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Source,
    Destination,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub ip: Ipv4Header,
    pub transport: Transport,
    pub payload: Vec<u8>,
}

impl Packet {
    fn build(src: Ipv4Addr, dst: Ipv4Addr, transport: Transport, payload: Vec<u8>) -> Packet {
        let mut p = Packet {
            ip: Ipv4Header {
                tos: 0,
                total_length: 0,
                identification: 0,
                dont_fragment: false,
                ttl: DEFAULT_TTL,
                protocol: transport.protocol(),
                header_checksum: 0,
                src,
                dst,
            },
            transport,
            payload,
        };
        p.seal();
        p
    }

    pub fn icmp_echo(
        src: Ipv4Addr,
        dst: Ipv4Addr,
        kind: EchoKind,
        identifier: u16,
        sequence: u16,
        payload: Vec<u8>,
    ) -> Packet {
        let echo = IcmpEcho {
            kind,
            identifier,
            sequence,
            checksum: 0,
        };
        Packet::build(src, dst, Transport::Icmp(echo), payload)
    }

    pub fn udp(src: Ipv4Addr, src_port: u16, dst: Ipv4Addr, dst_port: u16, payload: Vec<u8>) -> Packet {
        let udp = UdpHeader {
            src_port,
            dst_port,
            length: 0,
            checksum: 0,
        };
        Packet::build(src, dst, Transport::Udp(udp), payload)
    }

    pub fn tcp(
        src: Ipv4Addr,
        src_port: u16,
        dst: Ipv4Addr,
        dst_port: u16,
        seq: u32,
        flags: u8,
        payload: Vec<u8>,
    ) -> Packet {
        let tcp = TcpHeader {
            src_port,
            dst_port,
            seq,
            ack: 0,
            flags,
            window: 0xFFFF,
            urgent: 0,
            checksum: 0,
        };
        Packet::build(src, dst, Transport::Tcp(tcp), payload)
    }

    pub fn with_ttl(mut self, ttl: u8) -> Packet {
        self.ip.ttl = ttl;
        self.seal();
        self
    }

    pub fn with_identification(mut self, id: u16) -> Packet {
        self.ip.identification = id;
        self.seal();
        self
    }

    /// Recomputes every derived field: lengths, protocol and both checksums.
    ///
    /// Call after editing public fields directly.
    pub fn seal(&mut self) {
        let transport_len = self.transport.header_len() + self.payload.len();
        self.ip.total_length = (IPV4_HEADER_LEN + transport_len) as u16;
        self.ip.protocol = self.transport.protocol();
        if let Transport::Udp(h) = &mut self.transport {
            h.length = transport_len as u16;
        }
        self.seal_ip_checksum();
        self.seal_transport_checksum();
    }

    fn seal_ip_checksum(&mut self) {
        self.ip.header_checksum = 0;
        let header = self.header_bytes();
        self.ip.header_checksum = !ones_complement_sum(&header, 0);
    }

    fn seal_transport_checksum(&mut self) {
        self.transport.set_checksum(0);
        let mut value = !self.transport_sum();
        if value == 0 && matches!(self.transport, Transport::Udp(_)) {
            // zero is reserved for "no checksum"
            value = 0xFFFF;
        }
        self.transport.set_checksum(value);
    }

    /// Sum over the transport message, including the pseudo-header for TCP/UDP.
    fn transport_sum(&self) -> u16 {
        let mut segment = Vec::with_capacity(self.transport.header_len() + self.payload.len());
        self.transport.write(&mut segment);
        segment.extend_from_slice(&self.payload);
        let initial = match self.transport {
            Transport::Icmp(_) => 0,
            _ => pseudo_header_sum(
                self.ip.src.octets(),
                self.ip.dst.octets(),
                self.ip.protocol.number(),
                segment.len() as u16,
            ),
        };
        ones_complement_sum(&segment, initial)
    }

    fn transport_checksum_ok(&self) -> bool {
        if let Transport::Udp(h) = &self.transport {
            if h.checksum == 0 {
                return true;
            }
        }
        self.transport_sum() == 0xFFFF
    }

    fn header_bytes(&self) -> [u8; IPV4_HEADER_LEN] {
        let ip = &self.ip;
        let mut h = [0u8; IPV4_HEADER_LEN];
        h[0] = 0x45;
        h[1] = ip.tos;
        h[2..4].copy_from_slice(&ip.total_length.to_be_bytes());
        h[4..6].copy_from_slice(&ip.identification.to_be_bytes());
        let flags = if ip.dont_fragment { FLAG_DONT_FRAGMENT } else { 0 };
        h[6..8].copy_from_slice(&flags.to_be_bytes());
        h[8] = ip.ttl;
        h[9] = ip.protocol.number();
        h[10..12].copy_from_slice(&ip.header_checksum.to_be_bytes());
        h[12..16].copy_from_slice(&ip.src.octets());
        h[16..20].copy_from_slice(&ip.dst.octets());
        h
    }

    /// Serializes to wire bytes; the length equals `ip.total_length`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(usize::from(self.ip.total_length));
        out.extend_from_slice(&self.header_bytes());
        self.transport.write(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Packet, PacketError> {
        if bytes.len() < IPV4_HEADER_LEN {
            return Err(PacketError::Truncated {
                needed: IPV4_HEADER_LEN,
                have: bytes.len(),
            });
        }
        let version = bytes[0] >> 4;
        if version != 4 {
            return Err(PacketError::BadVersion(version));
        }
        if bytes[0] & 0x0F != 5 {
            return Err(PacketError::OptionsPresent);
        }
        let total_length = u16::from_be_bytes([bytes[2], bytes[3]]);
        let total = usize::from(total_length);
        if total > bytes.len() {
            return Err(PacketError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        if total < IPV4_HEADER_LEN || total < bytes.len() {
            return Err(PacketError::LengthMismatch);
        }
        let flags = u16::from_be_bytes([bytes[6], bytes[7]]);
        if flags & FLAG_RESERVED != 0 {
            return Err(PacketError::ReservedBits);
        }
        if flags & (FLAG_MORE_FRAGMENTS | FRAGMENT_OFFSET_MASK) != 0 {
            return Err(PacketError::Fragmented);
        }
        if ones_complement_sum(&bytes[..IPV4_HEADER_LEN], 0) != 0xFFFF {
            return Err(PacketError::BadChecksum(ChecksumLayer::Ip));
        }
        let protocol = IpProtocol::from_number(bytes[9]).ok_or(PacketError::UnsupportedProtocol(bytes[9]))?;
        let ip = Ipv4Header {
            tos: bytes[1],
            total_length,
            identification: u16::from_be_bytes([bytes[4], bytes[5]]),
            dont_fragment: flags & FLAG_DONT_FRAGMENT != 0,
            ttl: bytes[8],
            protocol,
            header_checksum: u16::from_be_bytes([bytes[10], bytes[11]]),
            src: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
            dst: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        };

        let seg = &bytes[IPV4_HEADER_LEN..];
        let be16 = |i: usize| u16::from_be_bytes([seg[i], seg[i + 1]]);
        let need = |n: usize| {
            if seg.len() < n {
                Err(PacketError::Truncated {
                    needed: IPV4_HEADER_LEN + n,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        let (transport, header_len) = match protocol {
            IpProtocol::Icmp => {
                need(ICMP_HEADER_LEN)?;
                let kind = match (seg[0], seg[1]) {
                    (8, 0) => EchoKind::Request,
                    (0, 0) => EchoKind::Reply,
                    (kind, code) => return Err(PacketError::UnsupportedIcmp { kind, code }),
                };
                let echo = IcmpEcho {
                    kind,
                    checksum: be16(2),
                    identifier: be16(4),
                    sequence: be16(6),
                };
                (Transport::Icmp(echo), ICMP_HEADER_LEN)
            }
            IpProtocol::Udp => {
                need(UDP_HEADER_LEN)?;
                let udp = UdpHeader {
                    src_port: be16(0),
                    dst_port: be16(2),
                    length: be16(4),
                    checksum: be16(6),
                };
                if usize::from(udp.length) != seg.len() {
                    return Err(PacketError::LengthMismatch);
                }
                (Transport::Udp(udp), UDP_HEADER_LEN)
            }
            IpProtocol::Tcp => {
                need(TCP_HEADER_LEN)?;
                if seg[12] >> 4 != (TCP_HEADER_LEN / 4) as u8 {
                    return Err(PacketError::OptionsPresent);
                }
                if seg[12] & 0x0F != 0 {
                    return Err(PacketError::ReservedBits);
                }
                let tcp = TcpHeader {
                    src_port: be16(0),
                    dst_port: be16(2),
                    seq: u32::from_be_bytes([seg[4], seg[5], seg[6], seg[7]]),
                    ack: u32::from_be_bytes([seg[8], seg[9], seg[10], seg[11]]),
                    flags: seg[13],
                    window: be16(14),
                    checksum: be16(16),
                    urgent: be16(18),
                };
                (Transport::Tcp(tcp), TCP_HEADER_LEN)
            }
        };
        let packet = Packet {
            ip,
            transport,
            payload: seg[header_len..].to_vec(),
        };
        if !packet.transport_checksum_ok() {
            return Err(PacketError::BadChecksum(ChecksumLayer::Transport));
        }
        Ok(packet)
    }

    pub fn protocol(&self) -> IpProtocol {
        self.ip.protocol
    }

    /// Source and destination ports, or the echo identifier twice for ICMP.
    pub fn ids(&self) -> (u16, u16) {
        match &self.transport {
            Transport::Tcp(h) => (h.src_port, h.dst_port),
            Transport::Udp(h) => (h.src_port, h.dst_port),
            Transport::Icmp(h) => (h.identifier, h.identifier),
        }
    }

    /// Ports for TCP/UDP; `None` for ICMP.
    pub fn ports(&self) -> Option<(u16, u16)> {
        match &self.transport {
            Transport::Tcp(h) => Some((h.src_port, h.dst_port)),
            Transport::Udp(h) => Some((h.src_port, h.dst_port)),
            Transport::Icmp(_) => None,
        }
    }

    pub fn tuple(&self) -> FiveTuple {
        let (src_id, dst_id) = self.ids();
        FiveTuple {
            protocol: self.ip.protocol,
            src: self.ip.src,
            src_id,
            dst: self.ip.dst,
            dst_id,
        }
    }

    /// Replaces one endpoint's address (and optionally its port or echo
    /// identifier), then recomputes both checksums.
    ///
    /// For ICMP the identifier is shared by both endpoints, so replacing it on
    /// either side replaces it for the whole message.
    pub fn rewrite_endpoint(&self, which: Endpoint, addr: Ipv4Addr, id: Option<u16>) -> Packet {
        let (src_id, dst_id) = self.ids();
        let (cur_addr, cur_id) = match which {
            Endpoint::Source => (self.ip.src, src_id),
            Endpoint::Destination => (self.ip.dst, dst_id),
        };
        if cur_addr == addr && id.is_none_or(|id| id == cur_id) {
            return self.clone();
        }

        let mut p = self.clone();
        match which {
            Endpoint::Source => p.ip.src = addr,
            Endpoint::Destination => p.ip.dst = addr,
        }
        if let Some(id) = id {
            match (&mut p.transport, which) {
                (Transport::Tcp(h), Endpoint::Source) => h.src_port = id,
                (Transport::Tcp(h), Endpoint::Destination) => h.dst_port = id,
                (Transport::Udp(h), Endpoint::Source) => h.src_port = id,
                (Transport::Udp(h), Endpoint::Destination) => h.dst_port = id,
                (Transport::Icmp(h), _) => h.identifier = id,
            }
        }
        p.seal_ip_checksum();
        p.seal_transport_checksum();
        p
    }

    /// One router hop: TTL minus one with the header checksum refreshed.
    pub fn decrement_ttl(&self) -> Result<Packet, Expired> {
        if self.ip.ttl <= 1 {
            return Err(Expired);
        }
        let mut p = self.clone();
        p.ip.ttl -= 1;
        p.seal_ip_checksum();
        Ok(p)
    }

    /// True when both the IP header and the transport checksum verify.
    pub fn checksums_valid(&self) -> bool {
        ones_complement_sum(&self.header_bytes(), 0) == 0xFFFF && self.transport_checksum_ok()
    }

    pub fn echo(&self) -> Option<&IcmpEcho> {
        match &self.transport {
            Transport::Icmp(e) => Some(e),
            _ => None,
        }
    }
}

/// Flow key. For ICMP echo both ids carry the echo identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub protocol: IpProtocol,
    pub src: Ipv4Addr,
    pub src_id: u16,
    pub dst: Ipv4Addr,
    pub dst_id: u16,
}

impl FiveTuple {
    /// The tuple a reply to this flow would carry.
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            protocol: self.protocol,
            src: self.dst,
            src_id: self.dst_id,
            dst: self.src,
            dst_id: self.src_id,
        }
    }
}

/// `icmp 192.168.1.10:1 > 202.16.58.2:1`
impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}:{} > {}:{}",
            self.protocol, self.src, self.src_id, self.dst, self.dst_id
        )
    }
}
