//! Connection tracking and address translation.
//!
//! A [`ConnTable`] records one [`ConnEntry`] per translated flow, indexed both
//! by the original tuple and by the tuple a reply will carry. Egress packets
//! are source-translated through [`ConnTable::snat_egress`], ingress packets
//! destination-translated through [`ConnTable::dnat_ingress`], and replies
//! are mapped back with [`ConnTable::reverse_translate`].
//!
//! Translated source ids come from a [`PortAllocator`]: the flow's own id is
//! kept when it is free, otherwise the first free id in `61000..=65535` after
//! a moving cursor is taken. A seeded shuffle mode picks random ids instead.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::NatKind;
use crate::packet::{Endpoint, FiveTuple, IpProtocol, Packet};

pub const PORT_RANGE_START: u16 = 61000;
pub const PORT_RANGE_END: u16 = 65535;
pub const PORT_RANGE_SIZE: usize = (PORT_RANGE_END - PORT_RANGE_START) as usize + 1;

/// Point on the simulation clock, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub fn from_secs(secs: u64) -> Self {
        VirtualTime(secs * 1000)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn whole_secs(self) -> u64 {
        self.0 / 1000
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Idle timeout per protocol, in seconds.
pub fn idle_timeout(protocol: IpProtocol) -> u64 {
    match protocol {
        IpProtocol::Tcp => 120,
        IpProtocol::Udp => 30,
        IpProtocol::Icmp => 30,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NatError {
    #[error("no free translation id for {protocol} on {addr}")]
    Exhausted { protocol: IpProtocol, addr: Ipv4Addr },
    #[error("no conntrack entry")]
    NoEntry,
}

#[derive(Debug, Clone)]
enum AllocMode {
    Sequential,
    Shuffle(Box<ChaCha8Rng>),
}

#[derive(Debug, Clone)]
pub struct PortAllocator {
    next: u16,
    in_use: HashSet<(IpProtocol, Ipv4Addr, u16)>,
    mode: AllocMode,
}

impl Default for PortAllocator {
    fn default() -> Self {
        PortAllocator::sequential()
    }
}

impl PortAllocator {
    pub fn sequential() -> Self {
        PortAllocator {
            next: PORT_RANGE_START,
            in_use: HashSet::new(),
            mode: AllocMode::Sequential,
        }
    }

    /// Random ids from the range, reproducible for a given seed. Source-id
    /// preservation is off in this mode.
    pub fn shuffled(seed: u64) -> Self {
        PortAllocator {
            next: PORT_RANGE_START,
            in_use: HashSet::new(),
            mode: AllocMode::Shuffle(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_in_use(&self, protocol: IpProtocol, addr: Ipv4Addr, id: u16) -> bool {
        self.in_use.contains(&(protocol, addr, id))
    }

    pub fn in_use_count(&self) -> usize {
        self.in_use.len()
    }

    pub fn allocate(&mut self, protocol: IpProtocol, addr: Ipv4Addr, preferred: u16) -> Result<u16, NatError> {
        let start = match &mut self.mode {
            AllocMode::Sequential => {
                if self.in_use.insert((protocol, addr, preferred)) {
                    return Ok(preferred);
                }
                self.next
            }
            AllocMode::Shuffle(rng) => rng.gen_range(PORT_RANGE_START..=PORT_RANGE_END),
        };
        let offset = usize::from(start - PORT_RANGE_START);
        for step in 0..PORT_RANGE_SIZE {
            let id = PORT_RANGE_START + ((offset + step) % PORT_RANGE_SIZE) as u16;
            if self.in_use.insert((protocol, addr, id)) {
                self.next = if id == PORT_RANGE_END { PORT_RANGE_START } else { id + 1 };
                return Ok(id);
            }
        }
        Err(NatError::Exhausted { protocol, addr })
    }

    pub fn release(&mut self, protocol: IpProtocol, addr: Ipv4Addr, id: u16) {
        self.in_use.remove(&(protocol, addr, id));
    }
}

pub fn allocate_id(
    allocator: &mut PortAllocator,
    protocol: IpProtocol,
    addr: Ipv4Addr,
    preferred: u16,
) -> Result<u16, NatError> {
    allocator.allocate(protocol, addr, preferred)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnEntry {
    pub original: FiveTuple,
    pub translated: FiveTuple,
    pub kind: NatKind,
    pub created_at: VirtualTime,
    pub last_seen: VirtualTime,
    pub ttl_secs: u64,
}

impl ConnEntry {
    /// The tuple a reply to the translated flow carries.
    pub fn reply(&self) -> FiveTuple {
        self.translated.reversed()
    }

    pub fn is_expired(&self, now: VirtualTime) -> bool {
        now.0.saturating_sub(self.last_seen.0) > self.ttl_secs * 1000
    }

    fn is_source_nat(&self) -> bool {
        self.kind != NatKind::Dnat
    }

    fn original_key(&self) -> (bool, FiveTuple) {
        (self.is_source_nat(), self.original)
    }

    /// `icmp orig=192.168.1.10:1->202.16.58.2:1 repl=202.16.58.2:1->202.16.58.1:1 kind=MASQ age=3`
    pub fn dump_line(&self, now: VirtualTime) -> String {
        let o = &self.original;
        let r = self.reply();
        let kind = match self.kind {
            NatKind::Snat => "SNAT",
            NatKind::Dnat => "DNAT",
            NatKind::Masquerade => "MASQ",
        };
        format!(
            "{} orig={}:{}->{}:{} repl={}:{}->{}:{} kind={} age={}",
            o.protocol,
            o.src,
            o.src_id,
            o.dst,
            o.dst_id,
            r.src,
            r.src_id,
            r.dst,
            r.dst_id,
            kind,
            now.0.saturating_sub(self.created_at.0) / 1000
        )
    }
}

/// Lifetime counters; `created == removed + live` at all times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConnStats {
    pub created: u64,
    pub removed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ConnTable {
    entries: BTreeMap<u64, ConnEntry>,
    by_original: HashMap<(bool, FiveTuple), u64>,
    by_reply: HashMap<FiveTuple, u64>,
    allocator: PortAllocator,
    next_key: u64,
    stats: ConnStats,
}

impl ConnTable {
    pub fn new(allocator: PortAllocator) -> Self {
        ConnTable {
            allocator,
            ..Default::default()
        }
    }

    pub fn allocator(&self) -> &PortAllocator {
        &self.allocator
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> ConnStats {
        self.stats
    }

    /// Entries in creation order.
    pub fn entries(&self) -> impl Iterator<Item = &ConnEntry> {
        self.entries.values()
    }

    fn remove(&mut self, key: u64) -> Option<ConnEntry> {
        let entry = self.entries.remove(&key)?;
        self.by_original.remove(&entry.original_key());
        self.by_reply.remove(&entry.reply());
        if entry.is_source_nat() {
            let t = entry.translated;
            self.allocator.release(t.protocol, t.src, t.src_id);
        }
        self.stats.removed += 1;
        Some(entry)
    }

    fn insert(&mut self, entry: ConnEntry) -> ConnEntry {
        // a new binding displaces anything holding either of its keys
        if let Some(&old) = self.by_original.get(&entry.original_key()) {
            self.remove(old);
        }
        if let Some(&old) = self.by_reply.get(&entry.reply()) {
            self.remove(old);
        }
        let key = self.next_key;
        self.next_key += 1;
        self.by_original.insert(entry.original_key(), key);
        self.by_reply.insert(entry.reply(), key);
        self.entries.insert(key, entry.clone());
        self.stats.created += 1;
        entry
    }

    /// Live entry for an original-direction tuple; a stale one is dropped.
    fn live_original(&mut self, source_nat: bool, tuple: FiveTuple, now: VirtualTime) -> Option<u64> {
        let key = *self.by_original.get(&(source_nat, tuple))?;
        if self.entries[&key].is_expired(now) {
            self.remove(key);
            return None;
        }
        Some(key)
    }

    /// Source-translates an egress packet to `nat_addr`.
    ///
    /// An existing live binding for the flow is reused; otherwise a new id is
    /// allocated, preferring `preferred` or else the packet's own source id.
    pub fn snat_egress(
        &mut self,
        p: &Packet,
        nat_addr: Ipv4Addr,
        kind: NatKind,
        preferred: Option<u16>,
        now: VirtualTime,
    ) -> Result<(Packet, ConnEntry), NatError> {
        debug_assert!(kind != NatKind::Dnat);
        let tuple = p.tuple();
        if let Some(key) = self.live_original(true, tuple, now) {
            let entry = &self.entries[&key];
            if entry.translated.src == nat_addr && entry.kind == kind {
                let entry = self.entries.get_mut(&key).unwrap();
                entry.last_seen = now;
                let t = entry.translated;
                return Ok((
                    p.rewrite_endpoint(Endpoint::Source, t.src, Some(t.src_id)),
                    entry.clone(),
                ));
            }
            self.remove(key);
        }

        let id = self
            .allocator
            .allocate(tuple.protocol, nat_addr, preferred.unwrap_or(tuple.src_id))?;
        let mut translated = FiveTuple {
            src: nat_addr,
            src_id: id,
            ..tuple
        };
        if tuple.protocol == IpProtocol::Icmp {
            translated.dst_id = id;
        }
        let entry = self.insert(ConnEntry {
            original: tuple,
            translated,
            kind,
            created_at: now,
            last_seen: now,
            ttl_secs: idle_timeout(tuple.protocol),
        });
        Ok((p.rewrite_endpoint(Endpoint::Source, nat_addr, Some(id)), entry))
    }

    /// Destination-translates an ingress packet to `to` (and `port`, if given).
    pub fn dnat_ingress(
        &mut self,
        p: &Packet,
        to: Ipv4Addr,
        port: Option<u16>,
        now: VirtualTime,
    ) -> (Packet, ConnEntry) {
        let tuple = p.tuple();
        let mut translated = FiveTuple { dst: to, ..tuple };
        if let Some(port) = port {
            translated.dst_id = port;
            if tuple.protocol == IpProtocol::Icmp {
                translated.src_id = port;
            }
        }
        if let Some(key) = self.live_original(false, tuple, now) {
            if self.entries[&key].translated == translated {
                let entry = self.entries.get_mut(&key).unwrap();
                entry.last_seen = now;
                let entry = entry.clone();
                return (p.rewrite_endpoint(Endpoint::Destination, to, port), entry);
            }
            self.remove(key);
        }
        let entry = self.insert(ConnEntry {
            original: tuple,
            translated,
            kind: NatKind::Dnat,
            created_at: now,
            last_seen: now,
            ttl_secs: idle_timeout(tuple.protocol),
        });
        (p.rewrite_endpoint(Endpoint::Destination, to, port), entry)
    }

    /// Maps a reply back onto the original flow: the destination for source
    /// NAT bindings, the source for destination NAT bindings.
    pub fn reverse_translate(&mut self, p: &Packet, now: VirtualTime) -> Result<(Packet, ConnEntry), NatError> {
        let key = *self.by_reply.get(&p.tuple()).ok_or(NatError::NoEntry)?;
        let entry = self.entries.get_mut(&key).expect("index out of sync");
        if entry.is_expired(now) {
            return Err(NatError::NoEntry);
        }
        entry.last_seen = now;
        let o = entry.original;
        let restored = match entry.kind {
            NatKind::Snat | NatKind::Masquerade => p.rewrite_endpoint(Endpoint::Destination, o.src, Some(o.src_id)),
            NatKind::Dnat => p.rewrite_endpoint(Endpoint::Source, o.dst, Some(o.dst_id)),
        };
        Ok((restored, entry.clone()))
    }

    /// Removes entries idle for longer than their timeout, freeing their ids.
    pub fn expire(&mut self, now: VirtualTime) -> usize {
        let stale: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| e.is_expired(now))
            .map(|(k, _)| *k)
            .collect();
        for key in &stale {
            self.remove(*key);
        }
        stale.len()
    }

    /// Drops MASQUERADE bindings that translate to `addr`, e.g. after the
    /// egress interface changed address.
    pub fn flush_masquerade(&mut self, addr: Ipv4Addr) -> usize {
        let doomed: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| e.kind == NatKind::Masquerade && e.translated.src == addr)
            .map(|(k, _)| *k)
            .collect();
        for key in &doomed {
            self.remove(*key);
        }
        doomed.len()
    }

    /// One line per live entry, oldest first.
    pub fn dump(&self, now: VirtualTime) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            let _ = writeln!(out, "{}", e.dump_line(now));
        }
        out
    }
}
