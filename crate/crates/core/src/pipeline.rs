//! Hosts, routers, and the virtual-time event loop that moves packets
//! between them.
//!
//! A router handles each arriving packet in a fixed order:
//!
//! 1. reverse translation of replies on known flows, otherwise nat/PREROUTING
//!    (where DNAT happens);
//! 2. the routing decision: local destinations go through filter/INPUT and
//!    are delivered;
//! 3. TTL decrement and filter/FORWARD;
//! 4. nat/POSTROUTING (SNAT and MASQUERADE) for new flows;
//! 5. emission on the chosen interface.
//!
//! Every chain traversal, translation, drop and emission lands in the trace.

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::addr::Cidr;
use crate::chain::{NatKind, TableSet, Verdict};
use crate::conntrack::{ConnTable, PortAllocator, VirtualTime};
use crate::packet::{EchoKind, Packet};
use crate::routing::{RouteEntry, RoutingTable};
use crate::rule::{ChainId, PacketContext, RuleCommand, Table, Target};
use crate::trace::{EventKind, Trace, TraceEvent};

/// Fixed one-way delay of every link.
pub const LINK_DELAY_MS: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}` has no interface `{iface}`")]
    UnknownInterface { node: String, iface: String },
    #[error("node name `{0}` already used")]
    DuplicateNode(String),
    #[error("interface `{iface}` defined twice on `{node}`")]
    DuplicateInterface { node: String, iface: String },
    #[error("{node}: {prefix} is already routed")]
    DuplicateRoute { node: String, prefix: Cidr },
    #[error("{node}: next hop {via} is not on-link for `{iface}`")]
    OffLink { node: String, via: Ipv4Addr, iface: String },
    #[error("{node}/{iface} is already attached to link `{link}`")]
    AlreadyLinked { node: String, iface: String, link: String },
    #[error("link `{0}` endpoints do not share a prefix")]
    LinkPrefix(String),
    #[error("link name `{0}` already used")]
    DuplicateLink(String),
    #[error("`{0}` is a host; hosts have no rule tables or routes")]
    NotARouter(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interface {
    pub name: String,
    pub address: Ipv4Addr,
    pub prefix_len: u8,
    pub link: Option<String>,
}

impl Interface {
    pub fn new(name: &str, address: Ipv4Addr, prefix_len: u8) -> Self {
        Interface {
            name: name.to_string(),
            address,
            prefix_len,
            link: None,
        }
    }

    pub fn network(&self) -> Cidr {
        Cidr::new(self.address, self.prefix_len)
    }
}

/// What one processing step produced.
#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub emissions: Vec<(String, Packet)>,
    pub events: Vec<TraceEvent>,
}

struct Recorder<'a> {
    node: &'a str,
    now: VirtualTime,
    out: StepOutput,
}

impl<'a> Recorder<'a> {
    fn new(node: &'a str, now: VirtualTime) -> Self {
        Recorder {
            node,
            now,
            out: StepOutput::default(),
        }
    }

    fn event(&self, kind: EventKind, p: &Packet) -> TraceEvent {
        TraceEvent::new(self.now, self.node, kind, p)
    }

    fn push(&mut self, e: TraceEvent) {
        self.out.events.push(e);
    }

    fn verdict(&mut self, table: Table, chain: ChainId, p: &Packet, v: &Verdict) {
        let e = self.event(EventKind::Verdict, p).chain(table, chain, v);
        self.push(e);
    }

    fn drop(&mut self, p: &Packet, reason: &str) -> StepOutput {
        let e = self.event(EventKind::Drop, p).reason(reason);
        self.push(e);
        std::mem::take(&mut self.out)
    }

    fn emit(&mut self, iface: &Interface, p: Packet) {
        match &iface.link {
            Some(link) => {
                let e = TraceEvent::new(self.now, link, EventKind::Emit, &p).iface(&iface.name);
                self.push(e);
                self.out.emissions.push((iface.name.clone(), p));
            }
            None => {
                let e = self.event(EventKind::Drop, &p).iface(&iface.name).reason("no-link");
                self.push(e);
            }
        }
    }

    fn finish(self) -> StepOutput {
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct HostNode {
    pub name: String,
    pub interface: Interface,
    pub gateway: Ipv4Addr,
    next_ident: u16,
}

impl HostNode {
    pub fn new(name: &str, interface: Interface, gateway: Ipv4Addr) -> Result<Self, TopologyError> {
        if !interface.network().contains(gateway) {
            return Err(TopologyError::OffLink {
                node: name.to_string(),
                via: gateway,
                iface: interface.name.clone(),
            });
        }
        Ok(HostNode {
            name: name.to_string(),
            interface,
            gateway,
            next_ident: 1,
        })
    }

    /// Sends `p` out of the host's only interface, toward its gateway.
    pub fn send(&mut self, p: Packet, now: VirtualTime) -> StepOutput {
        let mut rec = Recorder::new(&self.name, now);
        rec.emit(&self.interface, p);
        rec.finish()
    }

    /// Answers echo requests; everything else addressed here is delivered.
    pub fn receive(&mut self, p: Packet, now: VirtualTime) -> StepOutput {
        let mut rec = Recorder::new(&self.name, now);
        let e = rec.event(EventKind::Recv, &p).iface(&self.interface.name);
        rec.push(e);
        match p.echo() {
            Some(echo) if echo.kind == EchoKind::Request && p.ip.dst == self.interface.address => {
                let ident = self.next_ident;
                self.next_ident = self.next_ident.wrapping_add(1);
                let reply = Packet::icmp_echo(
                    p.ip.dst,
                    p.ip.src,
                    EchoKind::Reply,
                    echo.identifier,
                    echo.sequence,
                    p.payload.clone(),
                )
                .with_identification(ident);
                rec.emit(&self.interface, reply);
            }
            _ => {
                let e = rec.event(EventKind::Deliver, &p).iface(&self.interface.name);
                rec.push(e);
            }
        }
        rec.finish()
    }
}

#[derive(Debug, Clone)]
pub struct RouterNode {
    pub name: String,
    pub interfaces: Vec<Interface>,
    pub routes: RoutingTable,
    pub tables: TableSet,
    pub conntrack: ConnTable,
}

impl RouterNode {
    /// A router with a connected route for every interface.
    pub fn new(name: &str, interfaces: Vec<Interface>) -> Result<Self, TopologyError> {
        Self::with_allocator(name, interfaces, PortAllocator::sequential())
    }

    pub fn with_allocator(
        name: &str,
        interfaces: Vec<Interface>,
        allocator: PortAllocator,
    ) -> Result<Self, TopologyError> {
        let mut router = RouterNode {
            name: name.to_string(),
            interfaces: Vec::new(),
            routes: RoutingTable::new(),
            tables: TableSet::new(),
            conntrack: ConnTable::new(allocator),
        };
        for iface in interfaces {
            if router.iface(&iface.name).is_some() {
                return Err(TopologyError::DuplicateInterface {
                    node: name.to_string(),
                    iface: iface.name,
                });
            }
            router.interfaces.push(iface.clone());
            router.add_route(RouteEntry {
                prefix: iface.network(),
                via: None,
                iface: iface.name,
            })?;
        }
        Ok(router)
    }

    pub fn iface(&self, name: &str) -> Option<&Interface> {
        self.interfaces.iter().find(|i| i.name == name)
    }

    pub fn add_route(&mut self, route: RouteEntry) -> Result<(), TopologyError> {
        let iface = self
            .iface(&route.iface)
            .ok_or_else(|| TopologyError::UnknownInterface {
                node: self.name.clone(),
                iface: route.iface.clone(),
            })?;
        if let Some(via) = route.via {
            if !iface.network().contains(via) {
                return Err(TopologyError::OffLink {
                    node: self.name.clone(),
                    via,
                    iface: route.iface.clone(),
                });
            }
        }
        let prefix = route.prefix;
        self.routes.insert(route).map_err(|_| TopologyError::DuplicateRoute {
            node: self.name.clone(),
            prefix,
        })
    }

    pub fn apply_rule(&mut self, cmd: &RuleCommand) -> Result<(), crate::chain::ChainError> {
        self.tables.apply_command(cmd)
    }

    /// Changes an interface's address; MASQUERADE bindings made with the old
    /// address are flushed and the connected route follows the new prefix.
    pub fn set_interface_address(
        &mut self,
        name: &str,
        address: Ipv4Addr,
        prefix_len: u8,
    ) -> Result<usize, TopologyError> {
        let idx =
            self.interfaces
                .iter()
                .position(|i| i.name == name)
                .ok_or_else(|| TopologyError::UnknownInterface {
                    node: self.name.clone(),
                    iface: name.to_string(),
                })?;
        let old = self.interfaces[idx].clone();
        let mut routes = RoutingTable::new();
        for r in self.routes.routes() {
            let mut r = r.clone();
            if r.via.is_none() && r.iface == name && r.prefix == old.network() {
                r.prefix = Cidr::new(address, prefix_len);
            }
            routes.insert(r).map_err(|e| TopologyError::DuplicateRoute {
                node: self.name.clone(),
                prefix: e.0,
            })?;
        }
        self.routes = routes;
        self.interfaces[idx].address = address;
        self.interfaces[idx].prefix_len = prefix_len;
        Ok(self.conntrack.flush_masquerade(old.address))
    }

    fn is_local(&self, addr: Ipv4Addr) -> bool {
        self.interfaces.iter().any(|i| i.address == addr)
    }

    /// Addresses that outbound translation maps flows onto: interfaces a
    /// MASQUERADE rule may leave through, and SNAT `--to-source` addresses.
    /// Unsolicited traffic to these has nowhere to go.
    pub fn is_nat_address(&self, addr: Ipv4Addr) -> bool {
        let Some(post) = self.tables.chain(Table::Nat, ChainId::Postrouting) else {
            return false;
        };
        post.rules.iter().any(|r| match &r.target {
            Target::Snat { to, .. } => *to == addr,
            Target::Masquerade => self
                .interfaces
                .iter()
                .any(|i| i.address == addr && r.matcher.out_iface.as_deref().is_none_or(|o| o == i.name)),
            _ => false,
        })
    }

    /// Runs an arriving packet through the full traversal order.
    pub fn process_packet(&mut self, packet: Packet, in_iface: &str, now: VirtualTime) -> StepOutput {
        let name = self.name.clone();
        let mut rec = Recorder::new(&name, now);
        let e = rec.event(EventKind::Recv, &packet).iface(in_iface);
        rec.push(e);

        // established flows are restored before any rule is consulted
        let mut pkt = packet;
        let mut established = false;
        for _ in 0..2 {
            match self.conntrack.reverse_translate(&pkt, now) {
                Ok((restored, _)) => {
                    pkt = restored;
                    established = true;
                    let e = rec.event(EventKind::Translate, &pkt).reason("established");
                    rec.push(e);
                }
                Err(_) => break,
            }
        }

        let mut dnatted = false;
        if !established {
            let ctx = PacketContext {
                packet: &pkt,
                in_iface: Some(in_iface),
                out_iface: None,
            };
            let v = self.tables.traverse(Table::Nat, ChainId::Prerouting, &ctx);
            rec.verdict(Table::Nat, ChainId::Prerouting, &pkt, &v);
            match v {
                Verdict::Drop => return rec.drop(&pkt, "verdict-drop"),
                Verdict::Translate {
                    kind: NatKind::Dnat,
                    to: Some(to),
                    id,
                    ..
                } => {
                    let (translated, _) = self.conntrack.dnat_ingress(&pkt, to, id, now);
                    pkt = translated;
                    dnatted = true;
                    let e = rec
                        .event(EventKind::Translate, &pkt)
                        .chain(Table::Nat, ChainId::Prerouting, v);
                    rec.push(e);
                }
                _ => {}
            }
        }

        if self.is_local(pkt.ip.dst) {
            if !established && !dnatted && self.is_nat_address(pkt.ip.dst) {
                return rec.drop(&pkt, "no-conntrack-entry");
            }
            let ctx = PacketContext {
                packet: &pkt,
                in_iface: Some(in_iface),
                out_iface: None,
            };
            let v = self.tables.traverse(Table::Filter, ChainId::Input, &ctx);
            rec.verdict(Table::Filter, ChainId::Input, &pkt, &v);
            if v == Verdict::Drop {
                return rec.drop(&pkt, "verdict-drop");
            }
            let e = rec.event(EventKind::Deliver, &pkt).iface(in_iface);
            rec.push(e);
            return rec.finish();
        }

        let Some(route) = self.routes.lookup(pkt.ip.dst).cloned() else {
            return rec.drop(&pkt, "no-route");
        };
        pkt = match pkt.decrement_ttl() {
            Ok(p) => p,
            Err(_) => return rec.drop(&pkt, "ttl-expired"),
        };

        let ctx = PacketContext {
            packet: &pkt,
            in_iface: Some(in_iface),
            out_iface: Some(&route.iface),
        };
        let v = self.tables.traverse(Table::Filter, ChainId::Forward, &ctx);
        rec.verdict(Table::Filter, ChainId::Forward, &pkt, &v);
        if v == Verdict::Drop {
            return rec.drop(&pkt, "verdict-drop");
        }

        self.egress(&mut rec, pkt, Some(in_iface), &route, established);
        rec.finish()
    }

    /// Sends a packet generated by the router itself: nat/OUTPUT, routing,
    /// filter/OUTPUT, nat/POSTROUTING.
    pub fn originate(&mut self, packet: Packet, now: VirtualTime) -> StepOutput {
        let name = self.name.clone();
        let mut rec = Recorder::new(&name, now);
        let mut pkt = packet;

        let ctx = PacketContext {
            packet: &pkt,
            in_iface: None,
            out_iface: None,
        };
        let v = self.tables.traverse(Table::Nat, ChainId::Output, &ctx);
        rec.verdict(Table::Nat, ChainId::Output, &pkt, &v);
        match v {
            Verdict::Drop => return rec.drop(&pkt, "verdict-drop"),
            Verdict::Translate {
                kind: NatKind::Dnat,
                to: Some(to),
                id,
                ..
            } => {
                let (translated, _) = self.conntrack.dnat_ingress(&pkt, to, id, now);
                pkt = translated;
                let e = rec
                    .event(EventKind::Translate, &pkt)
                    .chain(Table::Nat, ChainId::Output, v);
                rec.push(e);
            }
            _ => {}
        }

        let route = if self.is_local(pkt.ip.dst) {
            None
        } else {
            match self.routes.lookup(pkt.ip.dst).cloned() {
                Some(r) => Some(r),
                None => return rec.drop(&pkt, "no-route"),
            }
        };
        let ctx = PacketContext {
            packet: &pkt,
            in_iface: None,
            out_iface: route.as_ref().map(|r| r.iface.as_str()),
        };
        let v = self.tables.traverse(Table::Filter, ChainId::Output, &ctx);
        rec.verdict(Table::Filter, ChainId::Output, &pkt, &v);
        if v == Verdict::Drop {
            return rec.drop(&pkt, "verdict-drop");
        }
        match route {
            Some(route) => self.egress(&mut rec, pkt, None, &route, false),
            None => {
                let e = rec.event(EventKind::Deliver, &pkt);
                rec.push(e);
            }
        }
        rec.finish()
    }

    fn egress(
        &mut self,
        rec: &mut Recorder<'_>,
        mut pkt: Packet,
        in_iface: Option<&str>,
        route: &RouteEntry,
        established: bool,
    ) {
        let out = self
            .iface(&route.iface)
            .cloned()
            .expect("route refers to a registered interface");
        if !established {
            let ctx = PacketContext {
                packet: &pkt,
                in_iface,
                out_iface: Some(&out.name),
            };
            let v = self.tables.traverse(Table::Nat, ChainId::Postrouting, &ctx);
            rec.verdict(Table::Nat, ChainId::Postrouting, &pkt, &v);
            match v {
                Verdict::Drop => {
                    rec.drop(&pkt, "verdict-drop");
                    return;
                }
                Verdict::Translate { kind, to, id, .. } if kind != NatKind::Dnat => {
                    let nat_addr = match kind {
                        NatKind::Masquerade => out.address,
                        _ => to.expect("SNAT verdict carries an address"),
                    };
                    match self.conntrack.snat_egress(&pkt, nat_addr, kind, id, rec.now) {
                        Ok((translated, _)) => {
                            pkt = translated;
                            let e = rec
                                .event(EventKind::Translate, &pkt)
                                .chain(Table::Nat, ChainId::Postrouting, v);
                            rec.push(e);
                        }
                        Err(_) => {
                            rec.drop(&pkt, "nat-exhausted");
                            return;
                        }
                    }
                }
                _ => {}
            }
        }
        rec.emit(&out, pkt);
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Host(HostNode),
    Router(Box<RouterNode>),
}

impl Node {
    pub fn name(&self) -> &str {
        match self {
            Node::Host(h) => &h.name,
            Node::Router(r) => &r.name,
        }
    }

    fn iface_mut(&mut self, name: &str) -> Option<&mut Interface> {
        match self {
            Node::Host(h) => (h.interface.name == name).then_some(&mut h.interface),
            Node::Router(r) => r.interfaces.iter_mut().find(|i| i.name == name),
        }
    }
}

#[derive(Debug, Clone)]
enum Pending {
    /// Packet arrives on an interface.
    Arrive { node: usize, iface: String, packet: Packet },
    /// Node originates a packet.
    Send { node: usize, packet: Packet },
}

#[derive(Debug, Clone)]
struct LinkEnds {
    a: (usize, String),
    b: (usize, String),
}

/// A set of nodes joined by point-to-point links, advanced on a virtual clock.
#[derive(Debug, Clone, Default)]
pub struct World {
    nodes: Vec<Node>,
    by_name: HashMap<String, usize>,
    links: BTreeMap<String, LinkEnds>,
    queue: BTreeMap<(VirtualTime, u64), Pending>,
    seq: u64,
    last_tick: u64,
    trace: Trace,
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<usize, TopologyError> {
        let name = node.name().to_string();
        if self.by_name.contains_key(&name) {
            return Err(TopologyError::DuplicateNode(name));
        }
        let idx = self.nodes.len();
        self.nodes.push(node);
        self.by_name.insert(name, idx);
        Ok(idx)
    }

    pub fn node_index(&self, name: &str) -> Result<usize, TopologyError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.by_name.get(name).map(|&i| &self.nodes[i])
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn router(&self, name: &str) -> Option<&RouterNode> {
        match self.node(name)? {
            Node::Router(r) => Some(r),
            Node::Host(_) => None,
        }
    }

    pub fn router_mut(&mut self, name: &str) -> Result<&mut RouterNode, TopologyError> {
        let idx = self.node_index(name)?;
        match &mut self.nodes[idx] {
            Node::Router(r) => Ok(r),
            Node::Host(_) => Err(TopologyError::NotARouter(name.to_string())),
        }
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Joins two interfaces. Both must be unattached and on a shared prefix.
    pub fn connect(&mut self, link: &str, a: (&str, &str), b: (&str, &str)) -> Result<(), TopologyError> {
        if self.links.contains_key(link) {
            return Err(TopologyError::DuplicateLink(link.to_string()));
        }
        let mut ends = Vec::with_capacity(2);
        for (node, iface) in [a, b] {
            let idx = self.node_index(node)?;
            let i = self.nodes[idx]
                .iface_mut(iface)
                .ok_or_else(|| TopologyError::UnknownInterface {
                    node: node.to_string(),
                    iface: iface.to_string(),
                })?;
            if let Some(existing) = &i.link {
                return Err(TopologyError::AlreadyLinked {
                    node: node.to_string(),
                    iface: iface.to_string(),
                    link: existing.clone(),
                });
            }
            ends.push((idx, iface.to_string(), i.network(), i.address));
        }
        let (na, nb) = (&ends[0], &ends[1]);
        if na.2 != nb.2 || !na.2.contains(nb.3) {
            return Err(TopologyError::LinkPrefix(link.to_string()));
        }
        for (idx, iface, ..) in &ends {
            self.nodes[*idx].iface_mut(iface).unwrap().link = Some(link.to_string());
        }
        self.links.insert(
            link.to_string(),
            LinkEnds {
                a: (ends[0].0, ends[0].1.clone()),
                b: (ends[1].0, ends[1].1.clone()),
            },
        );
        Ok(())
    }

    fn schedule(&mut self, at: VirtualTime, what: Pending) {
        self.queue.insert((at, self.seq), what);
        self.seq += 1;
    }

    /// Schedules `node` to originate `packet` at `at`.
    pub fn inject_send(&mut self, at: VirtualTime, node: &str, packet: Packet) -> Result<(), TopologyError> {
        let node = self.node_index(node)?;
        self.schedule(at, Pending::Send { node, packet });
        Ok(())
    }

    /// Schedules `packet` to arrive on `node`/`iface` at `at`.
    pub fn inject_arrival(
        &mut self,
        at: VirtualTime,
        node: &str,
        iface: &str,
        packet: Packet,
    ) -> Result<(), TopologyError> {
        let idx = self.node_index(node)?;
        if self.nodes[idx].iface_mut(iface).is_none() {
            return Err(TopologyError::UnknownInterface {
                node: node.to_string(),
                iface: iface.to_string(),
            });
        }
        self.schedule(
            at,
            Pending::Arrive {
                node: idx,
                iface: iface.to_string(),
                packet,
            },
        );
        Ok(())
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    fn peer(&self, node: usize, iface: &str) -> Option<(usize, String)> {
        let link = match &self.nodes[node] {
            Node::Host(h) => h.interface.link.as_ref(),
            Node::Router(r) => r.iface(iface).and_then(|i| i.link.as_ref()),
        }?;
        let ends = &self.links[link];
        if ends.a.0 == node && ends.a.1 == iface {
            Some(ends.b.clone())
        } else {
            Some(ends.a.clone())
        }
    }

    /// Expires conntrack state at every whole second up to `now`.
    fn tick_to(&mut self, now: VirtualTime) {
        while (self.last_tick + 1) * 1000 <= now.millis() {
            self.last_tick += 1;
            let at = VirtualTime::from_secs(self.last_tick);
            for node in &mut self.nodes {
                if let Node::Router(r) = node {
                    r.conntrack.expire(at);
                }
            }
        }
    }

    /// Processes queued events in (time, sequence) order until the queue is
    /// empty or the next event lies beyond `until`.
    pub fn run(&mut self, until: Option<VirtualTime>) -> &Trace {
        while let Some(entry) = self.queue.first_entry() {
            let (now, _) = *entry.key();
            if until.is_some_and(|u| now > u) {
                break;
            }
            let pending = entry.remove();
            self.tick_to(now);
            let (from, out) = match pending {
                Pending::Arrive { node, iface, packet } => {
                    let out = match &mut self.nodes[node] {
                        Node::Host(h) => h.receive(packet, now),
                        Node::Router(r) => r.process_packet(packet, &iface, now),
                    };
                    (node, out)
                }
                Pending::Send { node, packet } => {
                    let out = match &mut self.nodes[node] {
                        Node::Host(h) => h.send(packet, now),
                        Node::Router(r) => r.originate(packet, now),
                    };
                    (node, out)
                }
            };
            self.trace.events.extend(out.events);
            for (iface, packet) in out.emissions {
                if let Some((peer, peer_iface)) = self.peer(from, &iface) {
                    let at = VirtualTime(now.millis() + LINK_DELAY_MS);
                    self.schedule(
                        at,
                        Pending::Arrive {
                            node: peer,
                            iface: peer_iface,
                            packet,
                        },
                    );
                }
            }
        }
        if let Some(u) = until {
            self.tick_to(u);
        }
        &self.trace
    }
}

/// Runs `world` up to `until` and returns a copy of the trace.
pub fn step_world(world: &mut World, until: Option<VirtualTime>) -> Trace {
    world.run(until).clone()
}
