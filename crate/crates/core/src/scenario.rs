//! Line-oriented scenario files: topology, routes, rules, injected packets
//! and trace expectations.
//!
//! ```text
//! NODES
//! host PC1 eth0 192.168.1.10/24 gw 192.168.1.1
//! router RA lan0 192.168.1.1/24 wan0 202.16.58.1/30
//! LINKS
//! lan1 PC1/eth0 RA/lan0
//! ROUTES
//! RA 0.0.0.0/0 via 202.16.58.2 dev wan0
//! RULES
//! RA iptables -t nat -A POSTROUTING -s 192.168.1.0/24 -o wan0 -j MASQUERADE
//! INJECT
//! 0 PC1 icmp 192.168.1.10:1 > 202.16.58.2:1 seq=1
//! EXPECT
//! * internet EMIT icmp 202.16.58.1:* > 202.16.58.2:* ttl=63 *
//! ```
//!
//! The full grammar lives in `docs/scenario.md`.

use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::path::Path;

use thiserror::Error;

use crate::addr::Cidr;
use crate::chain::Policy;
use crate::conntrack::{PortAllocator, VirtualTime};
use crate::packet::{EchoKind, IpProtocol, Packet};
use crate::pipeline::{step_world, HostNode, Interface, Node, RouterNode, World};
use crate::routing::RouteEntry;
use crate::rule::{parse_rule_command, ChainId, RuleCommand, Table};
use crate::trace::{check_expectations, EventKind, ExpectPattern, ExpectReport, Trace};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
}

impl ScenarioError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Io { .. } => None,
            ScenarioError::Parse { line, .. } | ScenarioError::Validation { line, .. } => Some(*line),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        message: message.into(),
    }
}

fn invalid(line: usize, message: impl ToString) -> ScenarioError {
    ScenarioError::Validation {
        line,
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeSpec {
    Host {
        name: String,
        iface: Interface,
        gateway: Ipv4Addr,
    },
    Router {
        name: String,
        ifaces: Vec<Interface>,
    },
}

impl NodeSpec {
    pub fn name(&self) -> &str {
        match self {
            NodeSpec::Host { name, .. } | NodeSpec::Router { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub name: String,
    pub a: (String, String),
    pub b: (String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteSpec {
    pub node: String,
    pub route: RouteEntry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleItem {
    Command(RuleCommand),
    Policy(ChainId, Policy),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSpec {
    pub node: String,
    pub item: RuleItem,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub time: VirtualTime,
    pub node: String,
    /// When set, the packet arrives on this interface instead of being sent
    /// by the node.
    pub iface: Option<String>,
    pub packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocMode {
    #[default]
    Sequential,
    Shuffle,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Options {
    pub alloc: AllocMode,
    pub seed: u64,
}

/// Items paired with the source line they came from.
type Lined<T> = Vec<(usize, T)>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub nodes: Lined<NodeSpec>,
    pub links: Lined<LinkSpec>,
    pub routes: Lined<RouteSpec>,
    pub rules: Lined<RuleSpec>,
    pub injections: Lined<Injection>,
    pub expectations: Vec<ExpectPattern>,
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Nodes,
    Links,
    Routes,
    Rules,
    Inject,
    Expect,
    Options,
}

impl Section {
    fn from_header(s: &str) -> Option<Section> {
        Some(match s {
            "NODES" => Section::Nodes,
            "LINKS" => Section::Links,
            "ROUTES" => Section::Routes,
            "RULES" => Section::Rules,
            "INJECT" => Section::Inject,
            "EXPECT" => Section::Expect,
            "OPTIONS" => Section::Options,
            _ => return None,
        })
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut s = Scenario::default();
    let mut section = None;
    for (idx, raw) in text.lines().enumerate() {
        let n = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(sec) = Section::from_header(line) {
            section = Some(sec);
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match section {
            None => return Err(parse_err(n, format!("`{line}` outside any section"))),
            Some(Section::Nodes) => s.nodes.push((n, parse_node(n, &words)?)),
            Some(Section::Links) => s.links.push((n, parse_link(n, &words)?)),
            Some(Section::Routes) => s.routes.push((n, parse_route(n, &words)?)),
            Some(Section::Rules) => s.rules.push((n, parse_rule_line(n, line, &words)?)),
            Some(Section::Inject) => s.injections.push((n, parse_injection(n, &words)?)),
            Some(Section::Expect) => s.expectations.push(ExpectPattern::new(line)),
            Some(Section::Options) => parse_option(n, &words, &mut s.options)?,
        }
    }
    build_world(&s, &RunConfig::default())?;
    Ok(s)
}

fn parse_ip(line: usize, s: &str) -> Result<Ipv4Addr, ScenarioError> {
    s.parse().map_err(|_| parse_err(line, format!("bad address `{s}`")))
}

fn parse_num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, ScenarioError> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what} `{s}`")))
}

fn parse_iface(line: usize, name: &str, addr: &str) -> Result<Interface, ScenarioError> {
    let (ip, len) = addr
        .split_once('/')
        .ok_or_else(|| parse_err(line, format!("interface address `{addr}` needs a /prefix")))?;
    let len: u8 = parse_num(line, "prefix length", len)?;
    if len > 32 {
        return Err(parse_err(line, format!("bad prefix length `{len}`")));
    }
    Ok(Interface::new(name, parse_ip(line, ip)?, len))
}

fn parse_node(line: usize, w: &[&str]) -> Result<NodeSpec, ScenarioError> {
    match w {
        ["host", name, iface, addr, "gw", gw] => Ok(NodeSpec::Host {
            name: name.to_string(),
            iface: parse_iface(line, iface, addr)?,
            gateway: parse_ip(line, gw)?,
        }),
        ["router", name, rest @ ..] if !rest.is_empty() && rest.len() % 2 == 0 => Ok(NodeSpec::Router {
            name: name.to_string(),
            ifaces: rest
                .chunks(2)
                .map(|c| parse_iface(line, c[0], c[1]))
                .collect::<Result<_, _>>()?,
        }),
        _ => Err(parse_err(
            line,
            "expected `host <name> <iface> <addr/len> gw <ip>` or `router <name> (<iface> <addr/len>)+`",
        )),
    }
}

fn parse_endpoint_ref(line: usize, s: &str) -> Result<(String, String), ScenarioError> {
    s.split_once('/')
        .map(|(n, i)| (n.to_string(), i.to_string()))
        .ok_or_else(|| parse_err(line, format!("expected <node>/<iface>, got `{s}`")))
}

fn parse_link(line: usize, w: &[&str]) -> Result<LinkSpec, ScenarioError> {
    match w {
        [name, a, b] => Ok(LinkSpec {
            name: name.to_string(),
            a: parse_endpoint_ref(line, a)?,
            b: parse_endpoint_ref(line, b)?,
        }),
        _ => Err(parse_err(line, "expected `<link> <node>/<iface> <node>/<iface>`")),
    }
}

fn parse_route(line: usize, w: &[&str]) -> Result<RouteSpec, ScenarioError> {
    let (node, prefix, via, iface) = match w {
        [node, prefix, "via", via, "dev", iface] => (node, prefix, Some(parse_ip(line, via)?), iface),
        [node, prefix, "dev", iface] => (node, prefix, None, iface),
        _ => return Err(parse_err(line, "expected `<node> <prefix> [via <ip>] dev <iface>`")),
    };
    let prefix: Cidr = prefix
        .parse()
        .map_err(|e| parse_err(line, format!("bad prefix `{prefix}`: {e}")))?;
    Ok(RouteSpec {
        node: node.to_string(),
        route: RouteEntry {
            prefix,
            via,
            iface: iface.to_string(),
        },
    })
}

fn parse_rule_line(line: usize, text: &str, w: &[&str]) -> Result<RuleSpec, ScenarioError> {
    match w {
        [node, "policy", chain, policy] => {
            let chain: ChainId = chain
                .parse()
                .map_err(|_| parse_err(line, format!("unknown chain `{chain}`")))?;
            let policy = match *policy {
                "ACCEPT" => Policy::Accept,
                "DROP" => Policy::Drop,
                other => return Err(parse_err(line, format!("policy must be ACCEPT or DROP, got `{other}`"))),
            };
            Ok(RuleSpec {
                node: node.to_string(),
                item: RuleItem::Policy(chain, policy),
            })
        }
        [node, "iptables", ..] => {
            let cmd = text[text.find("iptables").unwrap()..].trim();
            let cmd = parse_rule_command(cmd).map_err(|e| parse_err(line, e.to_string()))?;
            Ok(RuleSpec {
                node: node.to_string(),
                item: RuleItem::Command(cmd),
            })
        }
        _ => Err(parse_err(
            line,
            "expected `<node> iptables ...` or `<node> policy <CHAIN> <ACCEPT|DROP>`",
        )),
    }
}

fn parse_option(line: usize, w: &[&str], opts: &mut Options) -> Result<(), ScenarioError> {
    match w {
        ["alloc", "sequential"] => opts.alloc = AllocMode::Sequential,
        ["alloc", "shuffle"] => opts.alloc = AllocMode::Shuffle,
        ["seed", n] => opts.seed = parse_num(line, "seed", n)?,
        _ => return Err(parse_err(line, "expected `alloc sequential|shuffle` or `seed <n>`")),
    }
    Ok(())
}

fn parse_addr_id(line: usize, s: &str) -> Result<(Ipv4Addr, u16), ScenarioError> {
    let (ip, id) = s
        .rsplit_once(':')
        .ok_or_else(|| parse_err(line, format!("expected <ip>:<id>, got `{s}`")))?;
    Ok((parse_ip(line, ip)?, parse_num(line, "id", id)?))
}

/// Parses `<proto> <src>:<id> [>] <dst>:<id> [key=value ...]` into a packet.
pub fn parse_packet_spec(line: usize, words: &[&str]) -> Result<Packet, ScenarioError> {
    let words: Vec<&str> = words.iter().copied().filter(|w| *w != ">").collect();
    let [proto, src, dst, opts @ ..] = words.as_slice() else {
        return Err(parse_err(line, "expected `<proto> <src>:<id> <dst>:<id>`"));
    };
    let proto: IpProtocol = proto
        .parse()
        .map_err(|_| parse_err(line, format!("unknown protocol `{proto}`")))?;
    let (src, sid) = parse_addr_id(line, src)?;
    let (dst, did) = parse_addr_id(line, dst)?;
    let mut ttl = 64u8;
    let mut seq = 1u32;
    let mut len = 0usize;
    let mut kind = EchoKind::Request;
    let mut flags = 0x02u8;
    for opt in opts {
        let (k, v) = opt
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected key=value, got `{opt}`")))?;
        match k {
            "ttl" => ttl = parse_num(line, "ttl", v)?,
            "seq" => seq = parse_num(line, "seq", v)?,
            "len" => len = parse_num(line, "len", v)?,
            "flags" => flags = parse_num(line, "flags", v)?,
            "type" => {
                kind = match v {
                    "request" => EchoKind::Request,
                    "reply" => EchoKind::Reply,
                    _ => return Err(parse_err(line, format!("type must be request or reply, got `{v}`"))),
                }
            }
            _ => return Err(parse_err(line, format!("unknown packet option `{k}`"))),
        }
    }
    if len > 1400 {
        return Err(parse_err(line, "payload longer than 1400 bytes"));
    }
    let payload = vec![0u8; len];
    let packet = match proto {
        IpProtocol::Icmp => {
            if sid != did {
                return Err(parse_err(line, "icmp identifier must be the same on both sides"));
            }
            let seq = u16::try_from(seq).map_err(|_| parse_err(line, "icmp seq exceeds 65535"))?;
            Packet::icmp_echo(src, dst, kind, sid, seq, payload)
        }
        IpProtocol::Udp => Packet::udp(src, sid, dst, did, payload),
        IpProtocol::Tcp => Packet::tcp(src, sid, dst, did, seq, flags, payload),
    };
    Ok(packet.with_ttl(ttl))
}

fn parse_injection(line: usize, w: &[&str]) -> Result<Injection, ScenarioError> {
    let [time, at, rest @ ..] = w else {
        return Err(parse_err(line, "expected `<time_ms> <node>[/<iface>] <packet>`"));
    };
    let time = VirtualTime(parse_num(line, "time", time)?);
    let (node, iface) = match at.split_once('/') {
        Some((n, i)) => (n.to_string(), Some(i.to_string())),
        None => (at.to_string(), None),
    };
    Ok(Injection {
        time,
        node,
        iface,
        packet: parse_packet_spec(line, rest)?,
    })
}

/// Run-time overrides from the command line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    /// Uses the shuffled port allocator with this seed.
    pub seed: Option<u64>,
    /// Stop once virtual time passes this many seconds.
    pub until_secs: Option<u64>,
}

fn allocator(opts: &Options, cfg: &RunConfig) -> PortAllocator {
    match (cfg.seed, opts.alloc) {
        (Some(seed), _) => PortAllocator::shuffled(seed),
        (None, AllocMode::Shuffle) => PortAllocator::shuffled(opts.seed),
        (None, AllocMode::Sequential) => PortAllocator::sequential(),
    }
}

/// Builds the topology with routes and rules applied, but nothing injected.
pub fn build_world(s: &Scenario, cfg: &RunConfig) -> Result<World, ScenarioError> {
    let mut world = World::new();
    for (line, spec) in &s.nodes {
        let node = match spec {
            NodeSpec::Host { name, iface, gateway } => {
                Node::Host(HostNode::new(name, iface.clone(), *gateway).map_err(|e| invalid(*line, e))?)
            }
            NodeSpec::Router { name, ifaces } => Node::Router(Box::new(
                RouterNode::with_allocator(name, ifaces.clone(), allocator(&s.options, cfg))
                    .map_err(|e| invalid(*line, e))?,
            )),
        };
        world.add_node(node).map_err(|e| invalid(*line, e))?;
    }
    for (line, l) in &s.links {
        world
            .connect(&l.name, (&l.a.0, &l.a.1), (&l.b.0, &l.b.1))
            .map_err(|e| invalid(*line, e))?;
    }
    for (line, r) in &s.routes {
        world
            .router_mut(&r.node)
            .and_then(|router| router.add_route(r.route.clone()))
            .map_err(|e| invalid(*line, e))?;
    }
    for (line, r) in &s.rules {
        let router = world.router_mut(&r.node).map_err(|e| invalid(*line, e))?;
        match &r.item {
            RuleItem::Command(cmd) => router.apply_rule(cmd),
            RuleItem::Policy(chain, policy) => {
                let table = if matches!(chain, ChainId::Prerouting | ChainId::Postrouting) {
                    Table::Nat
                } else {
                    Table::Filter
                };
                router.tables.set_policy(table, *chain, *policy)
            }
        }
        .map_err(|e| invalid(*line, e))?;
    }
    for (line, inj) in &s.injections {
        let idx = world.node_index(&inj.node).map_err(|e| invalid(*line, e))?;
        if let (Some(iface), Node::Host(h)) = (&inj.iface, &world.nodes()[idx]) {
            if h.interface.name != *iface {
                return Err(invalid(
                    *line,
                    format!("node `{}` has no interface `{iface}`", inj.node),
                ));
            }
        }
    }
    Ok(world)
}

/// Everything a run produced.
#[derive(Debug)]
pub struct Outcome {
    pub trace: Trace,
    pub report: ExpectReport,
    pub world: World,
    pub end: VirtualTime,
}

impl Outcome {
    /// Live conntrack entries of every router, grouped by router name.
    pub fn dump_conntrack(&self) -> String {
        let mut out = String::new();
        let mut routers: Vec<&RouterNode> = self
            .world
            .nodes()
            .iter()
            .filter_map(|n| match n {
                Node::Router(r) => Some(r.as_ref()),
                Node::Host(_) => None,
            })
            .collect();
        routers.sort_by(|a, b| a.name.cmp(&b.name));
        for r in routers {
            let _ = writeln!(out, "# {} ({} entries)", r.name, r.conntrack.len());
            out.push_str(&r.conntrack.dump(self.end));
        }
        out
    }
}

pub fn run_with(s: &Scenario, cfg: &RunConfig) -> Result<Outcome, ScenarioError> {
    let mut world = build_world(s, cfg)?;
    for (line, inj) in &s.injections {
        match &inj.iface {
            Some(iface) => world.inject_arrival(inj.time, &inj.node, iface, inj.packet.clone()),
            None => world.inject_send(inj.time, &inj.node, inj.packet.clone()),
        }
        .map_err(|e| invalid(*line, e))?;
    }
    let until = cfg.until_secs.map(VirtualTime::from_secs);
    let trace = step_world(&mut world, until);
    let end = until.unwrap_or_else(|| trace.events.last().map_or(VirtualTime(0), |e| e.time));
    let report = check_expectations(&s.expectations, &trace.lines());
    Ok(Outcome {
        trace,
        report,
        world,
        end,
    })
}

/// Runs a loaded scenario with its own options.
pub fn run_scenario(s: &Scenario) -> (Trace, ExpectReport) {
    let out = run_with(s, &RunConfig::default()).expect("scenario was validated when loaded");
    (out.trace, out.report)
}

/// Where a single probe packet ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fate {
    Delivered {
        node: String,
    },
    Dropped {
        node: String,
        reason: String,
    },
    /// Emitted onto a link with nobody to receive it.
    Lost {
        link: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FateReport {
    pub trace: Trace,
    pub fates: Vec<Fate>,
}

impl FateReport {
    pub fn render(&self) -> String {
        let mut out = self.trace.render();
        for f in &self.fates {
            match f {
                Fate::Delivered { node } => {
                    let _ = writeln!(out, "fate: delivered at {node}");
                }
                Fate::Dropped { node, reason } => {
                    let _ = writeln!(out, "fate: dropped at {node} ({reason})");
                }
                Fate::Lost { link } => {
                    let _ = writeln!(out, "fate: lost on {link}");
                }
            }
        }
        out
    }
}

/// Parses `<proto> <src>:<id> <dst>:<id> --in <node>/<iface>`.
pub fn parse_probe(spec: &str) -> Result<(String, String, Packet), ScenarioError> {
    let words: Vec<&str> = spec.split_whitespace().collect();
    let pos = words
        .iter()
        .position(|w| *w == "--in")
        .ok_or_else(|| parse_err(1, "probe needs `--in <node>/<iface>`"))?;
    let [at] = &words[pos + 1..] else {
        return Err(parse_err(1, "expected exactly one <node>/<iface> after --in"));
    };
    let (node, iface) = parse_endpoint_ref(1, at)?;
    let packet = parse_packet_spec(1, &words[..pos])?;
    Ok((node, iface, packet))
}

/// Drops one packet into the scenario's topology, with none of its own
/// injections, and reports the path it takes.
pub fn fate(s: &Scenario, spec: &str) -> Result<FateReport, ScenarioError> {
    let (node, iface, packet) = parse_probe(spec)?;
    let mut world = build_world(s, &RunConfig::default())?;
    world
        .inject_arrival(VirtualTime(0), &node, &iface, packet)
        .map_err(|e| invalid(1, e))?;
    let trace = step_world(&mut world, None);

    let mut fates = Vec::new();
    let mut pending_emit: Option<String> = None;
    for e in &trace.events {
        match e.kind {
            EventKind::Emit => pending_emit = Some(e.node.clone()),
            EventKind::Recv => pending_emit = None,
            EventKind::Deliver => fates.push(Fate::Delivered { node: e.node.clone() }),
            EventKind::Drop => fates.push(Fate::Dropped {
                node: e.node.clone(),
                reason: e.reason.clone().unwrap_or_default(),
            }),
            EventKind::Verdict | EventKind::Translate => {}
        }
    }
    if let Some(link) = pending_emit {
        fates.push(Fate::Lost { link });
    }
    Ok(FateReport { trace, fates })
}
