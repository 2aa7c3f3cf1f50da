use std::collections::HashSet;
use std::net::Ipv4Addr;

use nanonat::chain::{NatKind, TableSet};
use nanonat::conntrack::{ConnTable, PortAllocator, VirtualTime};
use nanonat::packet::{EchoKind, Endpoint, IpProtocol, Packet};
use nanonat::rule::{parse_rule_command, render_rule_command, Action, ChainId, PacketContext, Table};
use nanonat::scenario::{parse_scenario, run_scenario};
use nanonat::trace::{EventKind, Trace};
use proptest::prelude::*;

fn addr() -> impl Strategy<Value = Ipv4Addr> {
    any::<u32>().prop_map(Ipv4Addr::from)
}

fn packet() -> impl Strategy<Value = Packet> {
    let payload = proptest::collection::vec(any::<u8>(), 0..48);
    (
        0u8..3,
        addr(),
        addr(),
        any::<u16>(),
        any::<u16>(),
        payload,
        1u8..=255,
        any::<bool>(),
    )
        .prop_map(|(kind, src, dst, a, b, payload, ttl, flag)| {
            let p = match kind {
                0 => Packet::icmp_echo(
                    src,
                    dst,
                    if flag { EchoKind::Request } else { EchoKind::Reply },
                    a,
                    b,
                    payload,
                ),
                1 => Packet::tcp(src, a, dst, b, u32::from(a) << 16 | u32::from(b), 0x18, payload),
                _ => Packet::udp(src, a, dst, b, payload),
            };
            p.with_ttl(ttl)
        })
}

fn diff_positions(a: &[u8], b: &[u8]) -> Vec<usize> {
    assert_eq!(a.len(), b.len());
    (0..a.len()).filter(|&i| a[i] != b[i]).collect()
}

/// Byte offsets a rewrite of `which` may touch, given the transport layout.
fn allowed_bytes(p: &Packet, which: Endpoint) -> HashSet<usize> {
    let mut ok: HashSet<usize> = (10..12).collect();
    ok.extend(match which {
        Endpoint::Source => 12..16,
        Endpoint::Destination => 16..20,
    });
    match p.ports() {
        Some(_) => {
            ok.extend(match which {
                Endpoint::Source => 20..22,
                Endpoint::Destination => 22..24,
            });
            let csum = if p.protocol() == IpProtocol::Tcp { 36 } else { 26 };
            ok.extend(csum..csum + 2);
        }
        None => ok.extend([22, 23, 24, 25]),
    }
    ok
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(p in packet()) {
        let wire = p.to_bytes();
        prop_assert_eq!(wire.len(), usize::from(p.ip.total_length));
        prop_assert_eq!(Packet::parse(&wire).unwrap(), p);
    }

    #[test]
    fn rewrite_only_touches_its_fields(p in packet(), to in addr(), id in any::<u16>(), src_side in any::<bool>()) {
        let which = if src_side { Endpoint::Source } else { Endpoint::Destination };
        let q = p.rewrite_endpoint(which, to, Some(id));
        prop_assert!(q.checksums_valid());
        let allowed = allowed_bytes(&p, which);
        for i in diff_positions(&p.to_bytes(), &q.to_bytes()) {
            prop_assert!(allowed.contains(&i), "byte {} changed", i);
        }
    }

    #[test]
    fn ttl_decrement_touches_ttl_and_checksum(p in packet()) {
        match p.decrement_ttl() {
            Ok(q) => {
                prop_assert_eq!(q.ip.ttl, p.ip.ttl - 1);
                prop_assert!(q.checksums_valid());
                for i in diff_positions(&p.to_bytes(), &q.to_bytes()) {
                    prop_assert!(i == 8 || i == 10 || i == 11, "byte {} changed", i);
                }
            }
            Err(_) => prop_assert!(p.ip.ttl <= 1),
        }
    }

    #[test]
    fn corrupting_one_byte_is_detected(p in packet(), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut wire = p.to_bytes();
        let i = at.index(wire.len());
        wire[i] ^= flip;
        // any single-byte change inside a checksummed region must not parse back to p
        if let Ok(q) = Packet::parse(&wire) {
            prop_assert_ne!(q, p);
        }
    }
}

const IFACES: [&str; 2] = ["eth0", "eth1"];

fn rule_text() -> impl Strategy<Value = String> {
    let cidr = prop_oneof![
        Just(None),
        (addr(), 0u8..=32).prop_map(|(a, l)| Some(format!("{a}/{l}")))
    ];
    let iface = prop_oneof![Just(None), prop::sample::select(IFACES.to_vec()).prop_map(Some)];
    let proto = prop::sample::select(vec!["", "tcp", "udp", "icmp"]);
    (
        cidr.clone(),
        cidr,
        iface.clone(),
        iface,
        proto,
        any::<u16>(),
        any::<u8>(),
        0u8..4,
        prop::sample::select(vec!["ACCEPT", "DROP", "RETURN"]),
    )
        .prop_map(|(s, d, i, o, p, port, t, which, target)| {
            let mut cmd = String::from("iptables -A FORWARD");
            if let Some(s) = s {
                cmd += &format!(" -s {s}");
            }
            if let Some(d) = d {
                cmd += &format!(" -d {d}");
            }
            if let Some(i) = i {
                cmd += &format!(" -i {i}");
            }
            if let Some(o) = o {
                cmd += &format!(" -o {o}");
            }
            if !p.is_empty() {
                cmd += &format!(" -p {p}");
            }
            match (p, which) {
                ("tcp" | "udp", 1) => cmd += &format!(" --dport {port}"),
                ("tcp" | "udp", 2) => cmd += &format!(" --sport {port}"),
                ("icmp", 1) => cmd += &format!(" --icmp-type {t}"),
                _ => {}
            }
            cmd + " -j " + target
        })
}

proptest! {
    #[test]
    fn render_is_a_fixed_point(text in rule_text()) {
        let once = render_rule_command(&parse_rule_command(&text).unwrap());
        let twice = render_rule_command(&parse_rule_command(&once).unwrap());
        prop_assert_eq!(once, twice);
    }

    // a stricter rule never matches a packet that the looser one rejects
    #[test]
    fn extra_match_flags_only_narrow(text in rule_text(), p in packet(), i in 0usize..2, o in 0usize..2) {
        let strict = parse_rule_command(&text).unwrap().rule;
        let mut loose = strict.clone();
        loose.matcher.src = None;
        loose.matcher.in_iface = None;
        loose.matcher.dport = None;
        let ctx = PacketContext { packet: &p, in_iface: Some(IFACES[i]), out_iface: Some(IFACES[o]) };
        if strict.matches(&ctx) {
            prop_assert!(loose.matches(&ctx));
        }
    }

    #[test]
    fn append_then_delete_restores(base in proptest::collection::vec(rule_text(), 0..6), extra in rule_text()) {
        let mut tables = TableSet::new();
        for r in &base {
            tables.apply_command(&parse_rule_command(r).unwrap()).unwrap();
        }
        let before = tables.list_rules(Table::Filter);
        let mut cmd = parse_rule_command(&extra).unwrap();
        tables.apply_command(&cmd).unwrap();
        cmd.action = Action::Delete;
        tables.apply_command(&cmd).unwrap();
        // the first equal rule goes, so restore holds only up to rule identity
        let after = tables.list_rules(Table::Filter);
        let mut a: Vec<&str> = before.lines().collect();
        let mut b: Vec<&str> = after.lines().collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Out { host: u8, id: u16, proto: u8 },
    In { ext: u8, id: u16 },
    Reply { pick: prop::sample::Index },
    Advance { secs: u64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u8..4, 0u16..6, 0u8..3).prop_map(|(host, id, proto)| Op::Out { host, id, proto }),
        1 => (0u8..4, 0u16..6).prop_map(|(ext, id)| Op::In { ext, id }),
        2 => any::<prop::sample::Index>().prop_map(|pick| Op::Reply { pick }),
        1 => (0u64..50).prop_map(|secs| Op::Advance { secs }),
    ]
}

proptest! {
    #[test]
    fn conntrack_bookkeeping(ops in proptest::collection::vec(op(), 1..80)) {
        let nat = Ipv4Addr::new(203, 0, 113, 1);
        let server = Ipv4Addr::new(198, 51, 100, 7);
        let mut t = ConnTable::new(PortAllocator::sequential());
        let mut now = VirtualTime(0);
        let mut sent: Vec<Packet> = Vec::new();
        for op in ops {
            match op {
                Op::Out { host, id, proto } => {
                    let src = Ipv4Addr::new(10, 0, 0, host + 1);
                    let p = match proto {
                        0 => Packet::icmp_echo(src, server, EchoKind::Request, id, 1, vec![]),
                        1 => Packet::udp(src, id, server, 53, vec![]),
                        _ => Packet::tcp(src, id, server, 80, 0, 2, vec![]),
                    };
                    let (q, _) = t.snat_egress(&p, nat, NatKind::Masquerade, None, now).unwrap();
                    sent.push(q);
                }
                Op::In { ext, id } => {
                    let p = Packet::udp(Ipv4Addr::new(192, 0, 2, ext), id, nat, 8080, vec![]);
                    t.dnat_ingress(&p, Ipv4Addr::new(10, 0, 0, 9), None, now);
                }
                Op::Reply { pick } => {
                    if !sent.is_empty() {
                        let q = &sent[pick.index(sent.len())];
                        let reply = match q.echo() {
                            Some(e) => Packet::icmp_echo(q.ip.dst, q.ip.src, EchoKind::Reply, e.identifier, 1, vec![]),
                            None => {
                                let (s, d) = q.ports().unwrap();
                                if q.protocol() == IpProtocol::Tcp {
                                    Packet::tcp(q.ip.dst, d, q.ip.src, s, 0, 0x12, vec![])
                                } else {
                                    Packet::udp(q.ip.dst, d, q.ip.src, s, vec![])
                                }
                            }
                        };
                        if let Ok((r, entry)) = t.reverse_translate(&reply, now) {
                            prop_assert_eq!(r.tuple(), entry.original.reversed());
                        }
                    }
                }
                Op::Advance { secs } => {
                    now = VirtualTime(now.millis() + secs * 1000);
                    t.expire(now);
                }
            }
            let stats = t.stats();
            prop_assert_eq!(stats.created - stats.removed, t.len() as u64);
            let replies: HashSet<_> = t.entries().map(|e| e.reply()).collect();
            prop_assert_eq!(replies.len(), t.len());
            let snat_live = t.entries().filter(|e| e.kind != NatKind::Dnat).count();
            prop_assert_eq!(t.allocator().in_use_count(), snat_live);
        }
    }
}

/// `routers` routers in a line between two hosts; returns scenario text.
fn line_topology(routers: u8, ttl: u8) -> String {
    let mut s = String::from("NODES\n");
    s += "host src eth0 10.0.0.2/24 gw 10.0.0.3\n";
    for i in 1..=routers {
        s += &format!("router r{i} l 10.0.{}.3/24 r 10.0.{i}.1/24\n", i - 1);
    }
    s += &format!("host dst eth0 10.0.{routers}.2/24 gw 10.0.{routers}.1\n");
    s += "LINKS\nn0 src/eth0 r1/l\n";
    for i in 1..routers {
        s += &format!("n{i} r{i}/r r{}/l\n", i + 1);
    }
    s += &format!("n{routers} r{routers}/r dst/eth0\nROUTES\n");
    for i in 1..routers {
        s += &format!("r{i} 0.0.0.0/0 via 10.0.{i}.3 dev r\n");
    }
    s += &format!("INJECT\n0 src udp 10.0.0.2:1000 > 10.0.{routers}.2:9 ttl={ttl}\n");
    s
}

fn recv_ttls(trace: &Trace) -> Vec<u8> {
    trace
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Recv)
        .map(|e| e.ttl)
        .collect()
}

proptest! {
    #[test]
    fn ttl_drops_by_one_per_router(routers in 1u8..6, ttl in 1u8..=255) {
        let s = parse_scenario(&line_topology(routers, ttl)).unwrap();
        let (trace, _) = run_scenario(&s);
        let ttls = recv_ttls(&trace);
        for pair in ttls.windows(2) {
            prop_assert_eq!(pair[1], pair[0] - 1);
        }
        let last = trace.events.last().unwrap();
        if ttl > routers {
            prop_assert_eq!(last.kind, EventKind::Deliver);
            prop_assert_eq!(&last.node, "dst");
            prop_assert_eq!(last.ttl, ttl - routers);
        } else {
            prop_assert_eq!(last.kind, EventKind::Drop);
            prop_assert_eq!(last.reason.as_deref(), Some("ttl-expired"));
            prop_assert_eq!(last.node.clone(), format!("r{ttl}"));
        }
    }
}

const GOLDEN: &str = include_str!("../../../scenarios/paper_nat.scn");

fn inject_lines() -> impl Strategy<Value = Vec<String>> {
    let one = (0u64..3000, 0u8..4, 1u16..5, any::<bool>()).prop_map(|(t, kind, id, outside)| {
        let (node, src, dst) = if outside {
            ("RB/lan0", "192.168.10.10", "202.16.58.1")
        } else {
            ("PC1", "192.168.1.10", "202.16.58.2")
        };
        match kind {
            0 => format!("{t} {node} icmp {src}:{id} > {dst}:{id}"),
            1 => format!("{t} {node} udp {src}:{id} > {dst}:53"),
            2 => format!("{t} {node} tcp {src}:{id} > {dst}:80"),
            _ => format!("{t} {node} udp {src}:{id} > 192.168.1.1:7"),
        }
    });
    proptest::collection::vec(one, 1..12)
}

const CANONICAL: [(&str, &str); 5] = [
    ("nat", "OUTPUT"),
    ("nat", "PREROUTING"),
    ("filter", "INPUT"),
    ("filter", "FORWARD"),
    ("nat", "POSTROUTING"),
];

/// Chain events between a RECV and the next RECV on the same node.
fn chain_runs(trace: &Trace) -> Vec<Vec<(String, ChainId)>> {
    let mut runs: Vec<(String, Vec<(String, ChainId)>)> = Vec::new();
    for e in &trace.events {
        match e.kind {
            EventKind::Recv => runs.push((e.node.clone(), Vec::new())),
            EventKind::Verdict => {
                if let Some(run) = runs.iter_mut().rev().find(|(n, _)| *n == e.node) {
                    let (table, chain) = e.chain.unwrap();
                    run.1.push((table.to_string(), chain));
                }
            }
            _ => {}
        }
    }
    runs.into_iter().map(|(_, r)| r).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn runs_are_deterministic_and_ordered(lines in inject_lines()) {
        let text = format!("{GOLDEN}\nINJECT\n{}\n", lines.join("\n"));
        let s = parse_scenario(&text).unwrap();
        let first = run_scenario(&s).0;
        let second = run_scenario(&s).0;
        prop_assert_eq!(first.render(), second.render());

        for run in chain_runs(&first) {
            let mut pos = 0;
            for (table, chain) in &run {
                let found = CANONICAL[pos..]
                    .iter()
                    .position(|(t, c)| t == table && *c == chain.name());
                prop_assert!(found.is_some(), "out of order: {:?}", run);
                pos += found.unwrap() + 1;
            }
            let names: Vec<&str> = run.iter().map(|(_, c)| c.name()).collect();
            prop_assert!(
                !names.contains(&"INPUT") || !names.contains(&"FORWARD"),
                "both INPUT and FORWARD: {:?}", names
            );
        }
    }
}
