//! iptables-syntax rule commands: parsing, canonical rendering, and matching.
//!
//! Accepted grammar:
//!
//! ```text
//! iptables [-t filter|nat] (-A CHAIN | -I POS CHAIN | -I CHAIN [POS] | -D CHAIN)
//!          [-s CIDR] [-d CIDR] [-i NAME] [-o NAME] [-p tcp|udp|icmp]
//!          [--sport N] [--dport N] [--icmp-type N]
//!          -j ACCEPT|DROP|RETURN|MASQUERADE
//!             |SNAT --to-source IP[:PORT]|DNAT --to-destination IP[:PORT]
//! ```

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::addr::Cidr;
use crate::packet::{IpProtocol, Packet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Table {
    Filter,
    Nat,
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::Filter => "filter",
            Table::Nat => "nat",
        }
    }

    /// Built-in chains of this table, in listing order.
    pub fn chains(self) -> &'static [ChainId] {
        match self {
            Table::Filter => &[ChainId::Input, ChainId::Forward, ChainId::Output],
            Table::Nat => &[ChainId::Prerouting, ChainId::Output, ChainId::Postrouting],
        }
    }

    pub fn has_chain(self, chain: ChainId) -> bool {
        self.chains().contains(&chain)
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChainId {
    Prerouting,
    Input,
    Forward,
    Output,
    Postrouting,
}

impl ChainId {
    pub const ALL: [ChainId; 5] = [
        ChainId::Prerouting,
        ChainId::Input,
        ChainId::Forward,
        ChainId::Output,
        ChainId::Postrouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChainId::Prerouting => "PREROUTING",
            ChainId::Input => "INPUT",
            ChainId::Forward => "FORWARD",
            ChainId::Output => "OUTPUT",
            ChainId::Postrouting => "POSTROUTING",
        }
    }
}

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChainId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChainId::ALL.into_iter().find(|c| c.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MatchSpec {
    pub src: Option<Cidr>,
    pub dst: Option<Cidr>,
    pub in_iface: Option<String>,
    pub out_iface: Option<String>,
    pub protocol: Option<IpProtocol>,
    pub sport: Option<u16>,
    pub dport: Option<u16>,
    pub icmp_type: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Accept,
    Drop,
    Return,
    Masquerade,
    Snat { to: Ipv4Addr, port_base: Option<u16> },
    Dnat { to: Ipv4Addr, port: Option<u16> },
}

impl Target {
    pub fn is_nat(&self) -> bool {
        matches!(self, Target::Masquerade | Target::Snat { .. } | Target::Dnat { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Target::Accept => "ACCEPT",
            Target::Drop => "DROP",
            Target::Return => "RETURN",
            Target::Masquerade => "MASQUERADE",
            Target::Snat { .. } => "SNAT",
            Target::Dnat { .. } => "DNAT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub matcher: MatchSpec,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Append,
    /// 1-based position.
    Insert(u32),
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleCommand {
    pub table: Table,
    pub action: Action,
    pub chain: ChainId,
    pub rule: Rule,
}

/// A packet together with the interfaces it is traversing.
///
/// `in_iface` is absent for locally generated packets, `out_iface` before the
/// routing decision.
#[derive(Debug, Clone, Copy)]
pub struct PacketContext<'a> {
    pub packet: &'a Packet,
    pub in_iface: Option<&'a str>,
    pub out_iface: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("unknown flag `{0}`")]
    UnknownFlag(String),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("chain `{chain}` is not valid for table `{table}`")]
    BadChain { table: String, chain: String },
    #[error("bad value `{value}` for {flag}")]
    BadValue { flag: String, value: String },
    #[error("missing -j target")]
    MissingTarget,
    #[error("{0}")]
    Syntax(String),
}

fn bad_value(flag: &str, value: &str) -> RuleError {
    RuleError::BadValue {
        flag: flag.to_string(),
        value: value.to_string(),
    }
}

pub fn valid_iface_name(name: &str) -> bool {
    (1..=15).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

fn parse_endpoint(flag: &str, value: &str) -> Result<(Ipv4Addr, Option<u16>), RuleError> {
    let (addr, port) = match value.split_once(':') {
        Some((a, p)) => (a, Some(p)),
        None => (value, None),
    };
    let addr = addr.parse().map_err(|_| bad_value(flag, value))?;
    let port = port.map(|p| parse_number::<u16>(flag, p)).transpose()?;
    Ok((addr, port))
}

fn next_value<'a>(tokens: &mut impl Iterator<Item = &'a str>, flag: &str) -> Result<&'a str, RuleError> {
    tokens.next().ok_or_else(|| bad_value(flag, ""))
}

fn parse_number<T: FromStr>(flag: &str, value: &str) -> Result<T, RuleError> {
    if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad_value(flag, value));
    }
    value.parse().map_err(|_| bad_value(flag, value))
}

fn set_once<T>(slot: &mut Option<T>, flag: &str, value: T) -> Result<(), RuleError> {
    if slot.is_some() {
        return Err(RuleError::Syntax(format!("duplicate {flag}")));
    }
    *slot = Some(value);
    Ok(())
}

/// Parses one iptables command line. Tokens are separated by whitespace.
pub fn parse_rule_command(text: &str) -> Result<RuleCommand, RuleError> {
    let mut tokens = text.split_whitespace().peekable();
    match tokens.next() {
        Some("iptables") => {}
        Some(other) => return Err(RuleError::Syntax(format!("expected `iptables`, found `{other}`"))),
        None => return Err(RuleError::Syntax("empty command".into())),
    }

    let mut table = None;
    let mut action: Option<(Action, String)> = None;
    let mut m = MatchSpec::default();
    let mut target_name: Option<String> = None;
    let mut to_source = None;
    let mut to_destination = None;

    while let Some(flag) = tokens.next() {
        match flag {
            "-t" => {
                let v = next_value(&mut tokens, flag)?;
                let t = match v {
                    "filter" => Table::Filter,
                    "nat" => Table::Nat,
                    _ => return Err(bad_value(flag, v)),
                };
                set_once(&mut table, flag, t)?;
            }
            "-A" | "-D" | "-I" => {
                if action.is_some() {
                    return Err(RuleError::Syntax("more than one action".into()));
                }
                let first = next_value(&mut tokens, flag)?;
                let parsed = match flag {
                    "-A" => (Action::Append, first.to_string()),
                    "-D" => (Action::Delete, first.to_string()),
                    _ if first.bytes().all(|b| b.is_ascii_digit()) => {
                        let pos = parse_number::<u32>(flag, first)?;
                        (Action::Insert(pos), next_value(&mut tokens, flag)?.to_string())
                    }
                    _ => {
                        // iptables order: -I CHAIN [POS]
                        let pos = match tokens.peek() {
                            Some(t) if t.bytes().all(|b| b.is_ascii_digit()) => {
                                let t = tokens.next().unwrap();
                                parse_number::<u32>(flag, t)?
                            }
                            _ => 1,
                        };
                        (Action::Insert(pos), first.to_string())
                    }
                };
                action = Some(parsed);
            }
            "-s" | "-d" => {
                let v = next_value(&mut tokens, flag)?;
                let cidr: Cidr = v.parse().map_err(|_| bad_value(flag, v))?;
                let slot = if flag == "-s" { &mut m.src } else { &mut m.dst };
                set_once(slot, flag, cidr)?;
            }
            "-i" | "-o" => {
                let v = next_value(&mut tokens, flag)?;
                if !valid_iface_name(v) {
                    return Err(bad_value(flag, v));
                }
                let slot = if flag == "-i" {
                    &mut m.in_iface
                } else {
                    &mut m.out_iface
                };
                set_once(slot, flag, v.to_string())?;
            }
            "-p" => {
                let v = next_value(&mut tokens, flag)?;
                let p = v.parse().map_err(|_| bad_value(flag, v))?;
                set_once(&mut m.protocol, flag, p)?;
            }
            "--sport" | "--dport" => {
                let v = next_value(&mut tokens, flag)?;
                let port = parse_number::<u16>(flag, v)?;
                let slot = if flag == "--sport" { &mut m.sport } else { &mut m.dport };
                set_once(slot, flag, port)?;
            }
            "--icmp-type" => {
                let v = next_value(&mut tokens, flag)?;
                let t = parse_number::<u8>(flag, v)?;
                set_once(&mut m.icmp_type, flag, t)?;
            }
            "-j" => {
                let v = next_value(&mut tokens, flag)?;
                set_once(&mut target_name, flag, v.to_string())?;
            }
            "--to-source" => {
                let v = next_value(&mut tokens, flag)?;
                set_once(&mut to_source, flag, parse_endpoint(flag, v)?)?;
            }
            "--to-destination" => {
                let v = next_value(&mut tokens, flag)?;
                set_once(&mut to_destination, flag, parse_endpoint(flag, v)?)?;
            }
            other => return Err(RuleError::UnknownFlag(other.to_string())),
        }
    }

    let table = table.unwrap_or(Table::Filter);
    let (action, chain_name) = action.ok_or_else(|| RuleError::Syntax("missing -A, -I or -D".into()))?;
    let chain: ChainId = match chain_name.parse() {
        Ok(c) if table.has_chain(c) => c,
        _ => {
            return Err(RuleError::BadChain {
                table: table.name().into(),
                chain: chain_name,
            })
        }
    };

    let target_name = target_name.ok_or(RuleError::MissingTarget)?;
    let target = match target_name.as_str() {
        "ACCEPT" => Target::Accept,
        "DROP" => Target::Drop,
        "RETURN" => Target::Return,
        "MASQUERADE" => Target::Masquerade,
        "SNAT" => {
            let (to, port_base) = to_source
                .take()
                .ok_or_else(|| RuleError::Syntax("SNAT requires --to-source".into()))?;
            Target::Snat { to, port_base }
        }
        "DNAT" => {
            let (to, port) = to_destination
                .take()
                .ok_or_else(|| RuleError::Syntax("DNAT requires --to-destination".into()))?;
            Target::Dnat { to, port }
        }
        other => return Err(RuleError::UnknownTarget(other.to_string())),
    };
    if to_source.is_some() {
        return Err(RuleError::Syntax("--to-source is only valid with -j SNAT".into()));
    }
    if to_destination.is_some() {
        return Err(RuleError::Syntax("--to-destination is only valid with -j DNAT".into()));
    }

    let rule = Rule { matcher: m, target };
    rule.validate()?;
    Ok(RuleCommand {
        table,
        action,
        chain,
        rule,
    })
}

impl Rule {
    /// Checks the protocol dependencies of port and ICMP-type matches.
    pub fn validate(&self) -> Result<(), RuleError> {
        let m = &self.matcher;
        let ported = matches!(m.protocol, Some(IpProtocol::Tcp | IpProtocol::Udp));
        if (m.sport.is_some() || m.dport.is_some()) && !ported {
            return Err(RuleError::Syntax("--sport/--dport require -p tcp or -p udp".into()));
        }
        if m.icmp_type.is_some() && m.protocol != Some(IpProtocol::Icmp) {
            return Err(RuleError::Syntax("--icmp-type requires -p icmp".into()));
        }
        let port_target = matches!(
            self.target,
            Target::Snat { port_base: Some(_), .. } | Target::Dnat { port: Some(_), .. }
        );
        if port_target && !ported {
            return Err(RuleError::Syntax("a translation port requires -p tcp or -p udp".into()));
        }
        Ok(())
    }

    /// True iff every present field of the match specification holds.
    pub fn matches(&self, ctx: &PacketContext<'_>) -> bool {
        let m = &self.matcher;
        let p = ctx.packet;
        if let Some(c) = &m.src {
            if !c.contains(p.ip.src) {
                return false;
            }
        }
        if let Some(c) = &m.dst {
            if !c.contains(p.ip.dst) {
                return false;
            }
        }
        if let Some(name) = &m.in_iface {
            if ctx.in_iface != Some(name.as_str()) {
                return false;
            }
        }
        if let Some(name) = &m.out_iface {
            if ctx.out_iface != Some(name.as_str()) {
                return false;
            }
        }
        if let Some(proto) = m.protocol {
            if p.protocol() != proto {
                return false;
            }
        }
        if m.sport.is_some() || m.dport.is_some() {
            let Some((sport, dport)) = p.ports() else {
                return false;
            };
            if m.sport.is_some_and(|want| want != sport) || m.dport.is_some_and(|want| want != dport) {
                return false;
            }
        }
        if let Some(kind) = m.icmp_type {
            match p.echo() {
                Some(e) if e.kind.code() == kind => {}
                _ => return false,
            }
        }
        true
    }
}

pub fn rule_matches(rule: &Rule, ctx: &PacketContext<'_>) -> bool {
    rule.matches(ctx)
}

/// Matcher flags and target, without the table/action/chain prefix.
impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.matcher;
        if let Some(c) = &m.src {
            write!(f, "-s {c} ")?;
        }
        if let Some(c) = &m.dst {
            write!(f, "-d {c} ")?;
        }
        if let Some(i) = &m.in_iface {
            write!(f, "-i {i} ")?;
        }
        if let Some(o) = &m.out_iface {
            write!(f, "-o {o} ")?;
        }
        if let Some(p) = m.protocol {
            write!(f, "-p {p} ")?;
        }
        if let Some(p) = m.sport {
            write!(f, "--sport {p} ")?;
        }
        if let Some(p) = m.dport {
            write!(f, "--dport {p} ")?;
        }
        if let Some(t) = m.icmp_type {
            write!(f, "--icmp-type {t} ")?;
        }
        write!(f, "-j {}", self.target.name())?;
        match &self.target {
            Target::Snat { to, port_base } => {
                write!(f, " --to-source {to}")?;
                if let Some(p) = port_base {
                    write!(f, ":{p}")?;
                }
            }
            Target::Dnat { to, port } => {
                write!(f, " --to-destination {to}")?;
                if let Some(p) = port {
                    write!(f, ":{p}")?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for RuleCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iptables -t {} ", self.table)?;
        match self.action {
            Action::Append => write!(f, "-A ")?,
            Action::Insert(pos) => write!(f, "-I {pos} ")?,
            Action::Delete => write!(f, "-D ")?,
        }
        write!(f, "{} {}", self.chain, self.rule)
    }
}

/// Canonical form: fixed flag order, explicit table, CIDRs with prefix length.
pub fn render_rule_command(cmd: &RuleCommand) -> String {
    cmd.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::EchoKind;

    const MASQ_RULE: &str = "iptables -t nat -A POSTROUTING -s 192.168.0.2 -o eth1 -j MASQUERADE";

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn masquerade_command() {
        let cmd = parse_rule_command(MASQ_RULE).unwrap();
        assert_eq!(cmd.table, Table::Nat);
        assert_eq!(cmd.action, Action::Append);
        assert_eq!(cmd.chain, ChainId::Postrouting);
        assert_eq!(
            cmd.rule.matcher,
            MatchSpec {
                src: Some(Cidr::host(ip("192.168.0.2"))),
                out_iface: Some("eth1".into()),
                ..Default::default()
            }
        );
        assert_eq!(cmd.rule.target, Target::Masquerade);
        assert_eq!(
            render_rule_command(&cmd),
            "iptables -t nat -A POSTROUTING -s 192.168.0.2/32 -o eth1 -j MASQUERADE"
        );
    }

    #[test]
    fn chain_table_mismatch() {
        assert!(matches!(
            parse_rule_command("iptables -t filter -A PREROUTING -j ACCEPT"),
            Err(RuleError::BadChain { .. })
        ));
        assert!(matches!(
            parse_rule_command("iptables -A POSTROUTING -j ACCEPT"),
            Err(RuleError::BadChain { .. })
        ));
        assert!(matches!(
            parse_rule_command("iptables -t nat -A BOGUS -j ACCEPT"),
            Err(RuleError::BadChain { .. })
        ));
    }

    #[test]
    fn dnat_icmp() {
        let cmd =
            parse_rule_command("iptables -t nat -A PREROUTING -i wan0 -p icmp -j DNAT --to-destination 192.168.10.10")
                .unwrap();
        assert_eq!(cmd.rule.matcher.protocol, Some(IpProtocol::Icmp));
        assert_eq!(cmd.rule.matcher.in_iface.as_deref(), Some("wan0"));
        assert_eq!(
            cmd.rule.target,
            Target::Dnat {
                to: ip("192.168.10.10"),
                port: None
            }
        );
    }

    #[test]
    fn empty_accept_render() {
        let cmd = RuleCommand {
            table: Table::Filter,
            action: Action::Append,
            chain: ChainId::Forward,
            rule: Rule {
                matcher: MatchSpec::default(),
                target: Target::Accept,
            },
        };
        assert_eq!(render_rule_command(&cmd), "iptables -t filter -A FORWARD -j ACCEPT");
        assert_eq!(parse_rule_command("iptables -A FORWARD -j ACCEPT").unwrap(), cmd);
    }

    #[test]
    fn insert_forms() {
        let a = parse_rule_command("iptables -I 3 INPUT -j DROP").unwrap();
        let b = parse_rule_command("iptables -I INPUT 3 -j DROP").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.action, Action::Insert(3));
        assert_eq!(a.to_string(), "iptables -t filter -I 3 INPUT -j DROP");
        let c = parse_rule_command("iptables -I INPUT -j DROP").unwrap();
        assert_eq!(c.action, Action::Insert(1));
    }

    #[test]
    fn errors() {
        assert_eq!(
            parse_rule_command("iptables -A INPUT -x 1 -j ACCEPT"),
            Err(RuleError::UnknownFlag("-x".into()))
        );
        assert_eq!(
            parse_rule_command("iptables -A INPUT -j REJECT"),
            Err(RuleError::UnknownTarget("REJECT".into()))
        );
        assert_eq!(
            parse_rule_command("iptables -A INPUT -s 10.0.0.1"),
            Err(RuleError::MissingTarget)
        );
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -s 10.0.0.300 -j ACCEPT"),
            Err(RuleError::BadValue { .. })
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -p tcp --dport 70000 -j ACCEPT"),
            Err(RuleError::BadValue { .. })
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -i ETH0 -j ACCEPT"),
            Err(RuleError::BadValue { .. })
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT --dport 80 -j ACCEPT"),
            Err(RuleError::Syntax(_))
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -p udp --icmp-type 8 -j ACCEPT"),
            Err(RuleError::Syntax(_))
        ));
        assert!(matches!(
            parse_rule_command("iptables -t nat -A PREROUTING -j DNAT"),
            Err(RuleError::Syntax(_))
        ));
        assert!(matches!(
            parse_rule_command("ip6tables -A INPUT -j ACCEPT"),
            Err(RuleError::Syntax(_))
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -A INPUT -j ACCEPT"),
            Err(RuleError::Syntax(_))
        ));
        assert!(matches!(
            parse_rule_command("iptables -A INPUT -j"),
            Err(RuleError::BadValue { .. })
        ));
    }

    #[test]
    fn snat_with_port_round_trip() {
        let text = "iptables -t nat -A POSTROUTING -s 10.0.0.0/8 -p udp -j SNAT --to-source 1.2.3.4:5000";
        let cmd = parse_rule_command(text).unwrap();
        assert_eq!(cmd.to_string(), text);
    }

    #[test]
    fn matching() {
        let rule = parse_rule_command(MASQ_RULE).unwrap().rule;
        let p = Packet::icmp_echo(ip("192.168.0.2"), ip("8.8.8.8"), EchoKind::Request, 1, 1, vec![]);
        let ctx = |o| PacketContext {
            packet: &p,
            in_iface: Some("eth0"),
            out_iface: o,
        };
        assert!(rule_matches(&rule, &ctx(Some("eth1"))));
        assert!(!rule_matches(&rule, &ctx(Some("eth0"))));
        assert!(!rule_matches(&rule, &ctx(None)));

        let any = Rule {
            matcher: MatchSpec::default(),
            target: Target::Drop,
        };
        assert!(rule_matches(&any, &ctx(None)));
    }

    #[test]
    fn icmp_never_matches_ports() {
        let p = Packet::icmp_echo(ip("10.0.0.1"), ip("10.0.0.2"), EchoKind::Request, 80, 1, vec![]);
        let rule = Rule {
            matcher: MatchSpec {
                dport: Some(80),
                ..Default::default()
            },
            target: Target::Accept,
        };
        let ctx = PacketContext {
            packet: &p,
            in_iface: None,
            out_iface: None,
        };
        assert!(!rule.matches(&ctx));
    }

    #[test]
    fn icmp_type_matching() {
        let req = Packet::icmp_echo(ip("10.0.0.1"), ip("10.0.0.2"), EchoKind::Request, 1, 1, vec![]);
        let rep = Packet::icmp_echo(ip("10.0.0.2"), ip("10.0.0.1"), EchoKind::Reply, 1, 1, vec![]);
        let rule = parse_rule_command("iptables -A INPUT -p icmp --icmp-type 8 -j DROP")
            .unwrap()
            .rule;
        let ctx = |p| PacketContext {
            packet: p,
            in_iface: None,
            out_iface: None,
        };
        assert!(rule.matches(&ctx(&req)));
        assert!(!rule.matches(&ctx(&rep)));
    }
}
