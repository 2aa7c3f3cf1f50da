//! Per-node rule tables and first-match chain traversal.

use std::fmt;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::rule::{Action, ChainId, PacketContext, Rule, RuleCommand, Table, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Accept,
    Drop,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Accept => "ACCEPT",
            Policy::Drop => "DROP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NatKind {
    Snat,
    Dnat,
    Masquerade,
}

impl NatKind {
    /// Name as used in trace verdicts.
    pub fn target_name(self) -> &'static str {
        match self {
            NatKind::Snat => "SNAT",
            NatKind::Dnat => "DNAT",
            NatKind::Masquerade => "MASQUERADE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Drop,
    /// `by_rule` is the 0-based index of the rule that fired.
    Translate {
        kind: NatKind,
        to: Option<Ipv4Addr>,
        id: Option<u16>,
        by_rule: usize,
    },
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept => f.write_str("ACCEPT"),
            Verdict::Drop => f.write_str("DROP"),
            Verdict::Translate { kind, .. } => f.write_str(kind.target_name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("target {target} is not allowed in {table}/{chain}")]
    IllegalTarget {
        table: Table,
        chain: ChainId,
        target: &'static str,
    },
    #[error("no matching rule to delete")]
    NotFound,
    #[error("bad rule position {0}")]
    BadPosition(u32),
    #[error("chain {chain} does not exist in table {table}")]
    NoSuchChain { table: Table, chain: ChainId },
    #[error("nat chains cannot have a DROP policy")]
    NatPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub id: ChainId,
    pub rules: Vec<Rule>,
    pub policy: Policy,
}

impl Chain {
    pub fn new(id: ChainId) -> Self {
        Chain {
            id,
            rules: Vec::new(),
            policy: Policy::Accept,
        }
    }

    /// First rule whose match holds decides; RETURN or no match falls
    /// through to the policy.
    pub fn traverse(&self, ctx: &PacketContext<'_>) -> Verdict {
        let hit = self.rules.iter().enumerate().find(|(_, r)| r.matches(ctx));
        let Some((index, rule)) = hit else {
            return self.policy_verdict();
        };
        match &rule.target {
            Target::Accept => Verdict::Accept,
            Target::Drop => Verdict::Drop,
            Target::Return => self.policy_verdict(),
            Target::Masquerade => Verdict::Translate {
                kind: NatKind::Masquerade,
                to: None,
                id: None,
                by_rule: index,
            },
            Target::Snat { to, port_base } => Verdict::Translate {
                kind: NatKind::Snat,
                to: Some(*to),
                id: *port_base,
                by_rule: index,
            },
            Target::Dnat { to, port } => Verdict::Translate {
                kind: NatKind::Dnat,
                to: Some(*to),
                id: *port,
                by_rule: index,
            },
        }
    }

    fn policy_verdict(&self) -> Verdict {
        match self.policy {
            Policy::Accept => Verdict::Accept,
            Policy::Drop => Verdict::Drop,
        }
    }
}

/// Where a target may legally be placed.
fn target_allowed(table: Table, chain: ChainId, target: &Target) -> bool {
    match target {
        Target::Accept | Target::Drop | Target::Return => true,
        Target::Masquerade | Target::Snat { .. } => table == Table::Nat && chain == ChainId::Postrouting,
        Target::Dnat { .. } => table == Table::Nat && matches!(chain, ChainId::Prerouting | ChainId::Output),
    }
}

/// The filter and nat tables of one node, all built-in chains present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSet {
    filter: [Chain; 3],
    nat: [Chain; 3],
}

impl Default for TableSet {
    fn default() -> Self {
        TableSet::new()
    }
}

impl TableSet {
    pub fn new() -> Self {
        let build = |t: Table| {
            let c = t.chains();
            [Chain::new(c[0]), Chain::new(c[1]), Chain::new(c[2])]
        };
        TableSet {
            filter: build(Table::Filter),
            nat: build(Table::Nat),
        }
    }

    fn slot(table: Table, chain: ChainId) -> Option<usize> {
        table.chains().iter().position(|c| *c == chain)
    }

    pub fn chain(&self, table: Table, chain: ChainId) -> Option<&Chain> {
        let i = TableSet::slot(table, chain)?;
        Some(match table {
            Table::Filter => &self.filter[i],
            Table::Nat => &self.nat[i],
        })
    }

    fn chain_mut(&mut self, table: Table, chain: ChainId) -> Option<&mut Chain> {
        let i = TableSet::slot(table, chain)?;
        Some(match table {
            Table::Filter => &mut self.filter[i],
            Table::Nat => &mut self.nat[i],
        })
    }

    pub fn table(&self, table: Table) -> &[Chain] {
        match table {
            Table::Filter => &self.filter,
            Table::Nat => &self.nat,
        }
    }

    /// Applies one command. On error the tables are left unchanged.
    pub fn apply_command(&mut self, cmd: &RuleCommand) -> Result<(), ChainError> {
        if !target_allowed(cmd.table, cmd.chain, &cmd.rule.target) {
            return Err(ChainError::IllegalTarget {
                table: cmd.table,
                chain: cmd.chain,
                target: cmd.rule.target.name(),
            });
        }
        let chain = self.chain_mut(cmd.table, cmd.chain).ok_or(ChainError::NoSuchChain {
            table: cmd.table,
            chain: cmd.chain,
        })?;
        match cmd.action {
            Action::Append => chain.rules.push(cmd.rule.clone()),
            Action::Insert(0) => return Err(ChainError::BadPosition(0)),
            Action::Insert(pos) => {
                let at = (pos as usize - 1).min(chain.rules.len());
                chain.rules.insert(at, cmd.rule.clone());
            }
            Action::Delete => {
                // equality of the canonical rendered form
                let want = cmd.rule.to_string();
                let at = chain
                    .rules
                    .iter()
                    .position(|r| r.to_string() == want)
                    .ok_or(ChainError::NotFound)?;
                chain.rules.remove(at);
            }
        }
        Ok(())
    }

    pub fn set_policy(&mut self, table: Table, chain: ChainId, policy: Policy) -> Result<(), ChainError> {
        if table == Table::Nat && policy == Policy::Drop {
            return Err(ChainError::NatPolicy);
        }
        let c = self
            .chain_mut(table, chain)
            .ok_or(ChainError::NoSuchChain { table, chain })?;
        c.policy = policy;
        Ok(())
    }

    pub fn traverse(&self, table: Table, chain: ChainId, ctx: &PacketContext<'_>) -> Verdict {
        match self.chain(table, chain) {
            Some(c) => c.traverse(ctx),
            None => Verdict::Accept,
        }
    }

    /// Listing of one table: a header per chain followed by its rules in
    /// canonical form, indented two spaces.
    pub fn list_rules(&self, table: Table) -> String {
        let mut out = String::new();
        for chain in self.table(table) {
            let _ = writeln!(out, "Chain {} (policy {})", chain.id, chain.policy.name());
            for rule in &chain.rules {
                let cmd = RuleCommand {
                    table,
                    action: Action::Append,
                    chain: chain.id,
                    rule: rule.clone(),
                };
                let _ = writeln!(out, "  {cmd}");
            }
        }
        out
    }
}

pub fn apply_command(tables: &mut TableSet, cmd: &RuleCommand) -> Result<(), ChainError> {
    tables.apply_command(cmd)
}

pub fn traverse(chain: &Chain, ctx: &PacketContext<'_>) -> Verdict {
    chain.traverse(ctx)
}

pub fn list_rules(tables: &TableSet, table: Table) -> String {
    tables.list_rules(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{EchoKind, Packet};
    use crate::rule::{parse_rule_command, MatchSpec};

    const MASQ_RULE: &str = "iptables -t nat -A POSTROUTING -s 192.168.0.2 -o eth1 -j MASQUERADE";

    fn rule(target: Target) -> Rule {
        Rule {
            matcher: MatchSpec::default(),
            target,
        }
    }

    fn pkt() -> Packet {
        Packet::icmp_echo(
            "192.168.0.2".parse().unwrap(),
            "8.8.8.8".parse().unwrap(),
            EchoKind::Request,
            1,
            1,
            vec![],
        )
    }

    #[test]
    fn append_then_delete() {
        let mut t = TableSet::new();
        let before = t.clone();
        let mut cmd = parse_rule_command(MASQ_RULE).unwrap();
        t.apply_command(&cmd).unwrap();
        assert_eq!(t.chain(Table::Nat, ChainId::Postrouting).unwrap().rules.len(), 1);
        cmd.action = Action::Delete;
        t.apply_command(&cmd).unwrap();
        assert_eq!(t, before);
        assert_eq!(t.apply_command(&cmd), Err(ChainError::NotFound));
    }

    #[test]
    fn nat_target_in_filter_rejected() {
        let mut t = TableSet::new();
        let cmd = RuleCommand {
            table: Table::Filter,
            action: Action::Append,
            chain: ChainId::Forward,
            rule: rule(Target::Snat {
                to: "1.2.3.4".parse().unwrap(),
                port_base: None,
            }),
        };
        assert!(matches!(t.apply_command(&cmd), Err(ChainError::IllegalTarget { .. })));
        let dnat_post = parse_rule_command("iptables -t nat -A POSTROUTING -j DNAT --to-destination 1.1.1.1").unwrap();
        assert!(matches!(
            t.apply_command(&dnat_post),
            Err(ChainError::IllegalTarget { .. })
        ));
    }

    #[test]
    fn insert_positions() {
        let mut t = TableSet::new();
        for text in [
            "iptables -A INPUT -p tcp -j ACCEPT",
            "iptables -I 1 INPUT -p udp -j ACCEPT",
            "iptables -I 99 INPUT -p icmp -j ACCEPT",
        ] {
            t.apply_command(&parse_rule_command(text).unwrap()).unwrap();
        }
        let protos: Vec<_> = t
            .chain(Table::Filter, ChainId::Input)
            .unwrap()
            .rules
            .iter()
            .map(|r| r.matcher.protocol.unwrap().name())
            .collect();
        assert_eq!(protos, ["udp", "tcp", "icmp"]);
        let zero = parse_rule_command("iptables -I 0 INPUT -j ACCEPT").unwrap();
        assert_eq!(t.apply_command(&zero), Err(ChainError::BadPosition(0)));
    }

    #[test]
    fn first_match_wins() {
        let p = pkt();
        let ctx = PacketContext {
            packet: &p,
            in_iface: None,
            out_iface: None,
        };
        let mut c = Chain::new(ChainId::Forward);
        assert_eq!(c.traverse(&ctx), Verdict::Accept);
        c.rules = vec![rule(Target::Drop), rule(Target::Accept)];
        assert_eq!(c.traverse(&ctx), Verdict::Drop);
        c.rules = vec![rule(Target::Return), rule(Target::Drop)];
        c.policy = Policy::Accept;
        assert_eq!(c.traverse(&ctx), Verdict::Accept);
    }

    #[test]
    fn masquerade_verdict_has_no_address() {
        let p = pkt();
        let ctx = PacketContext {
            packet: &p,
            in_iface: Some("eth0"),
            out_iface: Some("eth1"),
        };
        let mut t = TableSet::new();
        t.apply_command(&parse_rule_command(MASQ_RULE).unwrap()).unwrap();
        assert_eq!(
            t.traverse(Table::Nat, ChainId::Postrouting, &ctx),
            Verdict::Translate {
                kind: NatKind::Masquerade,
                to: None,
                id: None,
                by_rule: 0
            }
        );
    }

    #[test]
    fn listing() {
        let mut t = TableSet::new();
        let empty = t.list_rules(Table::Nat);
        assert_eq!(
            empty,
            "Chain PREROUTING (policy ACCEPT)\nChain OUTPUT (policy ACCEPT)\nChain POSTROUTING (policy ACCEPT)\n"
        );
        t.apply_command(&parse_rule_command(MASQ_RULE).unwrap()).unwrap();
        let listed = t.list_rules(Table::Nat);
        assert_eq!(
            listed,
            "Chain PREROUTING (policy ACCEPT)\nChain OUTPUT (policy ACCEPT)\nChain POSTROUTING (policy ACCEPT)\n  iptables -t nat -A POSTROUTING -s 192.168.0.2/32 -o eth1 -j MASQUERADE\n"
        );
        assert_eq!(listed, t.list_rules(Table::Nat));
        t.set_policy(Table::Filter, ChainId::Forward, Policy::Drop).unwrap();
        assert!(t.list_rules(Table::Filter).contains("Chain FORWARD (policy DROP)"));
        assert_eq!(
            t.set_policy(Table::Nat, ChainId::Output, Policy::Drop),
            Err(ChainError::NatPolicy)
        );
    }
}
