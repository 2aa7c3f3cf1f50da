//! Longest-prefix-match routing table.

use std::collections::HashMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::addr::Cidr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub prefix: Cidr,
    /// Next hop; `None` for directly connected networks.
    pub via: Option<Ipv4Addr>,
    pub iface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("duplicate route for {0}")]
pub struct DuplicatePrefix(pub Cidr);

/// Routes bucketed by prefix length; lookups probe from /32 down to /0.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    by_len: Vec<HashMap<u32, RouteEntry>>,
}

impl Default for RoutingTable {
    fn default() -> Self {
        RoutingTable {
            by_len: vec![HashMap::new(); 33],
        }
    }
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, route: RouteEntry) -> Result<(), DuplicatePrefix> {
        let bucket = &mut self.by_len[usize::from(route.prefix.prefix_len())];
        let key = u32::from(route.prefix.base());
        if bucket.contains_key(&key) {
            return Err(DuplicatePrefix(route.prefix));
        }
        bucket.insert(key, route);
        Ok(())
    }

    pub fn lookup(&self, dst: Ipv4Addr) -> Option<&RouteEntry> {
        let addr = u32::from(dst);
        (0..=32u8).rev().find_map(|len| {
            let key = addr & Cidr::new(dst, len).netmask();
            self.by_len[usize::from(len)].get(&key)
        })
    }

    pub fn len(&self) -> usize {
        self.by_len.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All routes, longest prefix first, then by address.
    pub fn routes(&self) -> Vec<&RouteEntry> {
        let mut all: Vec<&RouteEntry> = self.by_len.iter().rev().flat_map(|b| b.values()).collect();
        all.sort_by_key(|r| (std::cmp::Reverse(r.prefix.prefix_len()), r.prefix.base()));
        all
    }
}

pub fn lpm_lookup(routes: &RoutingTable, dst: Ipv4Addr) -> Option<&RouteEntry> {
    routes.lookup(dst)
}
