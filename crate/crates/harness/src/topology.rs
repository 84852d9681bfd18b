use std::collections::HashSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

/// Where the proxy sits relative to the clients.
///
/// `Type1` runs on the gateway itself; `Type2` on a separate host behind
/// the gateway with client addresses preserved. `Type2NatBroken` is the
/// misconfigured variant where the gateway source-NATs everything it
/// forwards, so the proxy only ever sees the gateway's address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopologyKind {
    Type1,
    Type2,
    Type2NatBroken,
}

impl FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "type1" => Ok(TopologyKind::Type1),
            "type2" => Ok(TopologyKind::Type2),
            "type2-nat-broken" | "type2natbroken" => Ok(TopologyKind::Type2NatBroken),
            other => Err(format!("unknown topology {other:?} (type1, type2, type2-nat-broken)")),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Type1 => "type1",
            TopologyKind::Type2 => "type2",
            TopologyKind::Type2NatBroken => "type2-nat-broken",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("client {0} listed twice")]
    DuplicateClient(Ipv4Addr),
    #[error("client {0} uses the gateway address")]
    ClientIsGateway(Ipv4Addr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub kind: TopologyKind,
    client_ips: Vec<Ipv4Addr>,
    pub gateway_ip: Ipv4Addr,
}

impl Topology {
    pub fn new(kind: TopologyKind, client_ips: Vec<Ipv4Addr>, gateway_ip: Ipv4Addr) -> Result<Self, TopologyError> {
        let mut seen = HashSet::new();
        for ip in &client_ips {
            if *ip == gateway_ip {
                return Err(TopologyError::ClientIsGateway(*ip));
            }
            if !seen.insert(*ip) {
                return Err(TopologyError::DuplicateClient(*ip));
            }
        }
        Ok(Topology {
            kind,
            client_ips,
            gateway_ip,
        })
    }

    /// `count` clients numbered upward from `first`.
    pub fn with_range(
        kind: TopologyKind,
        first: Ipv4Addr,
        count: u32,
        gateway_ip: Ipv4Addr,
    ) -> Result<Self, TopologyError> {
        let base = u32::from(first);
        Self::new(kind, (0..count).map(|i| Ipv4Addr::from(base + i)).collect(), gateway_ip)
    }

    pub fn client_ips(&self) -> &[Ipv4Addr] {
        &self.client_ips
    }

    pub fn has_client(&self, ip: Ipv4Addr) -> bool {
        self.client_ips.contains(&ip)
    }

    /// The source address the proxy sees for a connection from `client`.
    pub fn source_ip(&self, client: Ipv4Addr) -> Ipv4Addr {
        match self.kind {
            TopologyKind::Type1 | TopologyKind::Type2 => client,
            TopologyKind::Type2NatBroken => self.gateway_ip,
        }
    }

    pub fn with_kind(&self, kind: TopologyKind) -> Self {
        Topology { kind, ..self.clone() }
    }
}
