//! Line-based scenario scripts.
//!
//! ```text
//! # settings
//! topology type1            # type1 | type2 | type2-nat-broken
//! gateway 10.0.0.1
//! clients 10.0.0.10-10.0.0.34 10.0.0.50
//! policy whitelist          # default: whitelist for type1, blacklist otherwise
//! group internet
//! domain www.approved.org .gov
//! ttl 300
//! max-duration 86400
//! start 1000000
//! user alice s3cret internet,staff
//!
//! # actions, run in order
//! 10.0.0.10 request http://www.example.com/
//! 10.0.0.10 login alice s3cret 3600
//! 10.0.0.10 logout
//! 10.0.0.10 status
//! advance 3601
//! parallel
//! 10.0.0.11 request http://a.example/
//! 10.0.0.12 request http://b.example/
//! end
//! ```

use std::net::Ipv4Addr;
use std::path::Path;

use ipgate::{AclPolicy, PolicyMode, Timestamp};
use thiserror::Error;

use crate::topology::{Topology, TopologyKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {ip} is not a client of this topology")]
    UnknownClient { line: usize, ip: Ipv4Addr },
    #[error("cannot read script: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSpec {
    pub name: String,
    pub password: String,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Request { uri: String },
    Login { user: String, password: String, duration: u64 },
    Logout,
    Status,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAction {
    pub client: Ipv4Addr,
    pub action: Action,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Do(ClientAction),
    Advance(u64),
    Parallel(Vec<ClientAction>),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub policy: AclPolicy,
    pub users: Vec<UserSpec>,
    pub max_duration: u64,
    pub start_time: Timestamp,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io(format!("{}: {e}", path.display())))?;
        parse_script(&text)
    }

    /// Same script, different placement.
    pub fn with_topology_kind(&self, kind: TopologyKind) -> Self {
        Scenario {
            topology: self.topology.with_kind(kind),
            ..self.clone()
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = &ClientAction> {
        self.steps.iter().flat_map(|s| match s {
            Step::Do(a) => std::slice::from_ref(a),
            Step::Parallel(v) => v.as_slice(),
            Step::Advance(_) => &[],
        })
    }
}

fn syntax(line: usize, message: impl Into<String>) -> ScriptError {
    ScriptError::Syntax {
        line,
        message: message.into(),
    }
}

fn ip(line: usize, s: &str) -> Result<Ipv4Addr, ScriptError> {
    s.parse().map_err(|_| syntax(line, format!("bad IPv4 address {s:?}")))
}

fn number(line: usize, s: Option<&str>, what: &str) -> Result<u64, ScriptError> {
    let s = s.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    s.parse().map_err(|_| syntax(line, format!("bad {what} {s:?}")))
}

fn client_range(line: usize, spec: &str) -> Result<Vec<Ipv4Addr>, ScriptError> {
    match spec.split_once('-') {
        None => Ok(vec![ip(line, spec)?]),
        Some((a, b)) => {
            let (a, b) = (u32::from(ip(line, a)?), u32::from(ip(line, b)?));
            if b < a || b - a > 65_535 {
                return Err(syntax(line, format!("bad client range {spec:?}")));
            }
            Ok((a..=b).map(Ipv4Addr::from).collect())
        }
    }
}

pub fn parse_script(text: &str) -> Result<Scenario, ScriptError> {
    let mut kind = TopologyKind::Type1;
    let mut gateway = Ipv4Addr::new(10, 0, 0, 1);
    let mut clients = Vec::new();
    let mut mode = None;
    let mut group = "internet".to_string();
    let mut domains: Vec<String> = Vec::new();
    let mut ttl = 300;
    let mut max_duration = ipgate::auth::DEFAULT_MAX_DURATION;
    let mut start_time = 1_000_000;
    let mut users = Vec::new();
    let mut steps = Vec::new();
    let mut parallel: Option<(usize, Vec<ClientAction>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let first = words.next().unwrap_or_default();
        let rest: Vec<&str> = words.collect();
        if let Ok(client) = first.parse::<Ipv4Addr>() {
            let action = parse_action(line, &rest)?;
            let step = ClientAction { client, action, line };
            match &mut parallel {
                Some((_, group)) => group.push(step),
                None => steps.push(Step::Do(step)),
            }
            continue;
        }
        if parallel.is_some() && first != "end" {
            return Err(syntax(line, format!("only client actions are allowed inside parallel, got {first:?}")));
        }
        let one = |what: &str| -> Result<&str, ScriptError> {
            match rest.as_slice() {
                [v] => Ok(*v),
                _ => Err(syntax(line, format!("{first} takes exactly one {what}"))),
            }
        };
        match first {
            "topology" => kind = one("kind")?.parse().map_err(|e: String| syntax(line, e))?,
            "gateway" => gateway = ip(line, one("address")?)?,
            "clients" | "client" => {
                if rest.is_empty() {
                    return Err(syntax(line, "clients needs at least one address or range"));
                }
                for spec in &rest {
                    clients.extend(client_range(line, spec)?);
                }
            }
            "policy" => mode = Some(one("mode")?.parse::<PolicyMode>().map_err(|e| syntax(line, e.to_string()))?),
            "group" => group = one("name")?.to_string(),
            "domain" | "domains" => domains.extend(rest.iter().map(|d| d.to_string())),
            "ttl" => ttl = number(line, Some(one("value")?), "ttl")?,
            "max-duration" => max_duration = number(line, Some(one("value")?), "max-duration")?,
            "start" => start_time = number(line, Some(one("value")?), "start time")?,
            "user" => match rest.as_slice() {
                [name, password, groups] => users.push(UserSpec {
                    name: name.to_string(),
                    password: password.to_string(),
                    groups: groups.split(',').filter(|g| !g.is_empty()).map(str::to_string).collect(),
                }),
                _ => return Err(syntax(line, "usage: user <name> <password> <group[,group...]>")),
            },
            "advance" => steps.push(Step::Advance(number(line, Some(one("seconds")?), "seconds")?)),
            "parallel" => parallel = Some((line, Vec::new())),
            "end" => match parallel.take() {
                Some((_, group)) => steps.push(Step::Parallel(group)),
                None => return Err(syntax(line, "end without parallel")),
            },
            other => return Err(syntax(line, format!("unknown directive {other:?}"))),
        }
    }
    if let Some((line, _)) = parallel {
        return Err(syntax(line, "parallel block is never closed"));
    }

    let topology = Topology::new(kind, clients, gateway).map_err(|e| syntax(0, e.to_string()))?;
    let mode = mode.unwrap_or(match kind {
        TopologyKind::Type1 => PolicyMode::Whitelist,
        _ => PolicyMode::Blacklist,
    });
    let policy = AclPolicy::new(mode, &domains, &group)
        .map_err(|e| syntax(0, e.to_string()))?
        .with_ttl(ttl);
    let scenario = Scenario {
        topology,
        policy,
        users,
        max_duration,
        start_time,
        steps,
    };
    if let Some(a) = scenario.actions().find(|a| !scenario.topology.has_client(a.client)) {
        return Err(ScriptError::UnknownClient {
            line: a.line,
            ip: a.client,
        });
    }
    Ok(scenario)
}

fn parse_action(line: usize, words: &[&str]) -> Result<Action, ScriptError> {
    match words {
        ["request", uri] => Ok(Action::Request { uri: uri.to_string() }),
        ["login", user, password, duration] => Ok(Action::Login {
            user: user.to_string(),
            password: password.to_string(),
            duration: number(line, Some(duration), "duration")?,
        }),
        ["logout"] => Ok(Action::Logout),
        ["status"] => Ok(Action::Status),
        _ => Err(syntax(
            line,
            "expected: request <uri> | login <user> <password> <seconds> | logout | status",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = "
        topology type2
        clients 10.0.0.10-10.0.0.12
        domain facebook.com
        user alice pw internet
        10.0.0.10 request http://facebook.com/
        10.0.0.10 login alice pw 60   # one minute
        advance 61
        parallel
        10.0.0.11 request http://a/
        10.0.0.12 request http://b/
        end
    ";

    #[test]
    fn parses_settings_and_steps() {
        let s = parse_script(SCRIPT).unwrap();
        assert_eq!(s.topology.kind, TopologyKind::Type2);
        assert_eq!(s.topology.client_ips().len(), 3);
        assert_eq!(s.policy.mode, PolicyMode::Blacklist);
        assert_eq!(s.policy.auth_cache_ttl, 300);
        assert_eq!(s.steps.len(), 4);
        assert_eq!(s.steps[2], Step::Advance(61));
        assert!(matches!(&s.steps[3], Step::Parallel(v) if v.len() == 2));
        assert_eq!(s.actions().count(), 4);
    }

    #[test]
    fn unknown_client_fails_before_anything_runs() {
        let text = SCRIPT.replace("10.0.0.12 request", "10.9.9.9 request");
        assert_eq!(
            parse_script(&text).unwrap_err(),
            ScriptError::UnknownClient {
                line: 11,
                ip: Ipv4Addr::new(10, 9, 9, 9)
            }
        );
    }

    #[test]
    fn reports_line_numbers() {
        assert!(matches!(
            parse_script("clients 10.0.0.2\n10.0.0.2 fly\n"),
            Err(ScriptError::Syntax { line: 2, .. })
        ));
        assert!(matches!(parse_script("parallel\n"), Err(ScriptError::Syntax { line: 1, .. })));
        assert!(matches!(parse_script("bogus 1\n"), Err(ScriptError::Syntax { line: 1, .. })));
    }
}
