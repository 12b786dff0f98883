use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::app::AppSpec;
use crate::client::ClientConfig;
use crate::engine::ReplicaConfig;
use crate::ids::{ClientId, Endpoint, ReplicaId};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported scenario version {0}, expected {SCENARIO_VERSION}")]
    Version(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A complete, self-contained description of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub f: u32,
    /// Seed used when the caller does not supply one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub replica: ReplicaConfig,
    #[serde(default)]
    pub client: ClientConfig,
    pub app: AppSpec,
    pub workload: Workload,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Hard stop in virtual time.
    #[serde(default = "default_max_time")]
    pub max_time_us: u64,
}

fn default_max_time() -> u64 {
    600_000_000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum DelayModel {
    Fixed { fixed_us: u64 },
    Uniform { min_us: u64, max_us: u64 },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Fixed { fixed_us: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub delay: DelayModel,
    /// Independent drop probability per transmission.
    pub loss: f64,
    pub links: Vec<LinkOverride>,
}

/// Per-link settings; `None` endpoints match anything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    #[serde(default)]
    pub from: Option<EndpointName>,
    #[serde(default)]
    pub to: Option<EndpointName>,
    #[serde(default)]
    pub delay: Option<DelayModel>,
    #[serde(default)]
    pub loss: Option<f64>,
}

impl NetworkSpec {
    /// The last matching override wins.
    pub fn link(&self, from: Endpoint, to: Endpoint) -> (DelayModel, f64) {
        let mut delay = self.delay;
        let mut loss = self.loss;
        for l in &self.links {
            let hit = l.from.is_none_or(|e| e.0 == from) && l.to.is_none_or(|e| e.0 == to);
            if hit {
                delay = l.delay.unwrap_or(delay);
                loss = l.loss.unwrap_or(loss);
            }
        }
        (delay, loss)
    }
}

/// An endpoint written as `r<id>` or `c<id>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EndpointName(pub Endpoint);

impl FromStr for EndpointName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("endpoint {s:?} is not r<id> or c<id>");
        let (kind, num) = s.split_at(1.min(s.len()));
        let id: u64 = num.parse().map_err(|_| bad())?;
        match kind {
            "r" => Ok(EndpointName(Endpoint::Replica(ReplicaId(u32::try_from(id).map_err(|_| bad())?)))),
            "c" => Ok(EndpointName(Endpoint::Client(ClientId(id)))),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EndpointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Serialize for EndpointName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EndpointName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// CPU time charged to a replica for each step. Clients are free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub recv_fixed_us: u64,
    pub recv_per_kb_us: u64,
    /// Charged once per destination.
    pub send_fixed_us: u64,
    pub send_per_kb_us: u64,
    pub sign_us: u64,
    pub verify_us: u64,
    pub timer_us: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { recv_fixed_us: 20, recv_per_kb_us: 10, send_fixed_us: 10, send_per_kb_us: 10, sign_us: 50, verify_us: 50, timer_us: 1 }
    }
}

impl CostModel {
    pub fn free() -> Self {
        CostModel { recv_fixed_us: 0, recv_per_kb_us: 0, send_fixed_us: 0, send_per_kb_us: 0, sign_us: 0, verify_us: 0, timer_us: 0 }
    }

    pub fn recv(&self, bytes: usize) -> u64 {
        self.recv_fixed_us + self.recv_per_kb_us * bytes as u64 / 1024
    }

    pub fn send(&self, bytes: usize) -> u64 {
        self.send_fixed_us + self.send_per_kb_us * bytes as u64 / 1024
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub clients: u32,
    pub requests_per_client: u32,
    #[serde(default = "default_request_size")]
    pub request_size: usize,
    /// Pause between a reply and the client's next request.
    #[serde(default)]
    pub think_us: u64,
}

fn default_request_size() -> usize {
    1024
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Behavior {
    WrongVpreValue,
    WrongNdType,
    EquivocatePrePrepare,
    ForgePpuEntry,
    OmitPpuDecision,
    WrongPostndValues,
    WrongReplyDigest,
    DeadlockOrder,
    CrashOrder,
    CrashReplica,
    CorruptReply,
}

impl Behavior {
    pub const ALL: [Behavior; 11] = [
        Behavior::WrongVpreValue,
        Behavior::WrongNdType,
        Behavior::EquivocatePrePrepare,
        Behavior::ForgePpuEntry,
        Behavior::OmitPpuDecision,
        Behavior::WrongPostndValues,
        Behavior::WrongReplyDigest,
        Behavior::DeadlockOrder,
        Behavior::CrashOrder,
        Behavior::CrashReplica,
        Behavior::CorruptReply,
    ];

    pub fn name(self) -> String {
        serde_json::to_value(self).unwrap().as_str().unwrap().to_string()
    }
}

/// Which seqs a behavior applies to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    Always,
    AtSeq(u64),
    FromSeq(u64),
    /// Per seq, decided by a hash of the run seed so retransmissions agree.
    Probability(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub replica: u32,
    pub behavior: Behavior,
    #[serde(default = "default_trigger")]
    pub trigger: Trigger,
}

fn default_trigger() -> Trigger {
    Trigger::Always
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn n(&self) -> u32 {
        3 * self.f + 1
    }

    /// Replicas carrying a fault script.
    pub fn faulty(&self) -> BTreeSet<ReplicaId> {
        self.faults.iter().map(|f| ReplicaId(f.replica)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        if self.f > 16 {
            return bad(format!("f = {} is larger than supported", self.f));
        }
        if self.workload.clients == 0 || self.workload.requests_per_client == 0 {
            return bad("workload needs at least one client and one request".into());
        }
        if self.workload.request_size == 0 || self.app.nd_size == 0 {
            return bad("sizes must be positive".into());
        }
        let faulty = self.faulty();
        if faulty.len() > self.f as usize {
            return bad(format!("{} faulty replicas exceed f = {}", faulty.len(), self.f));
        }
        if let Some(r) = faulty.iter().find(|r| r.0 >= self.n()) {
            return bad(format!("fault script for {r} outside n = {}", self.n()));
        }
        for fault in &self.faults {
            if let Trigger::Probability(p) = fault.trigger {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("trigger probability {p} outside [0, 1]"));
                }
            }
        }
        let check_delay = |d: &DelayModel| match d {
            DelayModel::Uniform { min_us, max_us } if min_us > max_us => bad(format!("delay range {min_us}..{max_us} is empty")),
            _ => Ok(()),
        };
        let check_loss = |p: f64| if (0.0..=1.0).contains(&p) { Ok(()) } else { bad(format!("loss {p} outside [0, 1]")) };
        check_delay(&self.network.delay)?;
        check_loss(self.network.loss)?;
        for l in &self.network.links {
            if let Some(d) = &l.delay {
                check_delay(d)?;
            }
            if let Some(p) = l.loss {
                check_loss(p)?;
            }
            for e in [l.from, l.to].into_iter().flatten() {
                match e.0 {
                    Endpoint::Replica(r) if r.0 >= self.n() => return bad(format!("link endpoint {e} outside n")),
                    Endpoint::Client(c) if c.0 >= self.workload.clients as u64 => return bad(format!("link endpoint {e} is not a client")),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
version = 1
name = "sample"
f = 1

[network]
delay = { min_us = 80, max_us = 120 }
loss = 0.01
links = [{ from = "r0", to = "c0", delay = { fixed_us = 300 } }]

[app]
kind = "npost_counter"
nd_size = 64

[workload]
clients = 2
requests_per_client = 10

[[faults]]
replica = 2
behavior = "WRONG_REPLY_DIGEST"
trigger = { at_seq = 4 }
"#;

    #[test]
    fn parses_and_round_trips() {
        let s = Scenario::from_toml(SAMPLE).unwrap();
        assert_eq!(s.faults[0].behavior, Behavior::WrongReplyDigest);
        assert_eq!(s.faults[0].trigger, Trigger::AtSeq(4));
        let (d, p) = s.network.link(Endpoint::Replica(ReplicaId(0)), Endpoint::Client(ClientId(0)));
        assert_eq!(d, DelayModel::Fixed { fixed_us: 300 });
        assert_eq!(p, 0.01);
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn rejects_invalid() {
        let too_many = format!("{SAMPLE}\n[[faults]]\nreplica = 1\nbehavior = \"CRASH_REPLICA\"\n");
        assert!(matches!(Scenario::from_toml(&too_many), Err(ScenarioError::Invalid(_))));
        let version = SAMPLE.replace("version = 1", "version = 2");
        assert!(matches!(Scenario::from_toml(&version), Err(ScenarioError::Version(2))));
        let unknown = SAMPLE.replace("loss = 0.01", "los = 0.01");
        assert!(matches!(Scenario::from_toml(&unknown), Err(ScenarioError::Parse(_))));
        let outside = SAMPLE.replace("replica = 2", "replica = 4");
        assert!(Scenario::from_toml(&outside).is_err());
    }

    #[test]
    fn behavior_names() {
        assert_eq!(Behavior::EquivocatePrePrepare.name(), "EQUIVOCATE_PRE_PREPARE");
        assert_eq!(Behavior::ALL.len(), 11);
    }
}
