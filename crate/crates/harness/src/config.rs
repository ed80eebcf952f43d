//! Experiment configuration and its flat `key = value` text form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use mph_core::mempool::{DEFAULT_BLOCK_SIZE, DEFAULT_DISSEMINATION_BYTES, DEFAULT_PAYLOAD_BYTES};
use mph_core::net::sim::{DelayModel, FaultPlan, Partition, SimConfig};
use mph_core::types::{SystemConfig, Time, View, MILLIS};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Mph,
    HotStuff,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Mph => "mph",
            Protocol::HotStuff => "hotstuff",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mph" => Ok(Protocol::Mph),
            "hotstuff" | "hs" => Ok(Protocol::HotStuff),
            _ => Err(ConfigError::BadValue("protocol", s.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {0}: expected key = value")]
    Syntax(usize),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {0}: {1:?}")]
    BadValue(&'static str, String),
    #[error("n = {0} is not 3f+1 with f >= 1")]
    BadN(usize),
    #[error("fault plan: {0}")]
    Faults(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub n: usize,
    /// Digests per block.
    pub batch_size: usize,
    pub payload_bytes: usize,
    pub dissemination_bytes: usize,
    pub timeout_ms: u64,
    pub sim: SimConfig,
    /// Client transactions per second of simulated time, all replicas.
    pub arrival_rate: f64,
    /// Run length: stop once every live replica reaches this view.
    pub views: u64,
    /// Hard cap on simulated time.
    pub max_time: Time,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Mph,
            n: 4,
            batch_size: DEFAULT_BLOCK_SIZE,
            payload_bytes: DEFAULT_PAYLOAD_BYTES,
            dissemination_bytes: DEFAULT_DISSEMINATION_BYTES,
            timeout_ms: 500,
            sim: SimConfig {
                delta: 20 * MILLIS,
                gst: 0,
                delay: DelayModel::Uniform {
                    lo: 5 * MILLIS,
                    hi: 15 * MILLIS,
                },
                seed: 1,
                faults: FaultPlan::default(),
            },
            arrival_rate: 20_000.0,
            views: 200,
            max_time: 120_000 * MILLIS,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn system(&self) -> Result<SystemConfig, ConfigError> {
        SystemConfig::new(self.n).map_err(|_| ConfigError::BadN(self.n))
    }

    pub fn validate(&self) -> Result<SystemConfig, ConfigError> {
        let sys = self.system()?;
        self.sim
            .validate(&sys)
            .map_err(|e| ConfigError::Faults(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(ConfigError::BadValue("batch_size", "0".into()));
        }
        if !(self.arrival_rate >= 0.0) || !self.arrival_rate.is_finite() {
            return Err(ConfigError::BadValue(
                "arrival_rate",
                self.arrival_rate.to_string(),
            ));
        }
        Ok(sys)
    }

    /// Sets the run seed, which also seeds the network.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sim.seed = seed;
        self
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(k: &'static str, v: &str) -> Result<T, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError::BadValue(k, v.to_string()))
        }
        let key = key.replace('-', "_");
        match key.as_str() {
            "protocol" => self.protocol = value.parse()?,
            "n" => self.n = num("n", value)?,
            "batch_size" => self.batch_size = num("batch_size", value)?,
            "payload_bytes" => self.payload_bytes = num("payload_bytes", value)?,
            "dissemination_bytes" => self.dissemination_bytes = num("dissemination_bytes", value)?,
            "timeout_ms" => self.timeout_ms = num("timeout_ms", value)?,
            "delta_ms" => self.sim.delta = num::<u64>("delta_ms", value)? * MILLIS,
            "gst_ms" => self.sim.gst = num::<u64>("gst_ms", value)? * MILLIS,
            "delay" => self.sim.delay = parse_delay(value)?,
            "arrival_rate" => self.arrival_rate = num("arrival_rate", value)?,
            "views" => self.views = num("views", value)?,
            "max_time_ms" => self.max_time = num::<u64>("max_time_ms", value)? * MILLIS,
            "seed" => {
                let s = num("seed", value)?;
                self.seed = s;
                self.sim.seed = s;
            }
            "crashes" => self.sim.faults.crashes = parse_crashes(value)?,
            "silent_views" => {
                self.sim.faults.silent_leader_views = parse_list::<u64>("silent_views", value)?
                    .into_iter()
                    .map(View)
                    .collect()
            }
            "equivocators" => {
                self.sim.faults.equivocators =
                    parse_list("equivocators", value)?.into_iter().collect()
            }
            "partitions" => self.sim.faults.partitions = parse_partitions(value)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Parses a config file on top of `self`. Blank lines and `#` comments
    /// are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax(i + 1));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("protocol", self.protocol.to_string());
        m.insert("n", self.n.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("payload_bytes", self.payload_bytes.to_string());
        m.insert("dissemination_bytes", self.dissemination_bytes.to_string());
        m.insert("timeout_ms", self.timeout_ms.to_string());
        m.insert("delta_ms", (self.sim.delta / MILLIS).to_string());
        m.insert("gst_ms", (self.sim.gst / MILLIS).to_string());
        m.insert("delay", format_delay(&self.sim.delay));
        m.insert("arrival_rate", self.arrival_rate.to_string());
        m.insert("views", self.views.to_string());
        m.insert("max_time_ms", (self.max_time / MILLIS).to_string());
        m.insert("seed", self.seed.to_string());
        let f = &self.sim.faults;
        m.insert(
            "crashes",
            join(f.crashes.iter().map(|(r, t)| format!("{r}@{}", t / MILLIS))),
        );
        m.insert(
            "silent_views",
            join(f.silent_leader_views.iter().map(|v| v.0.to_string())),
        );
        m.insert(
            "equivocators",
            join(f.equivocators.iter().map(|r| r.to_string())),
        );
        m.insert(
            "partitions",
            join(f.partitions.iter().map(|p| {
                format!(
                    "{}@{}..{}",
                    p.group
                        .iter()
                        .map(|r| r.to_string())
                        .collect::<Vec<_>>()
                        .join("+"),
                    p.start / MILLIS,
                    p.end / MILLIS
                )
            })),
        );
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(k: &'static str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| ConfigError::BadValue(k, s.to_string()))
        })
        .collect()
}

/// `uniform:LO:HI`, `normal:MEAN:STDDEV` (milliseconds) or `adversarial`.
pub fn parse_delay(v: &str) -> Result<DelayModel, ConfigError> {
    let bad = || ConfigError::BadValue("delay", v.to_string());
    let parts: Vec<&str> = v.split(':').collect();
    let ms = |s: &str| s.parse::<u64>().map(|x| x * MILLIS).map_err(|_| bad());
    match parts.as_slice() {
        ["adversarial"] => Ok(DelayModel::Adversarial),
        ["uniform", lo, hi] => Ok(DelayModel::Uniform {
            lo: ms(lo)?,
            hi: ms(hi)?,
        }),
        ["normal", m, s] => {
            let f = |x: &str| match x.parse::<f64>() {
                Ok(y) if y.is_finite() && y >= 0.0 => Ok(y * MILLIS as f64),
                _ => Err(bad()),
            };
            Ok(DelayModel::Normal {
                mean: f(m)?,
                stddev: f(s)?,
            })
        }
        _ => Err(bad()),
    }
}

pub fn format_delay(d: &DelayModel) -> String {
    match d {
        DelayModel::Adversarial => "adversarial".into(),
        DelayModel::Uniform { lo, hi } => format!("uniform:{}:{}", lo / MILLIS, hi / MILLIS),
        DelayModel::Normal { mean, stddev } => {
            format!("normal:{}:{}", mean / MILLIS as f64, stddev / MILLIS as f64)
        }
    }
}

/// `ID@MS,ID@MS`.
fn parse_crashes(v: &str) -> Result<BTreeMap<u16, Time>, ConfigError> {
    let bad = |s: &str| ConfigError::BadValue("crashes", s.to_string());
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (r, t) = s.split_once('@').ok_or_else(|| bad(s))?;
            let r = r.parse().map_err(|_| bad(s))?;
            let t: u64 = t.parse().map_err(|_| bad(s))?;
            Ok((r, t.checked_mul(MILLIS).ok_or_else(|| bad(s))?))
        })
        .collect()
}

/// `A+B@START..END` entries, milliseconds.
fn parse_partitions(v: &str) -> Result<Vec<Partition>, ConfigError> {
    let bad = |s: &str| ConfigError::BadValue("partitions", s.to_string());
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (g, span) = s.split_once('@').ok_or_else(|| bad(s))?;
            let (a, b) = span.split_once("..").ok_or_else(|| bad(s))?;
            let group: BTreeSet<u16> = g
                .split('+')
                .map(|x| x.trim().parse().map_err(|_| bad(s)))
                .collect::<Result<_, _>>()?;
            let start: u64 = a.parse().map_err(|_| bad(s))?;
            let end: u64 = b.parse().map_err(|_| bad(s))?;
            if end < start {
                return Err(bad(s));
            }
            Ok(Partition {
                group,
                start: start.checked_mul(MILLIS).ok_or_else(|| bad(s))?,
                end: end.checked_mul(MILLIS).ok_or_else(|| bad(s))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "# comment\nprotocol = hotstuff\nn=7\n crashes = 6@0, 5@100\nsilent-views = 9,16\n\
             delay = normal:10:3\npartitions = 0+1@50..80\nseed = 5\n",
        )
        .unwrap();
        assert_eq!(c.protocol, Protocol::HotStuff);
        assert_eq!(c.sim.faults.crashes[&5], 100 * MILLIS);
        assert_eq!(c.sim.seed, 5);
        let mut d = ExperimentConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_are_reported() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.apply_text("n 4"), Err(ConfigError::Syntax(1)));
        assert_eq!(
            c.apply_text("bogus = 1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
        assert!(matches!(
            c.apply_text("delay = uniform:1"),
            Err(ConfigError::BadValue("delay", _))
        ));
        c.set("n", "5").unwrap();
        assert_eq!(c.validate(), Err(ConfigError::BadN(5)));
    }
}
