use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};

/// Per-identity stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Caption,
    Iir,
    Reference,
    Finetune,
    Sample,
    Filter,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Caption,
        Stage::Iir,
        Stage::Reference,
        Stage::Finetune,
        Stage::Sample,
        Stage::Filter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Caption => "caption",
            Stage::Iir => "iir",
            Stage::Reference => "reference",
            Stage::Finetune => "finetune",
            Stage::Sample => "sample",
            Stage::Filter => "filter",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub identity: String,
    pub stage: Stage,
    pub status: StageStatus,
    /// True when the output was restored from the cache.
    pub cached: bool,
    pub duration: Duration,
    pub output_id: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLedger {
    pub records: Vec<StageRecord>,
}

impl RunLedger {
    pub fn for_identity<'a>(&'a self, identity: &'a str) -> impl Iterator<Item = &'a StageRecord> + 'a {
        self.records.iter().filter(move |r| r.identity == identity)
    }

    pub fn failures(&self) -> Vec<&StageRecord> {
        self.records
            .iter()
            .filter(|r| r.status == StageStatus::Failed)
            .collect()
    }

    /// Stages of each identity appear in pipeline order and nothing follows
    /// a failure.
    pub fn check_order(&self) -> Result<()> {
        let mut last: std::collections::HashMap<&str, (Stage, StageStatus)> = Default::default();
        for r in &self.records {
            if let Some((prev, status)) = last.get(r.identity.as_str()) {
                if *status == StageStatus::Failed {
                    return Err(Error::Integrity(format!("`{}` ran {} after a failure", r.identity, r.stage)));
                }
                if r.stage <= *prev {
                    return Err(Error::Integrity(format!("`{}` ran {} after {}", r.identity, r.stage, prev)));
                }
            }
            last.insert(&r.identity, (r.stage, r.status));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("identity\tstage\tstatus\tcached\tmillis\toutput\terror\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.identity,
                r.stage,
                match r.status {
                    StageStatus::Succeeded => "ok",
                    StageStatus::Failed => "failed",
                },
                r.cached,
                r.duration.as_millis(),
                r.output_id.as_deref().unwrap_or("-"),
                r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " "),
            ));
        }
        s
    }
}
