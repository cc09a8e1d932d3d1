//! Line-delimited JSON traces and their replay.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::world::{Choice, Step, System, World};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub component: String,
    pub label: String,
    pub message: String,
    pub digest: String,
}

impl TraceRecord {
    pub fn initial(world: &World) -> Self {
        TraceRecord {
            step: 0,
            component: "world".into(),
            label: "init".into(),
            message: String::new(),
            digest: world.digest().to_string(),
        }
    }

    pub fn from_step(index: usize, step: &Step) -> Self {
        TraceRecord {
            step: index,
            component: step.component.clone(),
            label: step.label.clone(),
            message: step.message.clone(),
            digest: step.world.digest().to_string(),
        }
    }
}

pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, ReplayError> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| ReplayError::Io(e.to_string()))?;
            serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("cannot read trace: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace is empty")]
    Empty,
    #[error("step {step}: initial digest {found} does not match {expected}")]
    InitialMismatch {
        step: usize,
        expected: String,
        found: String,
    },
    #[error("step {step}: no enabled transition reproduces `{component} {label} {message}` with digest {digest}")]
    NoMatch {
        step: usize,
        component: String,
        label: String,
        message: String,
        digest: String,
    },
}

/// Records for the run that takes `choices` from the initial world. Each
/// choice indexes the enabled successors of the current world.
pub fn record_run(sys: &System, choices: &[usize]) -> Option<(Vec<TraceRecord>, World)> {
    let mut world = World::initial(sys);
    let mut records = vec![TraceRecord::initial(&world)];
    for (i, &c) in choices.iter().enumerate() {
        let step = world.successors(sys).steps.into_iter().nth(c)?;
        records.push(TraceRecord::from_step(i + 1, &step));
        world = step.world;
    }
    Some((records, world))
}

/// Same as [`record_run`] but addressing transitions by kind.
pub fn record_choices(sys: &System, choices: &[Choice]) -> Option<(Vec<TraceRecord>, World)> {
    let mut world = World::initial(sys);
    let mut records = vec![TraceRecord::initial(&world)];
    for (i, &c) in choices.iter().enumerate() {
        let step = world.apply(sys, c).ok()?;
        records.push(TraceRecord::from_step(i + 1, &step));
        world = step.world;
    }
    Some((records, world))
}

/// Re-executes a trace and returns the world it ends in. Every record must
/// be reproduced by one enabled transition, digest included.
pub fn replay(sys: &System, records: &[TraceRecord]) -> Result<World, ReplayError> {
    let (first, rest) = records.split_first().ok_or(ReplayError::Empty)?;
    let mut world = World::initial(sys);
    let digest = world.digest().to_string();
    if first.digest != digest {
        return Err(ReplayError::InitialMismatch {
            step: first.step,
            expected: first.digest.clone(),
            found: digest,
        });
    }
    for r in rest {
        let next = world.successors(sys).steps.into_iter().find(|s| {
            s.component == r.component
                && s.label == r.label
                && s.message == r.message
                && s.world.digest().to_string() == r.digest
        });
        match next {
            Some(step) => world = step.world,
            None => {
                return Err(ReplayError::NoMatch {
                    step: r.step,
                    component: r.component.clone(),
                    label: r.label.clone(),
                    message: r.message.clone(),
                    digest: r.digest.clone(),
                })
            }
        }
    }
    Ok(world)
}
