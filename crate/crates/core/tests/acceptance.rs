//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use canstack::action::Mutations;
use canstack::driver::best;
use canstack::explorer::{check_fig1, explore, PropertyId, Report, Status};
use canstack::mux::{nbest, new_task, worst_tx, PQueue, TxSlot};
use canstack::scenario::Scenario;
use canstack::types::{CanFrame, CanId, Payload, TxId};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_dir().join(format!("{name}.toml"))).unwrap_or_else(|d| panic!("{d}"))
}

fn bundled() -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(scenario_dir())
        .expect("scenario directory")
        .filter_map(|e| {
            let path = e.ok()?.path();
            (path.extension()? == "toml").then(|| path.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    names
}

fn run(name: &str) -> Report {
    let sc = load(name);
    explore(&sc.system, sc.explore_config(None, None)).expect("exploration")
}

fn holds(report: &Report, p: PropertyId) -> Result<(), String> {
    match report.status(p) {
        Status::HoldsWithinBound => Ok(()),
        Status::Violated(c) => Err(format!("{p} violated: {}", c.description)),
        Status::Inapplicable(why) => Err(format!("{p} inapplicable: {why}")),
    }
}

fn criterion_1() -> Outcome {
    let sc = load("fig1");
    let start = Instant::now();
    let verdict =
        check_fig1(&sc.system, sc.explore_config(None, None)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    holds(&verdict.with_mux, PropertyId::PI)?;
    if !verdict.with_mux.stats.complete {
        return Err("exploration with the multiplexer did not close".into());
    }
    let blocking = match verdict.bypassed.status(PropertyId::PI) {
        Status::Violated(c) => c.description.clone(),
        other => {
            return Err(format!(
                "bypass run found no blocking run ({})",
                other.label()
            ))
        }
    };
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!(
        "mux: {} states, no inversion; bypass: {blocking}; {elapsed:.2?}",
        verdict.with_mux.stats.states
    ))
}

fn criterion_2() -> Outcome {
    let mut lines = Vec::new();
    for name in bundled() {
        let start = Instant::now();
        let report = run(&name);
        let elapsed = start.elapsed();
        for p in [PropertyId::P1, PropertyId::P2, PropertyId::P3] {
            holds(&report, p).map_err(|e| format!("{name}: {e}"))?;
        }
        if !report.stats.complete {
            return Err(format!("{name}: frontier not exhausted"));
        }
        if elapsed > Duration::from_secs(300) {
            return Err(format!("{name}: took {elapsed:.1?}"));
        }
        lines.push(format!("{name} {}", report.stats.states));
    }
    Ok(format!("full closure, P1-P3 hold ({})", lines.join(", ")))
}

fn criterion_3() -> Outcome {
    let sc = load("two_node_full");
    let sizes: BTreeSet<u16> = sc.system.table.entries().map(|e| e.parts).collect();
    if sizes != BTreeSet::from([1, 3]) {
        return Err(format!("expected message sizes 1 and 3, found {sizes:?}"));
    }
    let report = explore(&sc.system, sc.explore_config(None, None)).map_err(|e| e.to_string())?;
    holds(&report, PropertyId::P4)?;
    holds(&report, PropertyId::P5)?;
    if !report.stats.complete || report.stats.terminal_states == 0 {
        return Err("no complete runs explored".into());
    }
    Ok(format!(
        "{} states, {} terminal, {} reassembled messages",
        report.stats.states,
        report.stats.terminal_states,
        report.branch_count("rass.complete")
    ))
}

fn criterion_4() -> Outcome {
    let report = run("duplicate_fault");
    holds(&report, PropertyId::P4)?;
    holds(&report, PropertyId::P5)?;
    let dup = report.branch_count("rass.duplicate");
    if dup == 0 {
        return Err("repeated-fragment branch never taken".into());
    }
    Ok(format!(
        "{} states, rass.duplicate taken {dup} times",
        report.stats.states
    ))
}

fn criterion_5() -> Outcome {
    let report = run("cancel_race");
    holds(&report, PropertyId::AS)?;
    holds(&report, PropertyId::P2)?;
    if report.stats.terminal_states == 0 || !report.stats.complete {
        return Err("no terminating runs".into());
    }
    let race = report.branch_count("ccanc.ignore");
    if race == 0 {
        return Err("no CancelI arrived after Ack(true)".into());
    }
    Ok(format!(
        "{} terminal states, one status per submission; cancel after ack seen {race} times",
        report.stats.terminal_states
    ))
}

fn criterion_6() -> Outcome {
    let mut lines = Vec::new();
    for name in bundled() {
        let sc = load(&name);
        let report =
            explore(&sc.system, sc.explore_config(None, None)).map_err(|e| e.to_string())?;
        for (i, n) in report.stats.nodes.iter().enumerate() {
            let spec = &sc.system.topology.nodes[i];
            let bound = 2 * spec.frags.len() + usize::from(spec.tx_buffers);
            if n.inqueue_bound != bound {
                return Err(format!(
                    "{name}/{}: reported bound {} != {bound}",
                    n.node, n.inqueue_bound
                ));
            }
            if n.max_inqueue > bound {
                return Err(format!(
                    "{name}/{}: inqueue {} > {bound}",
                    n.node, n.max_inqueue
                ));
            }
            lines.push(format!("{name}/{} {}<={bound}", n.node, n.max_inqueue));
        }
    }
    Ok(lines.join(", "))
}

/// Peels off the minimum n times.
fn nbest_recursive(prio: &[CanId], n: usize) -> BTreeSet<CanId> {
    if n == 0 {
        return BTreeSet::new();
    }
    let Some(&min) = prio.iter().min() else {
        return BTreeSet::new();
    };
    let rest: Vec<CanId> = prio.iter().copied().filter(|&c| c != min).collect();
    let mut out = nbest_recursive(&rest, n - 1);
    out.insert(min);
    out
}

fn brute_new_task(keys: &[CanId], txs: &[TxSlot]) -> Option<CanId> {
    keys.iter()
        .copied()
        .filter(|k| txs.iter().all(|s| s.cid != Some(*k)))
        .find(|&k| {
            keys.iter()
                .filter(|o| txs.iter().all(|s| s.cid != Some(**o)))
                .all(|&o| k <= o)
        })
}

fn brute_worst_tx(txs: &[TxSlot]) -> Option<TxId> {
    (0..txs.len())
        .find(|&i| match txs[i].cid {
            Some(c) => txs.iter().all(|s| s.cid.is_none_or(|o| c >= o)),
            None => false,
        })
        .map(|i| TxId(i as u8))
}

fn brute_best(buf: &[Option<CanFrame>]) -> Option<TxId> {
    (0..buf.len())
        .find(|&i| match &buf[i] {
            Some(f) => buf.iter().flatten().all(|o| f.id() <= o.id()),
            None => false,
        })
        .map(|i| TxId(i as u8))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c_a2);
    let all_ids: Vec<u32> = (0..2048).collect();
    let mut mismatches = Vec::new();
    for case in 0..10_000 {
        let size = rng.gen_range(0..=16);
        let keys: Vec<CanId> = all_ids
            .choose_multiple(&mut rng, size)
            .map(|&v| CanId::new(v).unwrap())
            .collect();
        let pqueue: PQueue = keys
            .iter()
            .map(|&k| (k, CanFrame::new(k, Payload::empty())))
            .collect();

        let n = rng.gen_range(1..=17);
        if nbest(&pqueue, n) != nbest_recursive(&keys, n) {
            mismatches.push(format!("case {case}: nbest n={n}"));
        }

        let tx_count = rng.gen_range(1..=4usize);
        let mut in_tx: Vec<CanId> = keys.clone();
        in_tx.shuffle(&mut rng);
        let mut txs = vec![TxSlot::default(); tx_count];
        for slot in txs.iter_mut() {
            if rng.gen_bool(0.6) {
                slot.cid = in_tx.pop();
                slot.abort_requested = slot.cid.is_some() && rng.gen_bool(0.3);
            }
        }
        if new_task(&pqueue, &txs) != brute_new_task(&keys, &txs) {
            mismatches.push(format!("case {case}: new_task"));
        }
        if worst_tx(&txs) != brute_worst_tx(&txs) {
            mismatches.push(format!("case {case}: worst_tx"));
        }

        let buf: Vec<Option<CanFrame>> = txs
            .iter()
            .map(|s| s.cid.map(|c| CanFrame::new(c, Payload::empty())))
            .collect();
        if best(&buf) != brute_best(&buf) {
            mismatches.push(format!("case {case}: best"));
        }
    }
    if mismatches.is_empty() {
        Ok("10000 pqueues, 0 mismatches for nbest/new_task/worst_tx/best".into())
    } else {
        Err(format!(
            "{} mismatches, first: {}",
            mismatches.len(),
            mismatches[0]
        ))
    }
}

fn criterion_8() -> Outcome {
    let names = bundled();
    let scenarios: BTreeMap<&str, Scenario> = names.iter().map(|n| (n.as_str(), load(n))).collect();
    let mut lines = Vec::new();
    let mut missed = Vec::new();
    for (mutation_name, m) in Mutations::NAMES {
        let mut caught = None;
        for (name, sc) in &scenarios {
            let mut sys = sc.system.clone();
            sys.mutations = m;
            let report = explore(&sys, sc.explore_config(None, None)).map_err(|e| e.to_string())?;
            let props: Vec<String> = report.violations().map(|(p, _)| p.to_string()).collect();
            if !props.is_empty() {
                caught = Some(format!("{mutation_name} by {} on {name}", props.join("/")));
                break;
            }
        }
        match caught {
            Some(line) => lines.push(line),
            None => missed.push(mutation_name),
        }
    }
    if missed.is_empty() && lines.len() >= 5 {
        Ok(lines.join("; "))
    } else {
        Err(format!("undetected: {}", missed.join(", ")))
    }
}

fn canstack(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_canstack"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = scenario_dir().join("fig1.toml");
    let scenario = scenario.to_str().unwrap();
    let mut traces = Vec::new();
    let mut reports = Vec::new();
    for round in 0..2 {
        let out = dir.path().join(format!("run{round}"));
        let out = out.to_str().unwrap();
        canstack(&[
            scenario, "--mode", "simulate", "--seed", "2024", "--out", out,
        ])?;
        traces.push(fs::read(Path::new(out).join("trace.jsonl")).map_err(|e| e.to_string())?);
        canstack(&[scenario, "--mode", "explore", "--out", out])?;
        reports.push(fs::read(Path::new(out).join("report.jsonl")).map_err(|e| e.to_string())?);
    }
    if traces[0].is_empty() || traces[0] != traces[1] {
        return Err("simulate traces differ between runs".into());
    }
    if reports[0] != reports[1] {
        return Err("explore reports differ between runs".into());
    }
    let a = run("two_node_full").stats;
    let b = run("two_node_full").stats;
    if (a.states, a.edges, &a.branches) != (b.states, b.edges, &b.branches) {
        return Err("library exploration counts differ".into());
    }
    Ok(format!(
        "trace of {} bytes identical; report.jsonl identical; two_node_full {} states twice",
        traces[0].len(),
        a.states
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "priority inversion", criterion_1),
        (2, "no error, deadlock or starvation", criterion_2),
        (3, "payload integrity and delivery", criterion_3),
        (4, "duplicate tolerance", criterion_4),
        (5, "cancel race", criterion_5),
        (6, "InQueue bound", criterion_6),
        (7, "oracle equivalence", criterion_7),
        (8, "mutation sensitivity", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let mut failed = 0;
    for (n, title, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS criterion {n} ({title}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({title}): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
