use std::path::Path;

use canstack::explorer::find_starvation;
use canstack::scenario::Scenario;

fn load(rel: &str) -> Scenario {
    Scenario::load(
        &Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("scenarios")
            .join(rel),
    )
    .unwrap()
}

#[test]
fn endless_stream_starves_the_waiting_frame() {
    let sc = load("descriptive/starvation.toml");
    let report = find_starvation(&sc.system, sc.explore_config(None, None)).unwrap();
    let low = sc.system.topology.app_by_name("low").unwrap();
    let (_, found) = report.apps.iter().find(|(a, _)| *a == low).unwrap();
    let s = found.as_ref().expect("a starving cycle");
    assert!(!s.cycle.is_empty());
    assert!(
        s.granted.iter().all(|c| c.to_string() == "49"),
        "{:?}",
        s.granted
    );
    assert!(!s.granted.is_empty());
    // The trace closes the loop: the last state is the first state of the cycle.
    let first = &s.trace[s.prefix.len()];
    let last = s.trace.last().unwrap();
    assert_eq!(first.digest, last.digest);
    assert_eq!(s.trace.len(), s.prefix.len() + s.cycle.len() + 1);
}

#[test]
fn finite_scenarios_have_no_starving_cycle() {
    for name in ["minimal.toml", "fig1.toml", "cancel_race.toml"] {
        let sc = load(name);
        let report = find_starvation(&sc.system, sc.explore_config(None, None)).unwrap();
        assert!(report.apps.iter().all(|(_, f)| f.is_none()), "{name}");
    }
}
