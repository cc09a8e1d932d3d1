//! Seeded random walks through the composed system.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bus::trace::TraceRecord;
use crate::bus::world::{Event, System, World};

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: Vec<TraceRecord>,
    pub world: World,
    /// The walk ended because no transition was enabled.
    pub terminated: bool,
    pub quiescent: bool,
    /// Safety problems seen along the walk, in order.
    pub problems: Vec<String>,
}

/// Walks at most `max_steps` transitions, choosing uniformly among the
/// enabled ones.
pub fn simulate(sys: &System, seed: u64, max_steps: usize) -> Simulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = World::initial(sys);
    let mut trace = vec![TraceRecord::initial(&world)];
    let mut problems = Vec::new();
    let mut terminated = false;
    for step_no in 1..=max_steps {
        let mut steps = world.successors(sys).steps;
        if steps.is_empty() {
            terminated = true;
            break;
        }
        let step = steps.swap_remove(rng.gen_range(0..steps.len()));
        for e in &step.events {
            let problem = match e {
                Event::Error { component, reason } => Some(format!(
                    "{} reached its error state: {reason}",
                    sys.topology.component_name(*component)
                )),
                Event::Anomaly { component, anomaly } => Some(format!(
                    "{}: {anomaly}",
                    sys.topology.component_name(*component)
                )),
                Event::SpuriousStatus { app, status } => Some(format!(
                    "{} got {status} with no submission outstanding",
                    sys.topology.app_name(*app)
                )),
                Event::Delivered {
                    mt,
                    data,
                    matched: None,
                    ..
                } => Some(format!("data({mt},{data}) delivered but never submitted")),
                Event::PriorityInversion {
                    granted, waiting, ..
                } => Some(format!("{granted} sent while {waiting} was waiting")),
                _ => None,
            };
            if let Some(p) = problem {
                problems.push(format!("step {step_no}: {p}"));
            }
        }
        trace.push(TraceRecord::from_step(step_no, &step));
        world = step.world;
    }
    if !terminated && world.successors(sys).steps.is_empty() {
        terminated = true;
    }
    let quiescent = world.is_quiescent(sys);
    if terminated && !quiescent {
        problems.push("run stopped in a state that is not quiescent".into());
    }
    Simulation {
        trace,
        world,
        terminated,
        quiescent,
        problems,
    }
}
