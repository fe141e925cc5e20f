//! Fault scheduling. Faults are quantized to the boundary of the window
//! containing their timestamp and applied there before any message traffic
//! of that window; the application itself happens in the coordinator.

use crate::scenario::Scenario;
use crate::time::SimTime;

/// One scheduled fault application: (window-boundary time, fault index).
/// Ordered by (time, declaration order); the engine's insertion-sequence
/// tie-break preserves declaration order for equal times.
pub fn fault_schedule(scenario: &Scenario) -> Vec<(SimTime, usize)> {
    let step = scenario.step_ns;
    let mut out: Vec<(SimTime, usize)> = scenario
        .faults
        .iter()
        .enumerate()
        .map(|(i, f)| (SimTime(f.at_ns / step * step), i))
        .collect();
    out.sort_by_key(|&(at, idx)| (at, idx));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    #[test]
    fn empty_fault_list_yields_no_events() {
        let s = parse_scenario(
            r#"{"name":"t","duration_ms":1000,"seed":1,
                "nodes":[{"id":"n","behavior":"echo","position":[0,0]}]}"#,
        )
        .unwrap();
        assert!(fault_schedule(&s).is_empty());
    }

    #[test]
    fn faults_quantize_to_window_start_and_keep_declaration_order() {
        let s = parse_scenario(
            r#"{"name":"t","duration_ms":1000,"step_ms":100,"seed":1,
                "nodes":[{"id":"a","behavior":"echo","position":[0,0]},
                         {"id":"b","behavior":"echo","position":[1,0]}],
                "faults":[
                    {"at_ms": 250, "kind": "node_crash", "node": "b"},
                    {"at_ms": 230, "kind": "node_crash", "node": "a"}
                ]}"#,
        )
        .unwrap();
        let sched = fault_schedule(&s);
        // both land on the 200 ms boundary, in declaration order
        assert_eq!(sched, vec![(SimTime(200_000_000), 0), (SimTime(200_000_000), 1)]);
    }
}
