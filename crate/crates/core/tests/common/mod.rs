#![allow(dead_code)]

use std::path::PathBuf;

use regtsc::network::{IntersectionTemplate, RoadNetwork, Shape};
use regtsc::observation::{empty_observation, TrafficObservation};
use regtsc::rerag::GuidanceItem;
use regtsc::sim::EmergencyVehicleState;

pub fn cross() -> RoadNetwork {
    IntersectionTemplate::new(Shape::Cross, 2)
        .network()
        .unwrap()
}

/// Lane counts of the reference four-phase cross: (lane, QV, far, mid, near).
pub const REFERENCE_COUNTS: [(&str, usize, usize, usize, usize); 8] = [
    ("road#1_2", 4, 0, 3, 0),
    ("road#3_2", 1, 3, 0, 2),
    ("road#1_1", 2, 1, 1, 0),
    ("road#3_1", 1, 2, 0, 1),
    ("road#2_2", 3, 1, 0, 2),
    ("road#4_2", 2, 1, 1, 3),
    ("road#2_1", 5, 2, 1, 1),
    ("road#4_1", 2, 1, 2, 0),
];

pub fn reference_observation() -> TrafficObservation {
    let mut obs = empty_observation(&cross(), 0);
    for p in &mut obs.phases {
        for l in &mut p.lanes {
            let (_, q, f, m, n) = REFERENCE_COUNTS.iter().find(|c| c.0 == l.lane).unwrap();
            l.counts.queued = *q;
            l.counts.far = *f;
            l.counts.mid = *m;
            l.counts.near = *n;
        }
    }
    obs
}

pub fn reference_ev() -> EmergencyVehicleState {
    EmergencyVehicleState {
        vehicle_id: "Ambulance_1".into(),
        planned_route: [
            "road#72_1",
            "road#64_1",
            "road#2_1",
            "road#4_1",
            "road#9_1",
            "road#32_1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        route_position: 2,
        current_lane: "road#2_1".into(),
        distance_to_stop_line: 276.8,
        speed: 17.4,
    }
}

pub fn reference_guidance() -> GuidanceItem {
    GuidanceItem {
        id: "g1".into(),
        situation: "An emergency vehicle is approaching the intersection, but its lane is still occupied by queuing vehicles.".into(),
        recommended_action: "Promptly select the signal phase for the lane with the emergency vehicle.".into(),
        intended_effect: "Clear the queuing vehicles in the lane with the emergency vehicle for its rapid passage.".into(),
    }
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Compares `actual` with a checked-in golden file. With `REGTSC_BLESS=1`
/// the file is (re)written instead.
pub fn assert_golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("REGTSC_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| {
        panic!(
            "{}: {e} (run with REGTSC_BLESS=1 to create)",
            path.display()
        )
    });
    assert_eq!(actual, expected, "golden mismatch for {name}");
}
