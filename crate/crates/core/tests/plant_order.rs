use lbsc::plant::{DisturbanceSchedule, FleetState, Plant, PlantConfig, CAR_COUNT};

fn plant(substeps: usize) -> Plant {
    Plant::new(PlantConfig {
        schedule: DisturbanceSchedule::constant(0.015),
        substeps,
        ..PlantConfig::standard()
    })
    .unwrap()
}

fn error_after_one_step(substeps: usize, reference: &FleetState) -> f64 {
    let s0 = FleetState::initial_platoon();
    let s = plant(substeps)
        .step(&s0, &[0.0, 300.0, -200.0, 1000.0, 0.0], 10.0)
        .unwrap()
        .state;
    (0..CAR_COUNT)
        .map(|i| (s.p[i] - reference.p[i]).abs().max((s.v[i] - reference.v[i]).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn rk4_is_fourth_order() {
    let s0 = FleetState::initial_platoon();
    let reference = plant(4096)
        .step(&s0, &[0.0, 300.0, -200.0, 1000.0, 0.0], 10.0)
        .unwrap()
        .state;
    let errs: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&n| error_after_one_step(n, &reference))
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..20.0).contains(&ratio), "{errs:?}");
    }
}
