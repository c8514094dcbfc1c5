use rmd_core::diffusion::Denoiser;
use rmd_core::mixture::{grid_search, GridSpec, MixtureWeights};
use rmd_core::toy::PlantedTail;

#[test]
fn grid_search_recovers_planted_on_grid_optimum() {
    let (a, b) = (1.5, -2.0);
    let mut seen = 0;
    let report = grid_search(&GridSpec::default(), |w| {
        seen += 1;
        assert_eq!(w.w4, 0.0);
        w.validate().unwrap();
        Ok((w.w1 - a).powi(2) + 2.0 * (w.w2 - b).powi(2) + 0.5 * (w.w1 - a) * (w.w2 - b) + 0.7)
    })
    .unwrap();
    assert_eq!(seen, 441);
    assert_eq!(report.grid.len(), 441);
    assert_eq!((report.best.w1, report.best.w2), (a, b));
    assert_eq!(report.best.w3, 1.0 - a - b);
    assert_eq!(report.best_fid, 0.7);
}

fn planted() -> PlantedTail {
    PlantedTail::new(
        3,
        32,
        MixtureWeights::from_grid(1.5, -0.5),
        MixtureWeights::new(1.2, 0.3, -0.4, -0.1).unwrap(),
        10,
    )
    .unwrap()
}

#[test]
fn finetune_tail_recovers_planted_weights() {
    let p = planted();
    let before: Vec<u64> = p
        .model
        .params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    let report = p.solve(1000, 0.02, 10).unwrap();
    let got = report.weights.as_array();
    let want = p.w_star.as_array();
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 0.05, "{got:?} vs {want:?}");
    }
    report.weights.validate().unwrap();
    assert!(report.history.last().unwrap() < &(report.history[0] * 1e-2));
    let after: Vec<u64> = p
        .model
        .params()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect();
    assert_eq!(before, after);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let p = planted();
    let report = p.solve(5, 0.0, 10).unwrap();
    assert_eq!(report.weights.as_array(), p.w_init.as_array());
}
