//! Sweep orchestration on a small model: grid shape, worker-count
//! independence and single-cell reproducibility.

use diffrx::harness::config::ExperimentConfig;
use diffrx::harness::sweep::{cells, run_cell, run_sweep, Method, Models};

fn small_config() -> ExperimentConfig {
    ExperimentConfig::parse(
        r#"
        frames = 3
        [dataset]
        count = 30
        [dataset.channel]
        n_ant = 4
        n_car = 16
        [model.network]
        n_ant = 4
        n_car = 16
        depth = 1
        token_hidden = 8
        channel_hidden = 8
        time_embed_dim = 8
        [model.train]
        epochs = 1
        [receiver]
        n_gen = 4
        [sweep]
        methods = ["diffusion", "diff-training", "direct-noiseless"]
        snr_db = [0.0, -4.0]
        screening = [[2, 2], [1, 1]]
        "#,
    )
    .unwrap()
}

#[test]
fn sweep_rows_match_single_cell_reruns() {
    let cfg = small_config();
    let models = Models::prepare(&cfg, &mut |_| {}).unwrap();
    let grid = cells(&cfg);
    assert_eq!(grid.len(), 2 * 2 + 2 + 2);

    let one = run_sweep(&cfg, &models, 1).unwrap();
    let two = run_sweep(&cfg, &models, 2).unwrap();
    assert_eq!(one.len(), grid.len());
    for ((a, b), cell) in one.iter().zip(&two).zip(&grid) {
        assert_eq!(&a.cell, cell);
        assert_eq!(a.frames, b.frames);
        let again = run_cell(cell, &models, cfg.seed, cfg.frames).unwrap();
        assert_eq!(again.frames, a.frames);
        let mut row = again.row.clone();
        row.wall_seconds = a.row.wall_seconds;
        assert_eq!(row, a.row);
        assert!(a.row.nmse_mean.is_finite() && a.row.nmse_ci95.is_finite());
    }

    // baselines take one step and carry no receiver trace
    for r in one.iter().filter(|r| r.cell.method != Method::Diffusion) {
        assert!(r.frames.iter().all(|f| f.steps == 1 && f.trace.is_empty()));
        assert_eq!(r.row.e_trace, "");
    }
}

#[test]
fn seed_changes_the_frames() {
    let cfg = small_config();
    let models = Models::prepare(&cfg, &mut |_| {}).unwrap();
    let cell = &cells(&cfg)[0];
    let a = run_cell(cell, &models, 1, 3).unwrap();
    let b = run_cell(cell, &models, 2, 3).unwrap();
    assert_ne!(a.nmse(), b.nmse());
}
