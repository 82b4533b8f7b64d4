mod common;

use std::fs;

use cdngp::accounting::size_report;
use cdngp::checkpoint::{blob_bytes_on_disk, branch_dir, load_checkpoint, save_checkpoint};
use cdngp::continual::{
    derive_seed, init_branch, run_continual, run_continual_with, train_branch, InitPolicy,
    RunOptions, TrainInputs,
};
use cdngp::encoders::Layout;
use cdngp::error::Error;
use common::{tiny_config, tiny_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn six_chunks_six_branches_within_residency() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let cfg = tiny_config(Layout::Voxel);
    let s = run_continual_with(&ds, &cfg, RunOptions::default()).unwrap();
    assert_eq!(s.repo.branches.len(), 6);
    assert_eq!(s.metrics.len(), 6);
    assert!(s.peak_resident_frames <= cfg.t_chunk);
    assert_eq!(s.metrics[0].iterations, cfg.eta_init);
    assert!(s.metrics[1..].iter().all(|m| m.iterations == cfg.eta_aux));
    assert!(s.repo.branches[&0].aux.is_none());
    assert!(s.repo.branches[&3].aux.is_some());
}

#[test]
fn whole_sequence_chunk_gives_one_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let mut cfg = tiny_config(Layout::Voxel);
    cfg.t_chunk = ds.n_frames();
    cfg.field.temporal.n_max = ds.n_frames() as u32;
    let repo = run_continual(&ds, &cfg).unwrap();
    assert_eq!(repo.branches.len(), 1);
    assert!(repo.branches[&0].aux.is_none());
}

#[test]
fn earlier_branches_and_base_are_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let cfg = tiny_config(Layout::Voxel);
    let mut seen = Vec::new();
    let mut hook = |repo: &cdngp::continual::ModelRepo,
                    m: &cdngp::continual::BranchMetrics|
     -> cdngp::Result<()> {
        let branches = (0..=m.chunk)
            .map(|k| repo.branch_bytes(k))
            .collect::<cdngp::Result<Vec<_>>>()?;
        seen.push((repo.base_bytes(), branches));
        Ok(())
    };
    let s = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            after_chunk: Some(&mut hook),
            ..Default::default()
        },
    )
    .unwrap();
    let (base0, _) = &seen[0];
    assert_eq!(&s.repo.base_bytes(), base0);
    for (j, (base, branches)) in seen.iter().enumerate() {
        assert_eq!(&s.repo.base_bytes(), base, "base changed after chunk {j}");
        for (k, bytes) in branches.iter().enumerate() {
            assert_eq!(&s.repo.branch_bytes(k).unwrap(), bytes, "branch {k}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&tmp.path().join("ds"));
    let mut cfg = tiny_config(Layout::Merf);
    cfg.snapshot_grids = true;
    let dir = tmp.path().join("ckpt");
    let s = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(dir.clone()),
            stop_after: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    let loaded = load_checkpoint(&dir).unwrap();
    assert_eq!(loaded, s.repo);
    let cam = &ds.cameras()[0];
    let (a, _) = s.repo.render_frame(cam, 5, false).unwrap();
    let (b, _) = loaded.render_frame(cam, 5, false).unwrap();
    assert!(a
        .data
        .iter()
        .zip(&b.data)
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    // Saving again is a no-op on the blobs.
    let before = fs::read(dir.join("grid.bin")).unwrap();
    save_checkpoint(&loaded, &dir).unwrap();
    assert_eq!(fs::read(dir.join("grid.bin")).unwrap(), before);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&tmp.path().join("ds"));
    let cfg = tiny_config(Layout::Voxel);
    let full = run_continual(&ds, &cfg).unwrap();
    let dir = tmp.path().join("ckpt");
    let opts = |stop| RunOptions {
        checkpoint_dir: Some(dir.clone()),
        resume: true,
        stop_after: stop,
        ..Default::default()
    };
    let part = run_continual_with(&ds, &cfg, opts(Some(2))).unwrap();
    assert_eq!(part.repo.branches.len(), 2);
    let rest = run_continual_with(&ds, &cfg, opts(None)).unwrap();
    assert_eq!(rest.metrics.len(), 4);
    assert_eq!(rest.repo.base_bytes(), full.base_bytes());
    for k in 0..6 {
        assert_eq!(
            rest.repo.branch_bytes(k).unwrap(),
            full.branch_bytes(k).unwrap()
        );
    }
    assert_eq!(rest.repo.grid, full.grid);

    let mut other = cfg.clone();
    other.lr *= 2.0;
    let err = run_continual_with(&ds, &other, opts(None)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn missing_branch_is_reported_and_others_still_render() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&tmp.path().join("ds"));
    let cfg = tiny_config(Layout::Voxel);
    let dir = tmp.path().join("ckpt");
    let s = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(dir.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    fs::remove_dir_all(dir.join(branch_dir(2))).unwrap();
    let repo = load_checkpoint(&dir).unwrap();
    match repo.require_complete() {
        Err(Error::MissingBranches { missing, frames }) => {
            assert_eq!(missing, vec![2]);
            assert_eq!(frames, "4..6");
        }
        other => panic!("expected missing branches, got {other:?}"),
    }
    let cam = &ds.cameras()[0];
    assert!(repo.render_frame(cam, 5, false).is_err());

    // Base plus branch 3 alone reproduces chunk 3.
    let mut lone = repo.clone();
    lone.branches.retain(|&k, _| k == 3);
    let (a, _) = lone.render_frame(cam, 7, false).unwrap();
    let (b, _) = s.repo.render_frame(cam, 7, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_leave_the_branch_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let cfg = tiny_config(Layout::Voxel);
    let mut repo = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .unwrap()
    .repo;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[7]));
    let (mut branch, _) = init_branch(
        1,
        &repo.schedule,
        repo.branches.get(&0),
        &cfg,
        InitPolicy::Schedule,
        &mut rng,
    )
    .unwrap();
    let before = branch.clone();
    let base_before = repo.base_bytes();
    let grid_before = repo.grid.clone();
    let chunk = ds.load_chunk(repo.schedule.chunk(1)).unwrap();
    let views = ds.training_views();
    let m = train_branch(
        &mut repo.base,
        &mut branch,
        &mut repo.grid,
        TrainInputs {
            chunk: &chunk,
            cameras: ds.cameras(),
            views: &views,
        },
        &cfg,
        0,
        None,
    )
    .unwrap();
    assert!(m.records.is_empty());
    assert_eq!(branch, before);
    assert_eq!(repo.base_bytes(), base_before);
    assert_eq!(repo.grid, grid_before);
}

#[test]
fn reported_size_matches_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&tmp.path().join("ds"));
    let mut cfg = tiny_config(Layout::Voxel);
    cfg.eta_init = 2;
    cfg.eta_aux = 2;
    let dir = tmp.path().join("ckpt");
    let s = run_continual_with(
        &ds,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(dir.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let reported = size_report(&s.repo).total_bytes as f64;
    let disk = blob_bytes_on_disk(&dir).unwrap() as f64;
    assert!(disk >= reported);
    assert!((disk - reported) / reported < 0.01, "{disk} vs {reported}");
}

#[test]
fn training_is_independent_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(tmp.path());
    let mut cfg = tiny_config(Layout::Voxel);
    cfg.eta_init = 12;
    cfg.eta_aux = 4;
    cfg.t_chunk = 6;
    cfg.field.temporal.n_max = 6;
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_continual(&ds, &cfg).unwrap())
    };
    assert_eq!(run(1), run(3));
}
