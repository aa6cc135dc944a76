mod common;

use std::sync::Arc;

use common::*;
use maskguide::attention::{BinaryRaster, EditMask};
use maskguide::backend::DenoiserBackend;
use maskguide::constraints::ConstraintKind;
use maskguide::guidance::DeltaMode;
use maskguide::inversion::TrajectoryCache;
use maskguide::pipeline::{
    latent_blend, run_edit, run_edit_multi, run_iterative, run_reweight_baseline, EditMode,
    EditOutput, EditSession, RunManifest, SourceRef,
};
use maskguide::{Error, Latent};

fn session(seed: u64, source: &str, target: &str, mask: EditMask) -> EditSession {
    let b = toy(seed);
    let z0 = random_latent(b.latent_shape(), &mut rng(seed + 1000));
    let p = pair(b.as_ref(), source, target);
    let mut s = EditSession::new(SourceRef::Latent(z0), mask, p, b).unwrap();
    s.inversion.null_text = None;
    s
}

fn cat_session(seed: u64) -> EditSession {
    session(seed, "a photo of a cat", "a photo of a red cat", block_mask(4, 4, 6, 6))
}

fn out_of_mask_max_diff(a: &Latent, b: &Latent, mask: &EditMask) -> f64 {
    let spatial = a.shape().spatial();
    let cells = mask.latent.cells();
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .enumerate()
        .filter(|(i, _)| !cells[i % spatial])
        .map(|(_, (x, y))| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn no_new_tokens_reproduces_reconstruction() {
    let s = session(1, "a photo of a cat", "a photo of a cat", block_mask(4, 4, 6, 6));
    let out = run_edit(&s).unwrap();
    assert!(out.latent.max_abs_diff(&out.reconstruction) < 1e-6);
    assert!(out.manifest.loss_traces.is_empty());
}

#[test]
fn empty_optimization_window_equals_injection_only() {
    let mut s = cat_session(2);
    let base = run_edit(&EditSession {
        mode: EditMode::InjectionOnly,
        ..s.clone()
    })
    .unwrap();
    s.cfg.tau2 = 50;
    s.trajectory = Some(base.trajectory.clone());
    let guided = run_edit(&s).unwrap();
    assert_eq!(guided.latent, base.latent);
}

#[test]
fn manifest_has_one_loss_block_per_guided_step() {
    let s = cat_session(3);
    let out = run_edit(&s).unwrap();
    let m = &out.manifest;
    assert_eq!(m.status, "ok");
    assert_eq!(m.loss_traces.len(), 25);
    let ts: Vec<usize> = m.loss_traces.iter().map(|b| b.step_index).collect();
    assert_eq!(ts, (26..=50).rev().collect::<Vec<_>>());
    assert!(m.loss_traces.iter().all(|b| b.losses.len() == 15));
    assert_eq!(m.steps.len(), 50);
    assert_eq!(m.loss_csv().lines().count(), 1 + 25 * 15);
}

#[test]
fn blend_guarantee_and_determinism() {
    let s = cat_session(4);
    let a = run_edit(&s).unwrap();
    let b = run_edit(&s).unwrap();
    assert_eq!(a.latent, b.latent);
    assert!(out_of_mask_max_diff(&a.latent, &a.reconstruction, &s.mask) < 1e-6);
    assert_ne!(a.latent, a.reconstruction);
}

#[test]
fn spatial_ratio_beats_injection_only() {
    let mut s = cat_session(5);
    s.spec.kind = ConstraintKind::SpatialRatio;
    s.cfg.delta_mode = DeltaMode::Constant;
    let mag = run_edit(&s).unwrap();
    let base = run_edit(&EditSession {
        mode: EditMode::InjectionOnly,
        trajectory: Some(mag.trajectory.clone()),
        ..s.clone()
    })
    .unwrap();
    let last = |m: &RunManifest| m.steps.iter().rev().find(|t| t.step_index == 26).unwrap().in_mask_after.unwrap();
    assert!(last(&mag.manifest) > last(&base.manifest));
}

fn two_object_session(seed: u64) -> EditSession {
    let mut s = session(
        seed,
        "a photo of a cat and a dog",
        "a photo of a red cat and a blue dog",
        block_mask(1, 4, 6, 6),
    );
    s.cfg.max_it = 5;
    s
}

#[test]
fn one_hot_weights_match_single_prompt_run() {
    let s = two_object_session(6);
    assert_eq!(s.pair.groups.len(), 2);
    let red = s.pair.groups[0].positions.clone();
    let multi = EditSession {
        pair: s.pair.clone().with_weights(&[1.0, 0.0]).unwrap(),
        ..s.clone()
    };
    let single = EditSession {
        pair: s.pair.clone().with_groups(vec![red], &[1.0]).unwrap(),
        ..s.clone()
    };
    let a = run_edit_multi(&multi).unwrap();
    let b = run_edit(&EditSession {
        trajectory: Some(a.trajectory.clone()),
        ..single
    })
    .unwrap();
    assert_eq!(a.latent, b.latent);
    let la: Vec<_> = a.manifest.loss_traces.iter().map(|t| t.losses.clone()).collect();
    let lb: Vec<_> = b.manifest.loss_traces.iter().map(|t| t.losses.clone()).collect();
    assert_eq!(la, lb);
}

#[test]
fn multi_edit_needs_two_groups() {
    let s = cat_session(7);
    let err = run_edit_multi(&s).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
    assert_eq!(err.manifest.status, "error");
    assert_eq!(err.manifest.error_class.as_deref(), Some("config"));
}

#[test]
fn duplicated_tokens_reproduce_single_token_trace() {
    let mut s = session(8, "a photo of a cat", "a photo of a red red red cat", block_mask(3, 3, 7, 7));
    s.cfg.max_it = 4;
    let pos = s.pair.groups[0].positions.clone();
    assert_eq!(pos.len(), 3);
    let third = 1.0 / 3.0;
    let uniform = EditSession {
        pair: s
            .pair
            .clone()
            .with_groups(pos.iter().map(|&p| vec![p]).collect(), &[third, third, 1.0 - 2.0 * third])
            .unwrap(),
        ..s.clone()
    };
    let single = EditSession {
        pair: s.pair.clone().with_groups(vec![vec![pos[0]]], &[1.0]).unwrap(),
        ..s.clone()
    };
    let a = run_edit_multi(&uniform).unwrap();
    let b = run_edit(&EditSession {
        trajectory: Some(a.trajectory.clone()),
        ..single
    })
    .unwrap();
    for (x, y) in a.manifest.loss_traces.iter().zip(&b.manifest.loss_traces) {
        for (u, v) in x.losses.iter().zip(&y.losses) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }
    // Each iteration's loss is the mean of the per-token losses.
    for step in a.manifest.steps.iter().filter(|s| s.optimized) {
        for it in &step.iterations {
            let mean = it.per_group.iter().sum::<f64>() / 3.0;
            assert!((it.loss - mean).abs() < 1e-12);
        }
    }
}

fn mirrored(mask: &EditMask) -> EditMask {
    mask.flip_horizontal()
}

#[test]
fn mirrored_masks_give_mirrored_diagnostics() {
    let b = toy(9);
    let r = random_latent(b.latent_shape(), &mut rng(99));
    let z0 = r.zip_map(&r.flip_horizontal(), |a, c| 0.5 * (a + c));
    let left = block_mask(1, 5, 5, 5);
    let right = mirrored(&left);
    let p = pair(b.as_ref(), "a photo of a cat and a dog", "a photo of a red cat and a red dog");
    assert_eq!(p.groups.len(), 2);
    let p = p.with_weights(&[0.5, 0.5]).unwrap();
    let mut s = EditSession::new(SourceRef::Latent(z0), left.union(&right).unwrap(), p, b).unwrap();
    s.inversion.null_text = None;
    s.cfg.max_it = 5;
    s.group_masks = Some(vec![left.clone(), right.clone()]);
    let a = run_edit_multi(&s).unwrap();
    for st in &a.manifest.steps {
        let g = &st.group_in_mask_after;
        assert!((g[0] - g[1]).abs() < 1e-6, "step {}: {g:?}", st.step_index);
    }
    assert!(a.latent.max_abs_diff(&a.latent.flip_horizontal()) < 1e-6);

    let swapped = EditSession {
        group_masks: Some(vec![right, left]),
        trajectory: Some(a.trajectory.clone()),
        ..s.clone()
    };
    let c = run_edit_multi(&swapped).unwrap();
    assert!(a.latent.max_abs_diff(&c.latent) < 1e-6);
}

#[test]
fn reweight_identity_scale_equals_injection_only() {
    let s = cat_session(10);
    let rw = run_reweight_baseline(&s, 1.0).unwrap();
    let base = run_edit(&EditSession {
        mode: EditMode::InjectionOnly,
        trajectory: Some(rw.trajectory.clone()),
        ..s.clone()
    })
    .unwrap();
    assert_eq!(rw.latent, base.latent);
    assert_eq!(rw.manifest.command, "reweight");
}

#[test]
fn guidance_concentrates_attention_better_than_reweighting() {
    // Small mask: the un-optimized map spreads well beyond it.
    let s = session(11, "a photo of a cat", "a photo of a red cat", block_mask(6, 6, 3, 3));
    let mag = run_edit(&s).unwrap();
    let rw = run_reweight_baseline(
        &EditSession {
            trajectory: Some(mag.trajectory.clone()),
            ..s.clone()
        },
        2.0,
    )
    .unwrap();
    let ratio = |m: &RunManifest, i: usize| {
        let st = &m.steps[i];
        st.injected_in_mask_after.unwrap() / st.out_mask_after.unwrap()
    };
    let first = &rw.manifest.steps[0];
    assert!(first.out_mask_after.unwrap() > 0.0);
    for i in 0..25 {
        assert!(mag.manifest.steps[i].optimized);
        assert!(ratio(&mag.manifest, i) > ratio(&rw.manifest, i), "step {i}");
    }
}

#[test]
fn iterate_empty_and_singleton() {
    let out = run_iterative(&[]);
    assert!(out.outputs.is_empty() && out.failure.is_none());
    let s = cat_session(12);
    let it = run_iterative(std::slice::from_ref(&s));
    let direct = run_edit(&s).unwrap();
    assert_eq!(it.outputs.len(), 1);
    assert_eq!(it.outputs[0].latent, direct.latent);
    assert_eq!(it.manifest().children.len(), 1);
}

#[test]
fn iterate_keeps_first_edit_outside_second_mask() {
    // w = 1 makes the reconstruction branch replay the source exactly.
    let mut first = cat_session(13);
    first.cfg.guidance_scale = 1.0;
    first.mask = block_mask(0, 0, 6, 6);
    let mut second = first.clone();
    second.mask = block_mask(9, 9, 6, 6);
    second.pair = pair(first.backend.as_ref(), "a photo of a red cat", "a photo of a red fluffy cat");
    let out = run_iterative(&[first, second.clone()]);
    assert!(out.failure.is_none());
    let (a, b): (&EditOutput, &EditOutput) = (&out.outputs[0], &out.outputs[1]);
    assert!(out_of_mask_max_diff(&b.latent, &a.latent, &second.mask) < 1e-6);
    assert_ne!(a.latent, b.latent);
}

#[test]
fn iterate_stops_at_first_failure() {
    let s = cat_session(14);
    let mut bad = s.clone();
    bad.cfg.tau2 = 99;
    let out = run_iterative(&[s.clone(), bad, s]);
    assert_eq!(out.outputs.len(), 1);
    let f = out.failure.as_ref().unwrap();
    assert!(matches!(f.error, Error::Config(_)));
    let m = out.manifest();
    assert_eq!(m.status, "error");
    assert_eq!(m.children.len(), 2);
}

#[test]
fn null_text_trajectory_is_cached_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = cat_session(15);
    s.inversion = Default::default();
    s.cache = Some(TrajectoryCache::new(dir.path()));
    let a = run_edit(&s).unwrap();
    assert_eq!(a.manifest.inversion.as_ref().unwrap().source, "computed");
    let inv = a.manifest.inversion.as_ref().unwrap();
    assert!(inv.reconstruction_error.unwrap() <= inv.plain_replay_error.unwrap());
    let b = run_edit(&s).unwrap();
    assert_eq!(b.manifest.inversion.as_ref().unwrap().source, "cache");
    assert_eq!(a.latent, b.latent);
}

#[test]
fn failures_carry_a_manifest() {
    let mut s = cat_session(16);
    s.source = SourceRef::Image("/nonexistent/source.png".into());
    let f = run_edit(&s).unwrap_err();
    assert_eq!(f.manifest.error_class.as_deref(), Some("io"));

    let b = Arc::new(Wrapped::new(1, Quirk::FailingGradient));
    let z0 = random_latent(b.latent_shape(), &mut rng(1));
    let p = pair(b.as_ref(), "a photo of a cat", "a photo of a red cat");
    let mut s = EditSession::new(SourceRef::Latent(z0), block_mask(4, 4, 6, 6), p, b).unwrap();
    s.inversion.null_text = None;
    let f = run_edit(&s).unwrap_err();
    assert_eq!(f.manifest.error_class.as_deref(), Some("backend"));
    assert!(f.to_string().contains("iteration 0"));

    let b = toy(1);
    let empty = EditMask {
        image: BinaryRaster::filled(64, 64, false),
        attn: BinaryRaster::filled(16, 16, false),
        latent: BinaryRaster::filled(16, 16, false),
        area: 0,
    };
    let z0 = random_latent(b.latent_shape(), &mut rng(1));
    let p = pair(b.as_ref(), "a cat", "a red cat");
    let s = EditSession::new(SourceRef::Latent(z0), empty, p, b).unwrap();
    let f = run_edit(&s).unwrap_err();
    assert_eq!(f.manifest.error_class.as_deref(), Some("empty_mask"));
}

#[test]
fn blend_is_exact_outside_mask() {
    let b = toy(0);
    let mut r = rng(17);
    let e = random_latent(b.latent_shape(), &mut r);
    let c = random_latent(b.latent_shape(), &mut r);
    let m = block_mask(2, 3, 5, 4);
    let out = latent_blend(&e, &c, &m).unwrap();
    assert_eq!(out_of_mask_max_diff(&out, &c, &m), 0.0);
    assert_eq!(out_of_mask_max_diff(&out, &e, &mirrored(&EditMask {
        latent: BinaryRaster::from_fn(16, 16, |x, y| !m.latent.get(15 - x, y)),
        ..m.clone()
    })), 0.0);
}
