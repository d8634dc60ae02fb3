use mind_core::pipeline::{
    decode_checkpoint, decode_records, encode_checkpoint, encode_records, load_checkpoint, rollout, rollout_expert,
    rollout_many, save_checkpoint, train_on, write_loss_csv, Intervention, InterventionKind, Mind, MindConfig, Mode,
    EXECUTE_PER_PLAN,
};
use mind_core::pushworld::generate_episodes;
use mind_core::MindError;

fn tiny(steps: usize) -> MindConfig {
    let mut c = MindConfig::default();
    c.apply_text(&format!(
        "video_dim=16\nvideo_layers=1\nvideo_heads=2\nmatcher_hidden=16\nmatcher_proj=8\nmatcher_layers=1\n\
         depth=1\nhidden=16\nheads=2\nbatch=2\nsteps={steps}\nwarmup=2\nseed=5\n"
    ))
    .unwrap();
    c
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let eps = generate_episodes(6, 2, 0.05).unwrap();
    let (mind, _) = train_on(&tiny(3), &eps, |_| {}).unwrap();
    let bytes = encode_checkpoint(&mind).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.params, mind.params);
    assert_eq!(back.config, mind.config);
    assert_eq!(back.step, 3);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mndc");
    save_checkpoint(&mind, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().params, mind.params);
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let bytes = encode_checkpoint(&Mind::new(tiny(1)).unwrap()).unwrap();
    for cut in [0, 2, 7, 12, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(MindError::Format(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_checkpoint(&bad), Err(MindError::Format(_))));
    let mut newer = bytes;
    newer[4] = 2;
    assert!(matches!(decode_checkpoint(&newer), Err(MindError::Format(_))));
}

#[test]
fn training_is_deterministic() {
    let eps = generate_episodes(6, 2, 0.05).unwrap();
    let (a, ha) = train_on(&tiny(10), &eps, |_| {}).unwrap();
    let (b, hb) = train_on(&tiny(10), &eps, |_| {}).unwrap();
    assert_eq!(encode_checkpoint(&a).unwrap(), encode_checkpoint(&b).unwrap());
    assert_eq!(ha, hb);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_loss_csv(&mut ca, &ha).unwrap();
    write_loss_csv(&mut cb, &hb).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca).unwrap().starts_with("step,L_video,L_action,L_align,lr\n"));
}

#[test]
fn disabled_loss_is_still_reported() {
    let eps = generate_episodes(6, 2, 0.05).unwrap();
    let mut c = tiny(2);
    c.use_align_loss = false;
    let (_, h) = train_on(&c, &eps, |_| {}).unwrap();
    for r in &h {
        assert!(r.align > 0.0 && r.video > 0.0 && r.action > 0.0);
        assert_eq!(r.total, c.lambda_v * r.video + c.lambda_a * r.action);
    }
}

#[test]
fn expert_through_the_loop_succeeds() {
    for task in 0..4 {
        for seed in 0..5 {
            let r = rollout_expert(task, seed).unwrap();
            assert!(r.success, "task {task} seed {seed}");
        }
    }
}

#[test]
fn evaluation_counts_per_mode() {
    let mind = Mind::new(tiny(1)).unwrap();
    mind.lodiff.reset_evaluations();
    let r = rollout(&mind, 1, 3, Mode::SingleStep, None).unwrap();
    assert_eq!(mind.lodiff.evaluations(), r.replans);
    mind.lodiff.reset_evaluations();
    let r = rollout(&mind, 1, 3, Mode::FullVideo, None).unwrap();
    assert_eq!(mind.lodiff.evaluations(), 50 * r.replans);
}

#[test]
fn receding_horizon_bookkeeping() {
    let mind = Mind::new(tiny(1)).unwrap();
    for seed in 0..4 {
        let r = rollout(&mind, seed as usize % 4, seed, Mode::SingleStep, None).unwrap();
        let n = r.actions.len();
        assert!(n <= EXECUTE_PER_PLAN * r.replans && n > EXECUTE_PER_PLAN * (r.replans - 1));
        assert_eq!(r.latents.len(), r.replans);
        assert_eq!(r.features.len(), r.replans);
        assert_eq!(r.frames.len(), (n + 1) * 256);
        assert_eq!(r.latent_step, 999);
    }
}

#[test]
fn null_interventions_are_transparent() {
    let mind = Mind::new(tiny(1)).unwrap();
    let plain = rollout(&mind, 2, 8, Mode::SingleStep, None).unwrap();
    for kind in [InterventionKind::VisualPerturbation, InterventionKind::LatentMasking] {
        let iv = Intervention::new(kind, 0.0, 3).unwrap();
        assert_eq!(rollout(&mind, 2, 8, Mode::SingleStep, Some(&iv)).unwrap(), plain, "{kind}");
    }
    let iv = Intervention::new(InterventionKind::RandomLatentInjection, 0.0, 3).unwrap();
    assert_ne!(rollout(&mind, 2, 8, Mode::SingleStep, Some(&iv)).unwrap().features, plain.features);
}

#[test]
fn unknown_intervention_rejected() {
    assert!(matches!("melt_gripper".parse::<InterventionKind>(), Err(MindError::Contract(_))));
    assert!("swapped_instruction".parse::<InterventionKind>().is_ok());
    let mind = Mind::new(tiny(1)).unwrap();
    let iv = Intervention::new(InterventionKind::CrossEpisodeInjection, 0.0, 0).unwrap();
    assert!(rollout(&mind, 0, 0, Mode::SingleStep, Some(&iv)).is_err());
    assert!(rollout(&mind, 4, 0, Mode::SingleStep, None).is_err());
}

#[test]
fn worker_count_does_not_change_results() {
    let mind = Mind::new(tiny(1)).unwrap();
    let jobs: Vec<(usize, u64)> = (0..5).map(|i| (i % 4, 40 + i as u64)).collect();
    let one = rollout_many(&mind, &jobs, Mode::SingleStep, None, 1).unwrap();
    let three = rollout_many(&mind, &jobs, Mode::SingleStep, None, 3).unwrap();
    assert_eq!(one, three);
    let bytes = encode_records(&one).unwrap();
    let back = decode_records(&bytes).unwrap();
    assert_eq!(encode_records(&back).unwrap(), bytes);
    assert!(matches!(decode_records(&bytes[..bytes.len() - 3]), Err(MindError::Format(_))));
}
