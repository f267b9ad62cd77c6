use wsi_inr::config::{Preset, RunConfig};
use wsi_inr::data::{Level, Split};
use wsi_inr::model::ParamGroup;
use wsi_inr::numerics::Checkpoint;
use wsi_inr::pipeline::{
    infer_dense, load_slides, param_digest, run_ito, train_stage1, train_stage2, TrainState,
};
use wsi_inr::Error;

fn tiny() -> RunConfig {
    RunConfig::preset(Preset::DeskScale)
        .with_overrides(&[
            "data.train_seeds=[0,1]",
            "data.test_seeds=[1000]",
            "train.epochs=4",
            "train.stage1_epochs=2",
            "ito.max_epochs=3",
            "ito.warmup_epochs=1",
        ])
        .unwrap()
}

fn ids(cfg: &RunConfig) -> Vec<String> {
    load_slides(cfg, Split::Train).unwrap().iter().map(|s| s.id().to_string()).collect()
}

fn trained(cfg: &RunConfig) -> TrainState {
    let train = load_slides(cfg, Split::Train).unwrap();
    let mut state = TrainState::new(cfg, &ids(cfg)).unwrap();
    train_stage1(&mut state, cfg, &train, &mut |_| Ok(())).unwrap();
    train_stage2(&mut state, cfg, &train, &mut |_| Ok(())).unwrap();
    state
}

#[test]
fn each_stage_moves_only_its_groups() {
    let cfg = tiny();
    let train = load_slides(&cfg, Split::Train).unwrap();
    let ids = ids(&cfg);
    let mut state = TrainState::new(&cfg, &ids).unwrap();
    let mut groups: Vec<ParamGroup> = ParamGroup::GLOBAL.to_vec();
    groups.extend(ids.iter().map(|id| ParamGroup::Encoder(id.clone())));
    let snapshot = |s: &TrainState| groups.iter().map(|g| s.digest(g)).collect::<Vec<_>>();

    let init = snapshot(&state);
    train_stage1(&mut state, &cfg, &train, &mut |_| Ok(())).unwrap();
    let after1 = snapshot(&state);
    train_stage2(&mut state, &cfg, &train, &mut |_| Ok(())).unwrap();
    let after2 = snapshot(&state);

    for (i, g) in groups.iter().enumerate() {
        let seg = *g == ParamGroup::SegHead;
        assert_eq!(init[i] == after1[i], seg, "stage 1 and {g}");
        assert_eq!(after1[i] == after2[i], !seg, "stage 2 and {g}");
    }
}

#[test]
fn adaptation_leaves_shared_weights_untouched() {
    let cfg = tiny();
    let state = trained(&cfg);
    let before = param_digest(state.model.params(), "");
    let test = load_slides(&cfg, Split::Test).unwrap();
    let ito = run_ito(test[0].images(), Level::Base, &state.model, &cfg).unwrap();
    assert_eq!(param_digest(state.model.params(), ""), before);
    assert!(ito.decision.stop);
    assert!(!ito.trajectory.is_empty() && ito.trajectory.len() <= 3);
    assert_ne!(ito.encoder, ito.raw, "the kept encoder is the moving average");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = tiny();
    let a = trained(&cfg).to_checkpoint().unwrap().to_bytes().unwrap();
    let b = trained(&cfg).to_checkpoint().unwrap().to_bytes().unwrap();
    assert!(a == b, "checkpoints differ");

    let test = load_slides(&cfg, Split::Test).unwrap();
    let state = trained(&cfg);
    let run = || {
        let ito = run_ito(test[0].images(), Level::Base, &state.model, &cfg).unwrap();
        infer_dense(test[0].geometry(), Level::Half, &state.model, &ito.encoder, cfg.train.window).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_and_config_guard() {
    let cfg = tiny();
    let ids = ids(&cfg);
    let state = trained(&cfg);
    let bytes = state.to_checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();

    let restored = TrainState::from_checkpoint(&cfg, &ids, &ck).unwrap();
    assert_eq!(restored.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);

    let other = cfg.with_overrides(&["train.lr=0.002"]).unwrap();
    match TrainState::from_checkpoint(&other, &ids, &ck) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("config")),
        Err(e) => panic!("wrong error class: {e}"),
        Ok(_) => panic!("a checkpoint from another config was accepted"),
    }
}
