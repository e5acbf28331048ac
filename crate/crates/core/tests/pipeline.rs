use tcsep::analysis::{
    fnc, hcluster_order, latent_timecourses, match_components, mcc_score, spatial_maps_regression, ComponentSet,
    MccMode, Method,
};
use tcsep::dataset::{load_dataset, save_dataset, standardize, synth_generate, MixingKind, SynthConfig, SyntheticTruth};
use tcsep::infomax::{infomax_fit, unmix, IcaConfig};
use tcsep::train::{load_checkpoint, save_checkpoint, train_from, Checkpoint, TrainConfig, TrainState};

#[test]
fn synth_train_extract_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { mixing: MixingKind::PostNonlinear, n_subjects: 3, timepoints: 150, ..SynthConfig::default() };
    let (d, truth) = synth_generate(&cfg).unwrap();

    let (data, subjects, truth_path) =
        (dir.path().join("d.tcsf"), dir.path().join("d.subjects.csv"), dir.path().join("t.tcsf"));
    save_dataset(&data, &subjects, &d).unwrap();
    truth.save(&truth_path).unwrap();
    let d = load_dataset(&data, &subjects).unwrap();
    let truth = SyntheticTruth::load(&truth_path).unwrap();
    let d = standardize(&d).unwrap();

    let tcfg = TrainConfig { epochs: 5, latent_dim: 5, hidden: [32, 16], lr: 1e-3, ..TrainConfig::default() };
    let (state, log) = train_from(&d, &tcfg, None, None).unwrap();
    assert_eq!(log.records.len(), 5);

    let ckpt = dir.path().join("ck.tcsf");
    let c = Checkpoint {
        params: state.params.clone(),
        adam: state.adam.clone(),
        epoch: state.epoch,
        seed: tcfg.seed,
        extras: Default::default(),
    };
    save_checkpoint(&ckpt, &c).unwrap();
    let restored = TrainState::from(load_checkpoint(&ckpt).unwrap());
    assert_eq!(restored.params, state.params);

    let tcs = latent_timecourses(&restored.params, &d).unwrap();
    let cs = spatial_maps_regression(&tcs, &d, None, Method::TcvaeRegression).unwrap();
    let again = spatial_maps_regression(&latent_timecourses(&state.params, &d).unwrap(), &d, None, Method::TcvaeRegression)
        .unwrap();
    assert_eq!(cs, again);

    let path = dir.path().join("cs.tcsf");
    cs.save(&path).unwrap();
    assert_eq!(ComponentSet::load(&path).unwrap(), cs);

    let m = mcc_score(&cs, &truth, MccMode::Time).unwrap();
    assert!((0.0..=1.0).contains(&m));

    let f = fnc(&cs.timecourses, 0.05).unwrap();
    let mut order = hcluster_order(&f).unwrap();
    order.sort_unstable();
    assert_eq!(order, (0..5).collect::<Vec<_>>());

    let ica = unmix(&infomax_fit(&d, 5, &IcaConfig::default()).unwrap(), &d).unwrap();
    let matching = match_components(&cs, &ica).unwrap();
    assert_eq!(matching.pairs.len(), 5);
    assert!(matching.mean_abs_r > 0.0 && matching.mean_abs_r <= 1.0 + 1e-12);
}
