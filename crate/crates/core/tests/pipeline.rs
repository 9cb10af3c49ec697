use facever::decision::{error_rates, verify, FusionMode};
use facever::eval::{
    partition, partition_requiring, run_loaded, synth_generate, ComparisonOptions, DatasetManifest,
    LoadedPartition, Method, ProtocolConfig, Role, SynthParams, REPORT_HEADER,
};
use facever::imaging::GeometryConfig;
use facever::model::{calibrate, train, CalibrationOptions, ModelFile, ModelParams};

fn claims(samples: &[facever::imaging::FaceSample]) -> Vec<(&str, &facever::imaging::FaceSample)> {
    samples.iter().map(|s| (s.subject_id.as_str(), s)).collect()
}

fn trained(data: &LoadedPartition, mode: FusionMode) -> ModelFile {
    let geo = GeometryConfig::default();
    let mut model = train(&data.train, &geo, &ModelParams::default(), 0).unwrap();
    let opts = CalibrationOptions {
        mode,
        ..Default::default()
    };
    calibrate(
        &mut model,
        &claims(&data.client_eval),
        &data.impostor_eval.iter().collect::<Vec<_>>(),
        &opts,
    )
    .unwrap();
    model
}

/// Half total error on the test set at the calibrated thresholds.
fn test_hter(model: &ModelFile, data: &LoadedPartition) -> f64 {
    let mut gen = vec![];
    let mut imp = vec![];
    for s in &data.client_test {
        gen.push(verify(&s.subject_id, s, model, None).unwrap().accept);
    }
    for s in &data.impostor_test {
        for c in model.clients() {
            imp.push(verify(c, s, model, None).unwrap().accept);
        }
    }
    let frr = gen.iter().filter(|a| !**a).count() as f64 / gen.len() as f64;
    let far = imp.iter().filter(|a| **a).count() as f64 / imp.len() as f64;
    0.5 * (far + frr)
}

#[test]
fn in_memory_load_matches_disk() {
    let params = SynthParams {
        n_clients: 4,
        n_impostors: 4,
        ..Default::default()
    };
    let set = synth_generate(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = set.write(dir.path()).unwrap();
    let reread = DatasetManifest::read(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(reread.records, manifest.records);

    let geo = GeometryConfig::default();
    let part = partition(&reread, ProtocolConfig::II).unwrap();
    let disk = LoadedPartition::load(&reread, &part, &geo).unwrap();
    let mem = set.load(ProtocolConfig::II, &geo).unwrap();
    assert_eq!(disk.train, mem.train);
    assert_eq!(disk.impostor_test, mem.impostor_test);
    assert_eq!(disk.client_eval, mem.client_eval);
}

#[test]
fn test_rows_never_reach_the_model() {
    let set = synth_generate(&SynthParams {
        n_clients: 5,
        n_impostors: 4,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let full = set.write(dir.path()).unwrap();
    let geo = GeometryConfig::default();

    let build = |m: &DatasetManifest| {
        let part = partition_requiring(
            m,
            ProtocolConfig::I,
            &[Role::ClientTrain, Role::ClientEval, Role::ImpostorEval],
        )
        .unwrap();
        let load = |role| m.load_samples(&part.rows(role), &geo).unwrap();
        let data = LoadedPartition {
            train: load(Role::ClientTrain),
            client_eval: load(Role::ClientEval),
            client_test: vec![],
            impostor_eval: load(Role::ImpostorEval),
            impostor_test: vec![],
        };
        trained(&data, FusionMode::Fused).to_json()
    };
    let stripped = full.without_roles(&[Role::ClientTest, Role::ImpostorTest]);
    assert!(stripped.records.len() < full.records.len());
    assert_eq!(build(&full), build(&stripped));
}

#[test]
fn colour_without_chroma_signal_is_chance() {
    let mut total = 0.0;
    for seed in 0..10 {
        let params = SynthParams {
            seed,
            chroma_separation: 0.0,
            ..Default::default()
        };
        let data = synth_generate(&params)
            .unwrap()
            .load(ProtocolConfig::I, &GeometryConfig::default())
            .unwrap();
        total += test_hter(&trained(&data, FusionMode::ColorOnly), &data);
    }
    let mean = total / 10.0;
    assert!((mean - 0.5).abs() <= 0.1, "mean colour HTER {mean}");
}

#[test]
fn well_separated_grey_is_nearly_perfect() {
    let params = SynthParams {
        grey_separation: 1.0,
        noise: 0.005,
        ..Default::default()
    };
    let data = synth_generate(&params)
        .unwrap()
        .load(ProtocolConfig::I, &GeometryConfig::default())
        .unwrap();
    let model = trained(&data, FusionMode::GreyOnly);
    let hter = test_hter(&model, &data);
    assert!(hter <= 0.01, "grey HTER {hter}");
    // the calibrated threshold also separates the evaluation scores
    let g: Vec<f64> = data
        .client_eval
        .iter()
        .map(|s| verify(&s.subject_id, s, &model, None).unwrap().fused)
        .collect();
    let i: Vec<f64> = data
        .impostor_eval
        .iter()
        .flat_map(|s| {
            model
                .clients()
                .map(|c| verify(c, s, &model, None).unwrap().fused)
                .collect::<Vec<_>>()
        })
        .collect();
    let (far, frr) = error_rates(&g, &i, model.global_policy.threshold);
    assert!(far + frr <= 0.02, "eval far {far} frr {frr}");
}

#[test]
fn single_method_report() {
    let data = synth_generate(&SynthParams {
        n_clients: 6,
        n_impostors: 4,
        ..Default::default()
    })
    .unwrap()
    .load(ProtocolConfig::I, &GeometryConfig::default())
    .unwrap();
    let opts = ComparisonOptions {
        timing: false,
        ..Default::default()
    };
    let report = run_loaded(&data, ProtocolConfig::I, &[Method::Grey2D], &opts);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, [REPORT_HEADER, lines[1]]);
    assert!(lines[1].starts_with("2D2G,I,") && lines[1].ends_with(",,"));
    let r = report.get(Method::Grey2D, ProtocolConfig::I).unwrap();
    assert!((r.rates.far + r.rates.frr - r.rates.ter).abs() < 1e-9);
    assert_eq!(r.genuine_trials, 6 * 4);
    assert_eq!(r.impostor_trials, 2 * 4 * 6);
    assert!(report.get(Method::Csf, ProtocolConfig::I).is_none());
}
