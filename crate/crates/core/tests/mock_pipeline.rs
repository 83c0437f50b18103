use countforge_core::client::{EndpointConfig, HttpClient, VisionModel};
use countforge_core::glce::{run_benchmark, Fusion, GlceConfig, ImageSource, InferenceResult};
use countforge_core::metrics::evaluate;
use countforge_core::mock::{generate_scene, MockBehaviorProfile, MockModel, MockServer, SceneRegistry};
use countforge_core::model::{AnnotationSet, BandingScheme, ImageRecord, Split};
use countforge_core::{seeds, Exec};
use rand::Rng;

fn dense_set(n: usize, seed: u64) -> (AnnotationSet, SceneRegistry) {
    let mut rng = seeds::stream(seed, "dense-counts", 0);
    let mut registry = SceneRegistry::new();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let count = rng.random_range(101..=400u64);
        let id = format!("dense{i:04}");
        let mut scene_rng = seeds::stream(seed, &id, 0);
        registry.insert(generate_scene(id.clone(), "objects", count, 1000, 1000, 15.0, &mut scene_rng));
        records.push(ImageRecord {
            image_id: id.clone(),
            image_path: format!("{id}.png"),
            category: "objects".into(),
            count,
            points: None,
            width: 1000,
            height: 1000,
        });
    }
    (AnnotationSet::new("dense", Split::Test, records).unwrap(), registry)
}

fn run(set: &AnnotationSet, model: &MockModel, client: &dyn VisionModel, cfg: &GlceConfig) -> Vec<InferenceResult> {
    run_benchmark(
        set,
        client,
        cfg,
        |r| Ok(Box::new(model.registry.image(&r.image_id).unwrap()) as Box<dyn ImageSource>),
        Exec::Parallel,
    )
    .unwrap()
}

#[test]
fn calibrated_bias_and_complementarity_over_http() {
    let (set, registry) = dense_set(1000, 2024);
    let model = MockModel::new(registry, MockBehaviorProfile::default());
    let server = MockServer::start(model.clone(), "127.0.0.1:0").unwrap();
    let client = HttpClient::new(EndpointConfig {
        base_url: server.base_url(),
        concurrent_request_limit: 16,
        ..Default::default()
    })
    .unwrap();

    let always_tile = GlceConfig {
        dense_threshold: 1,
        ..Default::default()
    };
    let tiled = run(&set, &model, &client, &always_tile);
    let (mut under, mut over) = (0usize, 0usize);
    for (r, rec) in tiled.iter().zip(&set.records) {
        assert!(r.error.is_none() && r.parse_failures == 0, "{r:?}");
        under += usize::from(r.global_count < rec.count);
        over += usize::from(r.local_sum.unwrap() > rec.count);
    }
    let (under, over) = (under as f64 / 1000.0, over as f64 / 1000.0);
    assert!((0.75..=0.90).contains(&under), "global underestimation rate {under}");
    assert!((0.72..=0.88).contains(&over), "tile-sum overestimation rate {over}");

    let mae = |fusion| {
        let results = run(&set, &model, &client, &GlceConfig { fusion, ..Default::default() });
        evaluate(&results, &set, &BandingScheme::default(), "").unwrap().overall.mae
    };
    let (mean, global, local) = (mae(Fusion::Mean), mae(Fusion::GlobalOnly), mae(Fusion::LocalOnly));
    assert!(mean < global && mean < local, "mean {mean}, global {global}, local {local}");
}

#[test]
fn in_process_and_served_mock_agree() {
    let (set, registry) = dense_set(40, 5);
    let model = MockModel::new(registry, MockBehaviorProfile::default());
    let server = MockServer::start(model.clone(), "127.0.0.1:0").unwrap();
    let client = HttpClient::new(EndpointConfig {
        base_url: server.base_url(),
        ..Default::default()
    })
    .unwrap();
    let cfg = GlceConfig::default();
    let direct = run(&set, &model, &model, &cfg);
    assert_eq!(direct, run(&set, &model, &client, &cfg));
    let seq = run_benchmark(
        &set,
        &model,
        &cfg,
        |r| Ok(Box::new(model.registry.image(&r.image_id).unwrap()) as Box<dyn ImageSource>),
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(direct, seq);
}

#[test]
fn empty_set_gives_no_results() {
    let set = AnnotationSet::new("e", Split::Test, vec![]).unwrap();
    let model = MockModel::new(SceneRegistry::new(), MockBehaviorProfile::default());
    assert!(run(&set, &model, &model, &GlceConfig::default()).is_empty());
}

#[test]
fn global_only_never_fuses() {
    let (set, registry) = dense_set(30, 9);
    let model = MockModel::new(registry, MockBehaviorProfile::default());
    let cfg = GlceConfig {
        fusion: Fusion::GlobalOnly,
        ..Default::default()
    };
    for r in run(&set, &model, &model, &cfg) {
        assert_eq!(r.fused, r.global_count as f64);
    }
}
