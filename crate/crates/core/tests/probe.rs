use pers_core::codefeat::{CodeFeatureSource, CodeSourceKind};
use pers_core::dataio::{group_learners, LearnerHistory, Vocabulary};
use pers_core::encoder::HyperParams;
use pers_core::model::PersModel;
use pers_core::perscell::{CellConfig, LatentState};
use pers_core::probe::{export_latents, final_latents, fit_probe, permutation_null, write_latents, ProbeConfig};
use pers_core::rng::seeded;
use pers_core::simlearner::toy_logs;
use pers_core::training::TrainData;
use rand::Rng;

const SOURCE: CodeFeatureSource = CodeFeatureSource::HashedTokens { buckets: 32, dim: 8 };

fn setup() -> (Vec<LearnerHistory>, Vocabulary, PersModel) {
    let logs = toy_logs(6, 10, 12);
    let vocab = Vocabulary::from_interactions(&logs);
    let hp = HyperParams {
        d_p: 8,
        d_pos: 8,
        d_c: 8,
        d_ct: 4,
        d_cm: 4,
        d_cs: 4,
        d_k: 8,
        max_len: 10,
        n_exercises: vocab.exercises(),
        layers: 1,
    };
    let model = PersModel::new(hp, CellConfig::default(), CodeSourceKind::HashedTokens { buckets: 32, dim: 8 })
        .unwrap();
    (group_learners(&logs), vocab, model)
}

#[test]
fn empty_history_gives_zero_latents() {
    let (_, vocab, model) = setup();
    let data = TrainData { model: &model, vocab: &vocab, source: &SOURCE };
    let got = final_latents(&data, &model.init_params(1), &[]).unwrap();
    assert_eq!(got, LatentState::zeros(8));
}

#[test]
fn one_row_per_learner_from_the_tail() {
    let (hs, vocab, model) = setup();
    let data = TrainData { model: &model, vocab: &vocab, source: &SOURCE };
    let rows = export_latents(&data, &model.init_params(1), &hs).unwrap();
    assert_eq!(rows.len(), hs.len());
    assert!(rows.iter().all(|r| r.length == 10));
}

#[test]
fn identical_histories_identical_rows() {
    let (hs, vocab, model) = setup();
    let data = TrainData { model: &model, vocab: &vocab, source: &SOURCE };
    let mut twin = hs[2].clone();
    twin.learner_id = "twin".into();
    for e in &mut twin.events {
        e.learner_id = "twin".into();
    }
    let rows = export_latents(&data, &model.init_params(1), &[hs[2].clone(), twin]).unwrap();
    assert_eq!(rows[0].latent, rows[1].latent);
}

#[test]
fn export_is_byte_stable() {
    let (hs, vocab, model) = setup();
    let data = TrainData { model: &model, vocab: &vocab, source: &SOURCE };
    let params = model.init_params(4);
    let dump = || {
        let mut buf = Vec::new();
        write_latents(&mut buf, &export_latents(&data, &params, &hs).unwrap()).unwrap();
        buf
    };
    let a = dump();
    assert_eq!(a, dump());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), hs.len() + 1);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 2 + 3 * 8);
}

#[test]
fn permutation_null_centres_on_chance() {
    let mut rng = seeded(12, &[]);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
    let null = permutation_null(&x, &y, &ProbeConfig::default(), 20).unwrap();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    assert!((mean - 0.5).abs() < 0.1, "{mean}");

    let signal: Vec<Vec<f64>> = x.iter().zip(&y).map(|(v, &c)| vec![v[0] + if c { 2.0 } else { -2.0 }]).collect();
    assert!(fit_probe(&signal, &y, &ProbeConfig::default()).unwrap().accuracy > 0.9);
}
