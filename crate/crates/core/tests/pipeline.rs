use contour_marl::sac::{checkpoint_path, evaluate, load_agent, train, SacConfig};
use contour_marl::synthdata::{generate_corpus, load_corpus, write_corpus, CorpusSpec, KindMix};

const TINY: &str = "\
seed = 5
epochs = 2
n_points = 16
horizon = 3
batch_size = 8
batch_groups = 2
hidden = 4
layers = 1
window = 2
head_hidden = 8
critic_hidden = 8
embed_dim = 4
";

fn corpus() -> Vec<contour_marl::synthdata::Sample> {
    let mix = KindMix::parse("ellipse,star,blob").unwrap();
    generate_corpus(&CorpusSpec::new(10, mix, 32, 11)).unwrap()
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = corpus();
    let manifest = write_corpus(&samples, dir.path()).unwrap();
    let back = load_corpus(&manifest).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.bbox, b.bbox);
        assert_eq!(a.split, b.split);
        assert_eq!(a.grid.channels(), b.grid.channels());
    }
}

#[test]
fn train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = SacConfig::parse(TINY).unwrap();
    let samples = corpus();
    let out = train(&config, &samples, dir.path(), false).unwrap();
    assert_eq!(out.epochs.len(), 2);
    assert!(out.episode_returns.iter().all(|r| r.is_finite()));

    let channels = samples[0].grid.channels();
    let loaded = load_agent(&config, channels, &checkpoint_path(dir.path(), 2)).unwrap();
    let env = config.env_config();
    let a = evaluate(&out.agent, &samples, env, None).unwrap();
    let b = evaluate(&loaded, &samples, env, None).unwrap();
    assert_eq!(a.report.mdice, b.report.mdice);
    assert_eq!(a.ids, b.ids);
    assert!((0.0..=1.0).contains(&a.report.mdice));
    assert!(a.report.mdice >= a.report.miou);
}

#[test]
fn training_is_deterministic() {
    let config = SacConfig::parse(TINY).unwrap();
    let samples = corpus();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        train(&config, &samples, dir.path(), false).unwrap().episode_returns
    };
    assert_eq!(run(), run());
}
