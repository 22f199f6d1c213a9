mod common;

use common::{small_benchmark, small_model};
use mapre::sampling::{EpisodeSampler, EpisodeSpec};
use mapre::training::{load_checkpoint, save_checkpoint, score_episode, Checkpoint, MapreModel};
use serde_json::json;

fn trained_like(seed: u64) -> (mapre::corpus::SyntheticBenchmark, MapreModel) {
    let bench = small_benchmark(seed);
    let mut model = small_model(bench.vocab.len(), seed);
    model.set_coefficients(0.71, 1.37).unwrap();
    model.add_head_l(5, 3).unwrap();
    model.add_head_r(4).unwrap();
    (bench, model)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (_, model) = trained_like(1);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&Checkpoint::from_model(&model, 42, json!({"note": "x"})), &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded.step, 42);
    let rebuilt = loaded.to_model().unwrap();
    save_checkpoint(&Checkpoint::from_model(&rebuilt, 42, json!({"note": "x"})), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    for id in model.store.ids() {
        let (a, b) = (model.store.get(id).data(), rebuilt.store.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", model.store.name(id));
    }
}

#[test]
fn forward_is_bit_exact_after_reload() {
    let (bench, model) = trained_like(2);
    let bytes = Checkpoint::from_model(&model, 0, json!({})).to_bytes().unwrap();
    let rebuilt = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
    let sampler = EpisodeSampler::new(&bench.fewshot.train, &bench.catalog).unwrap();
    let mut rng = mapre::seeded_rng(8);
    for _ in 0..5 {
        let ep = sampler.sample(EpisodeSpec { ways: 4, shots: 2, queries: 4 }, &mut rng).unwrap();
        let (a, b) = (model.coefficients(), rebuilt.coefficients());
        let x = score_episode(&model, &bench.vocab, &bench.catalog, &ep, a.0, a.1).unwrap();
        let y = score_episode(&rebuilt, &bench.vocab, &bench.catalog, &ep, b.0, b.1).unwrap();
        for (p, q) in x.iter().flatten().zip(y.iter().flatten()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}

#[test]
fn truncated_or_corrupted_files_are_rejected() {
    let (_, model) = trained_like(3);
    let bytes = Checkpoint::from_model(&model, 1, json!({})).to_bytes().unwrap();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "accepted {cut} of {} bytes", bytes.len());
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&flipped).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
