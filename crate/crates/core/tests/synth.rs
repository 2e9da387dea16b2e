use crossmodal::distance::{cosine_distance, knn, knn_composition};
use crossmodal::synth::{bias_report, generate, SynthConfig};

#[test]
fn pure_function_of_config() {
    let cfg = SynthConfig { seed: 9, modes_per_id: 2, mode_spread: 0.4, ..Default::default() };
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.raw.features(), b.raw.features());
    assert_eq!(a.oracle_embed.features(), b.oracle_embed.features());
    assert_eq!(a.split, b.split);
}

#[test]
fn query_and_gallery_are_modality_disjoint() {
    let c = generate(&SynthConfig::default()).unwrap();
    let m = c.raw.modality();
    let qm: std::collections::HashSet<_> = c.split.query.iter().map(|&i| m[i]).collect();
    let gm: std::collections::HashSet<_> = c.split.gallery.iter().map(|&i| m[i]).collect();
    assert_eq!(qm.len(), 1);
    assert_eq!(gm.len(), 1);
    assert!(qm.is_disjoint(&gm));
}

#[test]
fn bias_grows_with_gap() {
    let gaps = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let values: Vec<f64> = gaps
        .iter()
        .map(|&g| {
            let c = generate(&SynthConfig { modality_gap: g, ..Default::default() }).unwrap();
            bias_report(&c.train_embed()).unwrap().gap.unwrap()
        })
        .collect();
    assert!(values[0].abs() < 0.05, "{values:?}");
    assert!(values[4] > 0.1, "{values:?}");
    assert!(values.windows(2).all(|w| w[1] >= w[0]), "{values:?}");
}

#[test]
fn cosine_neighbors_mostly_same_modality() {
    let c = generate(&SynthConfig::default()).unwrap();
    let set = c.train_embed();
    let nl = knn(&cosine_distance(&set).unwrap(), 30).unwrap();
    assert!(knn_composition(&nl, set.modality()).mean < 0.3);
}
