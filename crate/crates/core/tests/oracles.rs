mod common;

use common::oracles::{oracle_metrics, oracle_nearest_prototype};
use hiertune::datamodel::{generate_synthetic, SyntheticSpec};
use hiertune::metrics::evaluate;
use hiertune::{LabelSet, Level};

fn v(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 5e-3)
}

#[test]
fn metrics_oracle_examples() {
    let r = oracle_metrics(&[v(&["a", "b", "d"])], &[v(&["a", "b", "c"])]);
    assert!(close(&r.values, &[66.67, 66.67, 50.0, 66.67]), "{:?}", r.values);
    let r = oracle_metrics(&[v(&["a", "b"])], &[v(&["a", "b"])]);
    assert_eq!(r.values, vec![100.0; 4]);
    let r = oracle_metrics(&[v(&["x"])], &[v(&["a", "b"])]);
    assert_eq!(r.values, vec![0.0; 4]);
    let r = oracle_metrics(&[v(&[])], &[v(&["a"])]);
    assert_eq!(r.values, vec![0.0; 4]);
}

#[test]
fn library_agrees_on_the_worked_example() {
    let lib = evaluate(&[common::set(&["a", "b", "d"])], &[common::set(&["a", "b", "c"])]).unwrap();
    let ora = oracle_metrics(&[v(&["a", "b", "d"])], &[v(&["a", "b", "c"])]);
    for (a, b) in [lib.precision, lib.recall, lib.iou, lib.f1].iter().zip(&ora.values) {
        assert!((a - b).abs() <= ora.tolerance);
    }
}

#[test]
fn oracle_inputs_digest_tracks_inputs() {
    let a = oracle_metrics(&[v(&["a"])], &[v(&["a"])]);
    let b = oracle_metrics(&[v(&["a"])], &[v(&["b"])]);
    assert_ne!(a.inputs_digest, b.inputs_digest);
    assert_eq!(a.inputs_digest, oracle_metrics(&[v(&["a"])], &[v(&["a"])]).inputs_digest);
}

#[test]
fn noise_free_single_label_data_is_solved_by_nearest_prototype() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        labels_min: 1,
        labels_max: 1,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let protos: Vec<Vec<f64>> = data.prototypes.fine.rows().into_iter().map(|r| r.to_vec()).collect();
    let space = data.hierarchy.space(Level::Fine);
    let mut preds = Vec::new();
    for s in &data.test.samples {
        let feats = data.features.get(&s.image_ref).unwrap();
        let regions: Vec<Vec<f64>> = feats.rows().into_iter().map(|r| r.to_vec()).collect();
        let hit = oracle_nearest_prototype(&regions, &protos, 0.99);
        preds.push(hit.iter().map(|&c| space.label(c).to_string()).collect::<LabelSet>());
    }
    let m = evaluate(&preds, &data.test.targets(Level::Fine)).unwrap();
    assert_eq!(m.f1, 100.0);
}
