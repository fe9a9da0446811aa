use compolab::composer::{collected_ids, CollectMode, CollectedReps, CompositionMode, CompositionTable, LayerRange};
use compolab::tensor::Tensor;
use proptest::prelude::*;

const ENC: usize = 2;
const DEC: usize = 3;
const ROWS: usize = 3;
const D: usize = 2;

fn reps(values: &[f64]) -> CollectedReps {
    let ids = collected_ids(ENC, CollectMode::SaAndFf, LayerRange::all(ENC)).unwrap();
    let mats = values.chunks(ROWS * D).map(|c| Tensor::new(vec![ROWS, D], c.to_vec()).unwrap()).collect();
    CollectedReps { ids, mats }
}

fn table(keys: &[f64], values: &[f64]) -> CompositionTable {
    let mut t = CompositionTable::init(CompositionMode::PerLayer, ENC, DEC, CollectMode::SaAndFf, LayerRange::all(ENC))
        .unwrap();
    t.keys.data_mut().copy_from_slice(keys);
    t.values.data_mut().copy_from_slice(values);
    t
}

fn close(a: &Tensor, b: &Tensor) -> bool {
    let scale = 1.0 + a.data().iter().chain(b.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    a.max_abs_diff(b) <= 1e-12 * scale
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, DEC * 2 * ENC)
}

fn mats() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 2 * ENC * ROWS * D)
}

proptest! {
    #[test]
    fn linear_in_representations(w in weights(), x in mats(), y in mats(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let t = table(&w, &w);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        for layer in 1..=DEC {
            let (k, v) = t.compose(&reps(&mixed), layer).unwrap();
            let (kx, vx) = t.compose(&reps(&x), layer).unwrap();
            let (ky, vy) = t.compose(&reps(&y), layer).unwrap();
            let kexp = kx.scale(a).add(&ky.scale(b)).unwrap();
            let vexp = vx.scale(a).add(&vy.scale(b)).unwrap();
            prop_assert!(close(&k, &kexp));
            prop_assert!(close(&v, &vexp));
        }
    }

    #[test]
    fn homogeneous_in_weights(w in weights(), u in weights(), x in mats(), c in -4.0..4.0f64) {
        let base = table(&w, &u);
        let scaled: Vec<f64> = w.iter().map(|s| c * s).collect();
        let t = table(&scaled, &u);
        for layer in 1..=DEC {
            let (k0, v0) = base.compose(&reps(&x), layer).unwrap();
            let (k1, v1) = t.compose(&reps(&x), layer).unwrap();
            prop_assert!(close(&k1, &k0.scale(c)));
            prop_assert_eq!(v1, v0);
        }
    }

    #[test]
    fn one_hot_row_selects_a_representation(x in mats(), pick in 0..2 * ENC, layer in 1..=DEC) {
        let mut w = vec![0.0; DEC * 2 * ENC];
        w[(layer - 1) * 2 * ENC + pick] = 1.0;
        let r = reps(&x);
        let (k, v) = table(&w, &w).compose(&r, layer).unwrap();
        prop_assert_eq!(&k, &r.mats[pick]);
        prop_assert_eq!(&v, &r.mats[pick]);
    }

    #[test]
    fn shared_table_is_layer_independent(w in prop::collection::vec(-2.0..2.0f64, 2 * ENC), x in mats()) {
        let mut t = CompositionTable::init(CompositionMode::Shared, ENC, DEC, CollectMode::SaAndFf, LayerRange::all(ENC))
            .unwrap();
        t.keys.data_mut().copy_from_slice(&w);
        let r = reps(&x);
        let first = t.compose(&r, 1).unwrap();
        for layer in 2..=DEC {
            prop_assert_eq!(&t.compose(&r, layer).unwrap(), &first);
        }
    }
}

#[test]
fn parameter_count_law() {
    for m in 1..=6 {
        for n in 1..=6 {
            let range = LayerRange::all(m);
            let per = CompositionTable::init(CompositionMode::PerLayer, m, n, CollectMode::SaAndFf, range).unwrap();
            assert_eq!(per.param_count(), 2 * n * 2 * m);
            let shared = CompositionTable::init(CompositionMode::Shared, m, n, CollectMode::SaAndFf, range).unwrap();
            assert_eq!(shared.param_count(), 2 * 2 * m);
            let ff = CompositionTable::init(CompositionMode::PerLayer, m, n, CollectMode::FfOnly, range).unwrap();
            assert_eq!(ff.param_count(), 2 * n * m);
        }
    }
}
