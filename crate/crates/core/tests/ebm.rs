use ebdl_core::math::{standard_normal, stream_rng};
use ebdl_core::{EnergyModel, Error, ModelSpec, Tensor, TimeEmbedding};
use proptest::prelude::*;

fn model(seed: u64) -> EnergyModel {
    EnergyModel::new(ModelSpec { d: 3, width: 12, depth: 3, m: 4 }, seed).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = model(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = EnergyModel::load(&path).unwrap();
    assert_eq!(back.spec(), m.spec());
    assert_eq!(back.seed(), m.seed());
    let mut rng = stream_rng(1, 0);
    let x = standard_normal(&mut rng, 100, 3);
    let t: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let a = m.log_density(&t, x.view()).unwrap();
    let b = back.log_density(&t, x.view()).unwrap();
    assert!(a.iter().zip(&b).all(|(a, b)| a.to_bits() == b.to_bits()));
    // Saving the loaded model reproduces the file.
    let again = dir.path().join("again.ckpt");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = model(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(EnergyModel::load(&path), Err(Error::Format { .. })));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(EnergyModel::load(&path), Err(Error::Format { .. })));

    std::fs::write(&path, &good[..good.len() - 8]).unwrap();
    let err = EnergyModel::load(&path).unwrap_err().to_string();
    assert!(err.contains("parameters"), "{err}");

    std::fs::write(&path, &good[..12]).unwrap();
    assert!(matches!(EnergyModel::load(&path), Err(Error::Format { .. })));

    assert!(matches!(EnergyModel::load(&dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn time_blind_network_has_zero_time_derivative() {
    let mut m = model(3);
    // Zero the time-embedding rows of the first layer and the head weight.
    let d = m.dim();
    let first = &mut m.params_mut()[0];
    for r in d..first.rows {
        for c in 0..first.cols {
            first.data[r * first.cols + c] = 0.0;
        }
    }
    let hw = m.head_weight_index();
    m.params_mut()[hw].data.iter_mut().for_each(|v| *v = 0.0);
    let x = standard_normal(&mut stream_rng(2, 0), 5, 3);
    let dt = m.time_derivative(&[0.5; 5], x.view(), 1e-3).unwrap();
    assert!(dt.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn dimension_mismatch_is_an_error() {
    let m = model(1);
    let x = ndarray::Array2::<f64>::zeros((2, 2));
    assert!(m.log_density(&[0.1, 0.2], x.view()).is_err());
    let x = ndarray::Array2::<f64>::zeros((2, 3));
    assert!(m.log_density(&[0.1], x.view()).is_err());
}

#[test]
fn embedding_is_bounded() {
    let e = TimeEmbedding { m: 16 };
    let f = e.frequencies();
    assert_eq!((f[0], f[15]), (1.0, 1000.0));
    let v = e.embed(&[0.0, 0.37, 1.0]);
    assert_eq!(v.shape(), (3, 32));
    assert!(v.data.iter().all(|x| x.abs() <= 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn bias_moves_density_but_not_score(c in -5.0f64..5.0, seed in 0u64..100, t in 0.01f64..0.99) {
        let m = model(seed);
        let mut shifted = m.clone();
        let bi = shifted.bias_index();
        shifted.params_mut()[bi].data[0] += c;
        let x = standard_normal(&mut stream_rng(seed, 1), 4, 3);
        let ts = [t; 4];
        let (a, b) = (m.log_density(&ts, x.view()).unwrap(), shifted.log_density(&ts, x.view()).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(a, b)| (b - a - c).abs() < 1e-12));
        let (sa, sb) = (m.score(&ts, x.view()).unwrap(), shifted.score(&ts, x.view()).unwrap());
        prop_assert!(sa.iter().zip(sb.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn outputs_are_finite(seed in 0u64..100, scale in 0.1f64..50.0) {
        let m = model(seed);
        let x = standard_normal(&mut stream_rng(seed, 2), 4, 3) * scale;
        let ts = [0.0, 0.3, 0.7, 1.0];
        prop_assert!(m.log_density(&ts, x.view()).unwrap().iter().all(|v| v.is_finite()));
        prop_assert!(m.score(&ts, x.view()).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn set_params_rejects_wrong_shapes(seed in 0u64..10) {
        let mut m = model(seed);
        let mut p: Vec<Tensor> = m.params().to_vec();
        p[0] = Tensor::zeros(1, 1);
        prop_assert!(m.set_params(p).is_err());
    }
}

#[test]
fn energy_and_free_head_recombine_into_the_log_density() {
    let m = EnergyModel::new(ModelSpec { d: 3, width: 8, depth: 3, m: 4 }, 9).unwrap();
    let x = standard_normal(&mut stream_rng(9, 1), 6, 3);
    let t = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0];
    let lp = m.log_density(&t, x.view()).unwrap();
    let u = m.energy(&t, x.view()).unwrap();
    let f = m.free_energy(&t).unwrap();
    for i in 0..6 {
        assert!((lp[i] - (f[i] - u[i])).abs() < 1e-12);
    }
}
