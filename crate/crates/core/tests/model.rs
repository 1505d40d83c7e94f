use nfem_autodiff::{softplus, Tensor};
use nfem_core::unet::{ModelMode, UNet, UNetConfig};
use nfem_core::{substream, CoreError};

fn small(mode: ModelMode) -> UNetConfig {
    let mut cfg = UNetConfig::new(&[16, 4], mode);
    cfg.base_channels = 4;
    cfg
}

fn input(batch: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, 0);
    let data = (0..batch * 128)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
        .collect();
    Tensor::from_vec(&[batch, 16, 4, 2], data).unwrap()
}

#[test]
fn same_seed_same_parameters() {
    let a = UNet::build(small(ModelMode::Vb), 5).unwrap();
    let b = UNet::build(small(ModelMode::Vb), 5).unwrap();
    let c = UNet::build(small(ModelMode::Vb), 6).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn output_matches_input_shape() {
    let m = UNet::build(small(ModelMode::Deterministic), 1).unwrap();
    let y = m.forward_det(&input(3, 1)).unwrap();
    assert_eq!(y.shape(), &[3, 16, 4, 2]);
    let bad = Tensor::zeros(&[3, 16, 5, 2]);
    assert!(matches!(m.forward_det(&bad), Err(CoreError::Model(_))));

    let p = UNet::build(small(ModelMode::Mle), 1).unwrap();
    let (mu, rho) = p.forward_prob(&input(2, 1), None).unwrap();
    assert_eq!(mu.shape(), &[2, 16, 4, 2]);
    assert_eq!(rho.shape(), &[2, 16, 4, 2]);
    assert!(p.forward_det(&input(2, 1)).is_err());
    assert!(m.forward_prob(&input(2, 1), None).is_err());
}

#[test]
fn zero_weights_predict_zero() {
    let mut m = UNet::build(small(ModelMode::Deterministic), 1).unwrap();
    for p in m.params_mut() {
        if p.trainable {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let y = m.forward_det(&input(2, 4)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn three_dimensional_layout() {
    let mut cfg = UNetConfig::new(&[28, 12, 12], ModelMode::Deterministic);
    cfg.base_channels = 2;
    let m = UNet::build(cfg, 2).unwrap();
    let x = Tensor::filled(&[1, 28, 12, 12, 3], 0.1);
    assert_eq!(m.forward_det(&x).unwrap().shape(), &[1, 28, 12, 12, 3]);
}

#[test]
fn deterministic_3d_network_is_smaller_than_one_dense_layer() {
    let dense = 12096.0 * 12096.0 + 12096.0;
    for c in [32, 64] {
        let mut cfg = UNetConfig::new(&[28, 12, 12], ModelMode::Deterministic);
        cfg.base_channels = c;
        let count = cfg.parameter_count() as f64;
        assert!(count < 146.3e6 && count < dense / 1.5, "c = {c}: {count}");
    }
}

#[test]
fn parameter_count_grows_with_constant_channels() {
    let mut last = 0;
    for c in [8, 16, 32, 64] {
        let mut cfg = small(ModelMode::Deterministic);
        cfg.base_channels = c;
        cfg.constant_channels = true;
        let n = cfg.parameter_count();
        assert!(n > last);
        last = n;
    }
}

#[test]
fn variational_sampling_is_seeded() {
    let m = UNet::build(small(ModelMode::Vb), 3).unwrap();
    let x = input(2, 9);
    let (a, _) = m.forward_prob(&x, Some(&mut substream(1, 0))).unwrap();
    let (b, _) = m.forward_prob(&x, Some(&mut substream(1, 0))).unwrap();
    let (c, _) = m.forward_prob(&x, Some(&mut substream(2, 0))).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_posterior_variance_removes_weight_noise() {
    let mut m = UNet::build(small(ModelMode::Vb), 3).unwrap();
    for p in m.params_mut() {
        if p.name.ends_with("kernel_rho") {
            p.value.data_mut().iter_mut().for_each(|v| *v = -60.0);
        }
    }
    assert!(softplus(-60.0) < 1e-25);
    let x = input(2, 9);
    let (a, ra) = m.forward_prob(&x, Some(&mut substream(1, 0))).unwrap();
    let (b, rb) = m.forward_prob(&x, Some(&mut substream(2, 0))).unwrap();
    let (mean, _) = m.forward_prob(&x, None).unwrap();
    for ((x, y), z) in a.data().iter().zip(b.data()).zip(mean.data()) {
        assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
    }
    assert!(ra.data().iter().zip(rb.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn monte_carlo_mean_stabilizes() {
    let mut m = UNet::build(small(ModelMode::Vb), 3).unwrap();
    // Widen the posterior so the draws visibly differ.
    for p in m.params_mut() {
        if p.name.ends_with("kernel_rho") {
            p.value.data_mut().iter_mut().for_each(|v| *v = nfem_autodiff::softplus_inverse(0.05));
        }
    }
    let x = input(1, 2);
    let t = 300;
    let draws: Vec<Vec<f64>> = (0..t)
        .map(|i| m.forward_prob(&x, Some(&mut substream(8, i))).unwrap().0.into_data())
        .collect();
    let n = draws[0].len();
    for k in 0..n {
        let mean = draws.iter().map(|d| d[k]).sum::<f64>() / t as f64;
        let sd = (draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt();
        assert!(sd > 0.0);
        let se = sd / (t as f64).sqrt();
        assert!(se < 0.1 * sd);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = UNet::build(small(ModelMode::Vb), 3).unwrap();
    m.params_mut()[5].value.data_mut()[0] = -1.234_567_890_123_456_7e-300;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.nfw");
    m.save(&path).unwrap();
    let back = UNet::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"NFEMW1\n"));
    let mut bad = bytes.clone();
    bad[100] ^= 4;
    assert!(matches!(UNet::decode_checkpoint(&bad), Err(CoreError::Checksum { .. })));
    assert!(UNet::decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    assert!(UNet::load(&dir.path().join("none")).is_err());
}

#[test]
fn mode_names_parse() {
    for m in [ModelMode::Deterministic, ModelMode::Mle, ModelMode::Vb] {
        assert_eq!(m.name().parse::<ModelMode>().unwrap(), m);
    }
    assert!("bayes".parse::<ModelMode>().is_err());
}
