use nfem_core::dataset::*;
use nfem_core::problem::{Problem, ProblemKind};
use nfem_core::{substream, CoreError};
use nfem_fem::internal_forces;
use proptest::prelude::*;
use rand::seq::index::sample;

fn beam() -> Problem {
    Problem::standard(ProblemKind::Beam2d).unwrap()
}

#[test]
fn load_case_touches_one_node_within_range() {
    let p = beam();
    let mut rng = substream(5, 0);
    for _ in 0..50 {
        let f = generate_load_case(p.mesh(), (-2.5, 2.5), &mut rng).unwrap();
        let nz: Vec<usize> = (0..f.len()).filter(|&i| f[i] != 0.0).collect();
        assert_eq!(nz.len(), 2);
        assert_eq!(nz[0] / 2, nz[1] / 2);
        assert!(f.iter().all(|v| v.abs() <= 2.5));
    }
    let f = generate_load_case(p.mesh(), (0.0, 0.0), &mut rng).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn load_nodes_are_chosen_uniformly() {
    let p = beam();
    let nodes = p.mesh().load_nodes().to_vec();
    let mut counts = vec![0usize; nodes.len()];
    let mut rng = substream(11, 0);
    let draws = 10_000;
    for _ in 0..draws {
        let f = generate_load_case(p.mesh(), (0.5, 1.0), &mut rng).unwrap();
        let grid = p.embed(&f).unwrap();
        let node = excited_node(&grid, 2).unwrap();
        counts[nodes.iter().position(|&n| n == node).unwrap()] += 1;
    }
    let k = nodes.len() as f64;
    let expected = draws as f64 / k;
    let sd = (draws as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9% quantile of chi-square with 14 degrees of freedom.
    assert_eq!(nodes.len(), 15);
    assert!(chi2 < 36.12, "chi2 {chi2}");
    for &c in &counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn generation_is_reproducible_and_satisfies_equilibrium() {
    let p = beam();
    let (a, report) = generate_dataset(&p, 300, (-2.5, 2.5), 42).unwrap();
    let (b, _) = generate_dataset(&p, 300, (-2.5, 2.5), 42).unwrap();
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    assert_eq!(a.len(), 300);
    assert_eq!(report.redraws, 0);
    // Audit 1% of the stored displacements against the FEM residual.
    let mut rng = substream(1, 0);
    for i in sample(&mut rng, a.len(), 3) {
        let s = &a.samples[i];
        let f = p.extract(&s.f).unwrap();
        let u = p.extract(&s.u).unwrap();
        let r = internal_forces(p.mesh(), &u, p.material()).unwrap();
        let free = p.mesh().free_dof_mask();
        let scale = f.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let worst = (0..f.len())
            .filter(|&d| free[d])
            .map(|d| (r[d] - f[d]).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6 * scale, "sample {i}: residual {worst}");
    }
}

#[test]
fn single_sample_generation_is_byte_identical() {
    let p = beam();
    let a = generate_dataset(&p, 1, (-2.5, 2.5), 9).unwrap().0;
    let b = generate_dataset(&p, 1, (-2.5, 2.5), 9).unwrap().0;
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    assert!(generate_dataset(&p, 0, (-2.5, 2.5), 9).is_err());
}

#[test]
fn lshape_sets_are_zero_on_the_void() {
    let p = Problem::standard(ProblemKind::Lshape2d).unwrap();
    let (set, _) = generate_dataset(&p, 20, (-2.5, 2.5), 3).unwrap();
    let active = p.active_mask();
    assert_eq!(set.grid_shape, vec![16, 8]);
    for s in &set.samples {
        for (i, &a) in active.iter().enumerate() {
            if !a {
                assert_eq!(s.f[i], 0.0);
                assert_eq!(s.u[i], 0.0);
            }
        }
    }
    let compact = extract_lshape(&set.samples).unwrap();
    assert_eq!(compact[0].f.len(), 160);
    assert_eq!(embed_lshape(&compact).unwrap(), set.samples);
    let zero = Sample {
        f: vec![0.0; 160],
        u: vec![0.0; 160],
    };
    let grid = embed_lshape(&[zero]).unwrap();
    assert!(grid[0].f.iter().chain(&grid[0].u).all(|&v| v == 0.0));
    assert_eq!(grid[0].f.len(), 256);
    let short = Sample {
        f: vec![0.0; 150],
        u: vec![0.0; 150],
    };
    assert!(embed_lshape(&[short]).is_err());
}

fn synthetic(count: usize, force: f64) -> SampleSet {
    let mut f = vec![0.0; 128];
    f[127] = force;
    SampleSet {
        problem_id: String::new(),
        grid_shape: vec![16, 4],
        dim: 2,
        samples: (0..count)
            .map(|i| Sample {
                f: f.clone(),
                u: (0..128).map(|k| 1.0 + (i * 128 + k) as f64 * 1e-6).collect(),
            })
            .collect(),
        force_range: (-1.0, 1.0),
        seed: 0,
        noise: None,
    }
}

#[test]
fn noise_has_the_requested_relative_spread() {
    let set = synthetic(800, 0.3);
    let noisy = inject_noise(&set, 0.7, 0.2, 17).unwrap();
    let eta: Vec<f64> = noisy
        .samples
        .iter()
        .zip(&set.samples)
        .flat_map(|(n, s)| n.u.iter().zip(&s.u).map(|(a, b)| a / b - 1.0).collect::<Vec<_>>())
        .collect();
    assert!(eta.len() >= 100_000);
    let mean = eta.iter().sum::<f64>() / eta.len() as f64;
    let sd = (eta.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eta.len() - 1) as f64).sqrt();
    assert!((sd - 0.2).abs() < 0.01, "{sd}");
    assert_eq!(noisy.noise, Some(NoiseSpec { threshold: 0.7, level: 0.2 }));
    assert_eq!(noisy.samples[0].f, set.samples[0].f);
}

#[test]
fn noise_spares_large_loads_and_vanishes_with_level() {
    let set = synthetic(10, 1.5);
    assert_eq!(inject_noise(&set, 0.7, 0.2, 1).unwrap().samples, set.samples);
    let small = synthetic(10, 0.1);
    let faint = inject_noise(&small, 0.7, 1e-12, 1).unwrap();
    for (a, b) in faint.samples.iter().zip(&small.samples) {
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((x - y).abs() <= 1e-10 * y.abs());
        }
    }
    assert!(inject_noise(&set, 0.7, 0.0, 1).is_err());
    assert!(inject_noise(&set, 0.7, 1.0, 1).is_err());
}

#[test]
fn split_sizes_and_partition() {
    let set = synthetic(6000, 0.3);
    let (train, test) = split_dataset(&set, 0.05, 4).unwrap();
    assert_eq!((train.len(), test.len()), (5700, 300));
    let set = synthetic(100, 0.3);
    let (train, test) = split_dataset(&set, 0.05, 4).unwrap();
    assert_eq!((train.len(), test.len()), (95, 5));
    let mut all: Vec<f64> = train.samples.iter().chain(&test.samples).map(|s| s.u[0]).collect();
    all.sort_by(f64::total_cmp);
    let mut expected: Vec<f64> = set.samples.iter().map(|s| s.u[0]).collect();
    expected.sort_by(f64::total_cmp);
    assert_eq!(all, expected);
    assert!(split_dataset(&set, 0.0, 4).is_err());
    assert!(split_dataset(&set, 1.0, 4).is_err());
}

#[test]
fn file_round_trip_and_corruption() {
    let p = beam();
    let (mut set, _) = generate_dataset(&p, 5, (-2.5, 2.5), 8).unwrap();
    set = inject_noise(&set, 10.0, 0.2, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.nfds");
    save_dataset(&set, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(encode_dataset(&back).unwrap(), encode_dataset(&set).unwrap());
    for (a, b) in back.samples.iter().zip(&set.samples) {
        assert!(a.u.iter().zip(&b.u).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.noise, set.noise);

    let bytes = std::fs::read(&path).unwrap();
    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(decode_dataset(truncated), Err(CoreError::Format(_))));
    let mut flipped = bytes.clone();
    flipped[60] ^= 1;
    assert!(matches!(decode_dataset(&flipped), Err(CoreError::Checksum { .. })));
    let mut magic = bytes.clone();
    magic[6] = b'2';
    assert!(matches!(decode_dataset(&magic), Err(CoreError::Format(_))));

    assert!(load_dataset_for(&path, &[16, 4]).is_ok());
    assert!(load_dataset_for(&path, &[16, 8]).is_err());
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn ordering_strategies() {
    let shape = [16, 4];
    let set = synthetic(3, 0.3);
    let pre = OrderingMap::build(OrderingStrategy::Preferred, &shape);
    assert_eq!(apply_ordering(&set, &pre).unwrap(), set);
    let r1 = OrderingMap::build(OrderingStrategy::Random(7), &shape);
    let r2 = OrderingMap::build(OrderingStrategy::Random(7), &shape);
    assert_eq!(r1, r2);
    assert_ne!(r1.permutation, pre.permutation);
    let back = apply_ordering(&apply_ordering(&set, &r1).unwrap(), &r1.inverse()).unwrap();
    assert_eq!(back, set);
    let g = OrderingMap::build(OrderingStrategy::GmshLike, &shape);
    let corners = [0, 3, 60, 63];
    let mut first: Vec<usize> = corners.iter().map(|&c| g.permutation[c]).collect();
    first.sort();
    assert_eq!(first, vec![0, 1, 2, 3]);
    // Interior nodes come last.
    assert!(g.permutation[17] >= 64 - 14 * 2);
    assert!(OrderingMap::from_permutation(vec![0, 0, 1]).is_err());
    assert!(OrderingMap::from_permutation(vec![0, 3, 1]).is_err());
    let wrong = OrderingMap::from_permutation(vec![1, 0]).unwrap();
    assert!(apply_ordering(&set, &wrong).is_err());
}

#[test]
fn ordering_preserves_equilibrium_residuals() {
    let p = beam();
    let (set, _) = generate_dataset(&p, 2, (-2.5, 2.5), 13).unwrap();
    let map = OrderingMap::build(OrderingStrategy::Random(3), &[16, 4]);
    let permuted = apply_ordering(&set, &map).unwrap();
    let inv = map.inverse();
    for (s, q) in set.samples.iter().zip(&permuted.samples) {
        let residual = |f: &[f64], u: &[f64]| {
            let r = internal_forces(p.mesh(), &p.extract(u).unwrap(), p.material()).unwrap();
            let f = p.extract(f).unwrap();
            r.iter().zip(f).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let restored_f = inv.apply(&q.f, 2).unwrap();
        let restored_u = inv.apply(&q.u, 2).unwrap();
        let a = residual(&s.f, &s.u);
        let b = residual(&restored_f, &restored_u);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #[test]
    fn orderings_are_bijections(nx in 1usize..9, ny in 1usize..9, seed in any::<u64>()) {
        for strategy in [OrderingStrategy::Preferred, OrderingStrategy::GmshLike, OrderingStrategy::Random(seed)] {
            let map = OrderingMap::build(strategy, &[nx, ny]);
            prop_assert!(OrderingMap::from_permutation(map.permutation.clone()).is_ok());
            let values: Vec<u32> = (0..(nx * ny * 2) as u32).collect();
            let there = map.apply(&values, 2).unwrap();
            prop_assert_eq!(map.inverse().apply(&there, 2).unwrap(), values);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let set = synthetic(n, 0.3);
        let n_test = (n as f64 * frac).round() as usize;
        match split_dataset(&set, frac, seed) {
            Ok((train, test)) => {
                prop_assert_eq!(test.len(), n_test);
                prop_assert_eq!(train.len() + test.len(), n);
            }
            Err(_) => prop_assert!(n_test == 0 || n_test == n),
        }
    }
}
