use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use mednns::dataio::gen_synthetic;
use mednns::encoding::{encode_dataset, FrozenExtractor};
use mednns::numerics::{decode_tensors, encode_tensors, Rng, Tensor};
use mednns::retrieval::query;
use mednns::statistics::{fid, fid_matrix, pearson, spearman, Correlation, GaussianStats};
use mednns::supernet::FairnessSampler;
use mednns::{DatasetDescriptor, ModelIndex, SearchSpace, SyntheticFamilySpec};

fn psd(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let a: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64;
        }
        c[i * d + i] += 0.05;
    }
    c
}

fn stats(seed: u64, d: usize) -> GaussianStats {
    let mut rng = Rng::new(seed ^ 0x5eed);
    GaussianStats::from_parts((0..d).map(|_| rng.normal()).collect(), psd(seed, d), 0).unwrap()
}

fn nalgebra_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Reference Fréchet distance computed with nalgebra.
fn oracle_fid(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let d = a.dim();
    let ca = DMatrix::from_row_slice(d, d, &a.cov);
    let cb = DMatrix::from_row_slice(d, d, &b.cov);
    let sa = nalgebra_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    (mean + ca.trace() + cb.trace() - 2.0 * nalgebra_sqrt(&inner).trace()).max(0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fid_is_symmetric_and_matches_oracle(sa in any::<u64>(), sb in any::<u64>(), d in 1usize..8) {
        let (a, b) = (stats(sa, d), stats(sb, d));
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        let scale = 1.0 + ab.abs();
        prop_assert!((ab - ba).abs() <= 1e-8 * scale);
        prop_assert!((ab - oracle_fid(&a, &b)).abs() <= 1e-7 * scale);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-8 * (1.0 + a.cov.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn fid_matrix_is_symmetric_with_zero_diagonal(seed in any::<u64>(), n in 2usize..5) {
        let s: Vec<GaussianStats> = (0..n as u64).map(|i| stats(seed.wrapping_add(i), 3)).collect();
        let m = fid_matrix(&s).unwrap();
        for i in 0..n {
            prop_assert_eq!(m[i][i], 0.0);
            for j in 0..n {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!(m[i][j] >= 0.0);
            }
        }
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(x in prop::collection::vec(-100.0f64..100.0, 3..40), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let y: Vec<f64> = x.iter().map(|v| v + 30.0 * rng.normal()).collect();
        let base = spearman(&x, &y).unwrap();
        let warped: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(spearman(&warped, &y).unwrap(), base);
        if let Correlation::Value(r) = base {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
            let rf = spearman(&flipped, &y).unwrap().value().unwrap();
            prop_assert!((rf + r).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_without_ties_matches_rank_formula(perm_seed in any::<u64>(), n in 3usize..30) {
        let mut rng = Rng::new(perm_seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = rng.permutation(n).into_iter().map(|v| v as f64).collect();
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        let nf = n as f64;
        let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman(&x, &y).unwrap().value().unwrap();
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert_eq!(pearson(&x, &x).value().unwrap(), 1.0);
    }

    #[test]
    fn config_mask_roundtrip(idx in 0usize..512) {
        let space = SearchSpace::default();
        let cfg = space.enumerate()[idx].clone();
        let mask = space.config_to_mask(&cfg).unwrap();
        prop_assert!(mask.is_binary());
        prop_assert_eq!(space.mask_to_config(&mask).unwrap(), cfg);
    }

    #[test]
    fn fairness_holds_for_any_seed(seed in any::<u64>(), rounds in 1usize..12) {
        let space = SearchSpace::default();
        let mut s = FairnessSampler::new(space.clone(), Rng::new(seed));
        let cfgs = s.sample_fair(2 * rounds);
        for stage in 0..space.stages {
            let deep = cfgs.iter().filter(|c| c.stages[stage].depth == 2).count();
            let wide = cfgs.iter().filter(|c| c.stages[stage].width == 1.0).count();
            let exp = cfgs.iter().filter(|c| c.stages[stage].expansion == 1.0).count();
            prop_assert_eq!((deep, wide, exp), (rounds, rounds, rounds));
        }
    }

    #[test]
    fn weight_container_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let tensors: Vec<Tensor> = shapes.iter().map(|s| rng.normal_tensor(s, 1.0)).collect();
        let bytes = encode_tensors(&tensors);
        prop_assert_eq!(decode_tensors(&bytes).unwrap(), tensors);
        prop_assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn query_prefix_property(seed in any::<u64>(), n in 2usize..60, k1 in 1usize..20, extra in 0usize..20) {
        let mut rng = Rng::new(seed);
        let unit = |v: Vec<f64>| { let n = v.iter().map(|x| x * x).sum::<f64>().sqrt(); v.into_iter().map(|x| x / n).collect::<Vec<f64>>() };
        // coarse values produce exact ties
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit((0..3).map(|_| (rng.below(3) as f64) + 0.5).collect())).collect();
        let index = ModelIndex::new(rows, "p".into()).unwrap();
        let q = unit(vec![1.0, 0.5, 0.25]);
        let small = query(&index, &q, k1).unwrap();
        let large = query(&index, &q, k1 + extra).unwrap();
        prop_assert_eq!(&large.ranked[..small.ranked.len()], &small.ranked[..]);
        for w in large.ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn dataset_file_roundtrip(seed in any::<u64>(), classes in 2u16..5) {
        let spec = SyntheticFamilySpec { classes, ..SyntheticFamilySpec::default() };
        let ds = gen_synthetic("x", &spec, classes as usize * 20, seed).unwrap();
        let back = DatasetDescriptor::decode("x", &ds.encode()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn family_fid_grows_with_shift() {
    let spec = SyntheticFamilySpec::default();
    let ex = FrozenExtractor::new(256, 32, 11);
    let shifts = [0.0, 0.5, 1.0, 2.0];
    let mut mean_fid = [0.0; 4];
    for seed in 0..5u64 {
        let base = encode_dataset(&gen_synthetic("d0", &spec, 400, seed).unwrap(), &ex, 256, 17).unwrap();
        for (i, &s) in shifts.iter().enumerate() {
            let other = gen_synthetic("d", &spec.with_shift(s), 400, seed + 100).unwrap();
            let enc = encode_dataset(&other, &ex, 256, 17).unwrap();
            mean_fid[i] += fid(&base.stats, &enc.stats).unwrap() / 5.0;
        }
    }
    assert!(mean_fid.windows(2).all(|w| w[0] <= w[1]), "{mean_fid:?}");
}
