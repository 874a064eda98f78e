mod common;

use cbctseg::fusion::{majority_vote, staple_fuse, FusionConfig, PriorSource};
use cbctseg::grid::Geometry;
use cbctseg::{Error, LabelGrid};
use common::{fusion_benefit, grid, random_instance, TestRng};

fn cfg() -> FusionConfig {
    FusionConfig {
        keep_posteriors: true,
        ..FusionConfig::default()
    }
}

#[test]
fn rater_permutation_invariance() {
    let mut rng = TestRng::new(31);
    for _ in 0..25 {
        let (_, raters) = random_instance(&mut rng, 300, 5, 5, (0.6, 0.95));
        let base = staple_fuse(&raters, &cfg()).unwrap();
        let mut order: Vec<usize> = (0..raters.len()).collect();
        // Fisher-Yates with the test RNG
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let permuted: Vec<LabelGrid> = order.iter().map(|&j| raters[j].clone()).collect();
        let r = staple_fuse(&permuted, &cfg()).unwrap();
        assert_eq!(r.consensus, base.consensus);
        let (a, b) = (base.posteriors.unwrap(), r.posteriors.unwrap());
        for i in 0..300 {
            assert_eq!(a.voxel(i), b.voxel(i));
        }
        for (k, &j) in order.iter().enumerate() {
            assert_eq!(r.model.confusion[k], base.model.confusion[j]);
        }
    }
}

#[test]
fn normalization_and_stochastic_rows() {
    let mut rng = TestRng::new(32);
    for _ in 0..25 {
        let l = rng.range(2, 8);
        let k = rng.range(1, 6);
        let (_, raters) = random_instance(&mut rng, 400, l, k, (0.5, 0.95));
        let r = staple_fuse(&raters, &cfg()).unwrap();
        for h in &r.history {
            assert!(h.max_normalization_error <= 1e-6);
        }
        let post = r.posteriors.as_ref().unwrap();
        for i in 0..400 {
            let s: f64 = post.voxel(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            // consensus is the argmax with ties to the lowest label
            let w = post.voxel(i);
            let c = r.consensus.data()[i] as usize;
            assert!(w.iter().enumerate().all(|(s, &v)| v < w[c] || (v == w[c] && s >= c)));
        }
        for m in &r.model.confusion {
            for s in 0..m.num_labels() {
                let row = m.row(s);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        assert!((r.model.prior.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let used: std::collections::BTreeSet<u16> = raters.iter().flat_map(|g| g.labels_present()).collect();
        assert!(r.consensus.labels_present().is_subset(&used));
    }
}

#[test]
fn likelihood_is_monotone() {
    let mut rng = TestRng::new(33);
    for case in 0..30 {
        let (l, k) = (rng.range(2, 6), rng.range(2, 5));
        let (_, raters) = random_instance(&mut rng, 500, l, k, (0.55, 0.9));
        let c = FusionConfig {
            tolerance: 1e-12,
            max_iterations: 300,
            prior: if case % 2 == 0 {
                PriorSource::VoteFrequency
            } else {
                PriorSource::Uniform
            },
            ..FusionConfig::default()
        };
        let r = staple_fuse(&raters, &c).unwrap();
        for w in r.history.windows(2) {
            assert!(
                w[1].log_likelihood >= w[0].log_likelihood - 1e-9,
                "case {case}: {} then {}",
                w[0].log_likelihood,
                w[1].log_likelihood
            );
        }
    }
}

#[test]
fn unanimous_voxels_keep_their_label() {
    let mut rng = TestRng::new(34);
    for _ in 0..30 {
        let (l, k) = (rng.range(2, 6), rng.range(2, 5));
        let (_, raters) = random_instance(&mut rng, 500, l, k, (0.6, 0.95));
        let r = staple_fuse(&raters, &FusionConfig::default()).unwrap();
        for i in 0..500 {
            let v = raters[0].data()[i];
            if raters.iter().all(|g| g.data()[i] == v) {
                assert_eq!(r.consensus.data()[i], v);
            }
        }
    }
}

#[test]
fn geometry_and_range_errors() {
    let a = grid([2, 2, 1], vec![0, 1, 2, 3]);
    let b = grid([4, 1, 1], vec![0, 1, 2, 3]);
    assert!(staple_fuse(&[a.clone(), b.clone()], &FusionConfig::default()).is_err());
    assert!(majority_vote(&[a.clone(), b]).is_err());
    let c = LabelGrid::new(Geometry::new([2, 2, 1], [0.5; 3]).unwrap(), vec![0; 4]).unwrap();
    assert!(matches!(
        staple_fuse(&[a.clone(), c], &FusionConfig::default()),
        Err(Error::GeometryMismatch(_))
    ));
    let capped = FusionConfig {
        num_labels: Some(3),
        ..FusionConfig::default()
    };
    assert!(matches!(staple_fuse(&[a], &capped), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn thread_count_does_not_change_result() {
    let mut rng = TestRng::new(35);
    let (_, raters) = random_instance(&mut rng, 50_000, 6, 5, (0.6, 0.95));
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| staple_fuse(&raters, &cfg()).unwrap());
    let b = four.install(|| staple_fuse(&raters, &cfg()).unwrap());
    assert_eq!(a.consensus, b.consensus);
    assert_eq!(a.model, b.model);
}

#[test]
fn fusion_beats_best_rater_on_phantom() {
    let mut wins = 0;
    for seed in 1..=10 {
        let (fused, raters) = fusion_benefit(seed);
        let best = raters.iter().cloned().fold(f64::MIN, f64::max);
        eprintln!("seed {seed}: fused {fused:.4}, best rater {best:.4}");
        if fused >= best {
            wins += 1;
        }
    }
    assert!(wins >= 9, "fusion won {wins}/10 seeds");
}
