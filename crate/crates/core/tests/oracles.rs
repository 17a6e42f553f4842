//! Behaviour checked against independent oracles: nearest-centroid
//! classifiers and binomial Monte-Carlo bounds.

use rand::Rng;
use rkd_core::classifier::ClassifierConfig;
use rkd_core::data::{filter_valid_classes, Sample, SeasonDataset, Viewpoint};
use rkd_core::distill::{pretrain, TrainSpec};
use rkd_core::eval::{evaluate_sequence, rank_averaging_probs, top_x_accuracy, EnsembleRule};
use rkd_core::rkd::RkdConfig;
use rkd_core::seed::rng_from;
use rkd_core::synth::{SynthConfig, SynthModel};
use rkd_core::tsa::{builtin_strategy, sample_tsa};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn class_means(data: &SeasonDataset, classes: usize) -> Vec<Vec<f64>> {
    let dim = data.samples[0].features.len();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, c) in data.labeled().unwrap() {
        counts[c] += 1;
        sums[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

/// Top-1 accuracy of the nearest-centroid rule fitted on `train`.
fn nearest_centroid_accuracy(train: &SeasonDataset, test: &SeasonDataset, classes: usize) -> f64 {
    let means = class_means(train, classes);
    let rows = test.labeled().unwrap();
    let hits = rows
        .iter()
        .filter(|(x, c)| {
            let best = (0..classes)
                .min_by(|&a, &b| dist2(x, &means[a]).total_cmp(&dist2(x, &means[b])))
                .unwrap();
            best == *c
        })
        .count();
    hits as f64 / rows.len() as f64
}

#[test]
fn antiphase_season_is_harder_than_same_phase() {
    let cfg = SynthConfig {
        drift: 4.0,
        ..SynthConfig::default()
    };
    let model = SynthModel::new(&cfg, 11).unwrap();
    let first = model.season(1);
    let third = nearest_centroid_accuracy(&first, &model.season(3), cfg.classes);
    let fifth = nearest_centroid_accuracy(&first, &model.season(5), cfg.classes);
    assert!(third < fifth, "season 3 {third} vs season 5 {fifth}");
    assert!(fifth - third > 0.2, "season 3 {third} vs season 5 {fifth}");
}

fn blobs(seed: u64, n: usize) -> SeasonDataset {
    let mut rng = rng_from(seed, &[]);
    let samples = (0..n)
        .map(|i| {
            let c = i % 2;
            let centre = if c == 0 { 4.0 } else { -4.0 };
            let features = (0..3)
                .map(|_| centre + rng.random_range(-1.0..1.0))
                .collect();
            let mut s = Sample::new(Viewpoint::new(0.0, 0.0), features);
            s.class_id = Some(c);
            s
        })
        .collect();
    SeasonDataset::new(1, "blobs", samples)
}

#[test]
fn pretraining_fits_separable_blobs() {
    let data = blobs(3, 200);
    assert_eq!(nearest_centroid_accuracy(&data, &data, 2), 1.0);
    let config = ClassifierConfig::new(3, vec![32], 2).with_seed(4);
    let model = pretrain(&config, &data, &TrainSpec::pretrain()).unwrap();
    let acc = top_x_accuracy(&[model], EnsembleRule::Averaging, &data, 1).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn uniform_random_scorer_hits_one_in_ten() {
    const N: usize = 10_000;
    let mut rng = rng_from(5, &[]);
    let hits = (0..N)
        .filter(|_| {
            let scores: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let truth = rng.random_range(0..10);
            rank_averaging_probs(&[scores]).position(truth) == Some(0)
        })
        .count();
    let acc = hits as f64 / N as f64;
    // Four binomial standard deviations at p = 0.1 is 0.012; the stated bound is 0.01.
    assert!((acc - 0.1).abs() <= 0.01, "accuracy {acc}");
}

#[test]
fn current_teacher_rate_of_half_probability_strategy() {
    const DRAWS: usize = 10_000;
    let strategy = builtin_strategy(2).unwrap();
    let mut rng = rng_from(6, &[]);
    let mut hits = [0usize; 4];
    for _ in 0..DRAWS {
        let m = sample_tsa(&strategy, 4, &mut rng);
        for (j, h) in hits.iter_mut().enumerate() {
            *h += usize::from(m.get(0, j));
        }
    }
    // 0.5 +- 0.03 is six binomial standard deviations at n = 10000.
    for h in hits {
        let rate = h as f64 / DRAWS as f64;
        assert!((0.47..=0.53).contains(&rate), "rate {rate}");
    }
}

#[test]
fn no_drift_means_no_forgetting() {
    let synth = SynthConfig {
        seasons: 4,
        drift: 0.0,
        noise: 0.5,
        ..SynthConfig::default()
    };
    let model = SynthModel::new(&synth, 7).unwrap();
    let seq = model.sequence();
    for season in &seq.seasons[1..] {
        let acc = nearest_centroid_accuracy(&seq.seasons[0], season, synth.classes);
        assert!(acc >= 0.95, "task too hard for the oracle: {acc}");
    }
    let seq = filter_valid_classes(seq.seasons, seq.cell_size, 10).unwrap();
    let cfg = RkdConfig {
        k: 4,
        strategy: builtin_strategy(3).unwrap(),
        classifier: ClassifierConfig::new(synth.features, vec![32], seq.num_classes()),
        pretrain: TrainSpec::pretrain(),
        distill: TrainSpec::distill(),
        master_seed: 7,
        parallel: false,
    };
    let table = evaluate_sequence(&seq, &model.transfer_set(2000), &cfg, &[1]).unwrap();
    for row in &table.rows {
        assert!(row.accuracy() >= 0.9, "{row:?}");
    }
}
