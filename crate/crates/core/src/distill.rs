//! Soft-target distillation: the temperature-scaled cross-entropy between
//! teacher and student distributions, multi-teacher target averaging, and
//! the two training loops (hard-label pretraining, soft-target distillation).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    adam_step, hard_loss_and_grad, init_params, temp_softmax, AdamConfig, AdamState,
    ClassifierConfig, ClassifierParams, Gradients,
};
use crate::data::SeasonDataset;
use crate::error::{Result, RkdError};
use crate::seed::{rng_from, SeedRng};

/// Lower bound applied to `q_i` before taking its log.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const PRETRAIN: Temperature = Temperature(1.0);
    pub const DISTILL: Temperature = Temperature(10.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Temperature(value))
        } else {
            Err(RkdError::invalid(format!(
                "temperature must be positive, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = RkdError;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Unlabeled corpus on which teacher and student outputs are matched.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransferSet {
    features: Vec<Vec<f64>>,
}

impl TransferSet {
    pub fn new(features: Vec<Vec<f64>>) -> Self {
        TransferSet { features }
    }

    pub fn from_season(season: &SeasonDataset) -> Self {
        TransferSet::new(season.samples.iter().map(|s| s.features.clone()).collect())
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self.features.iter().position(|f| f.len() != dim) {
            Some(i) => Err(RkdError::invalid(format!(
                "transfer sample {i} has {} features, expected {dim}",
                self.features[i].len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: Temperature,
    pub shuffle_seed: u64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl TrainSpec {
    pub fn pretrain() -> Self {
        TrainSpec {
            epochs: 30,
            batch_size: 32,
            temperature: Temperature::PRETRAIN,
            shuffle_seed: 0,
            optimizer: AdamConfig::default(),
        }
    }

    pub fn distill() -> Self {
        TrainSpec {
            temperature: Temperature::DISTILL,
            ..TrainSpec::pretrain()
        }
    }

    pub fn with_seed(&self, shuffle_seed: u64) -> Self {
        TrainSpec {
            shuffle_seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RkdError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        self.optimizer.validate()
    }
}

fn check_distribution_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(RkdError::invalid(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `-Σ p_i log q_i`, with `q_i` floored at [`LOG_FLOOR`].
pub fn soft_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution_pair(p, q)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi != 0.0)
        .map(|(pi, qi)| pi * qi.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Gradient of `soft_loss(p, softmax(z / T))` with respect to `z`: `(q - p) / T`.
pub fn soft_loss_grad(z: &[f64], p: &[f64], temperature: Temperature) -> Result<Vec<f64>> {
    check_distribution_pair(p, z)?;
    let t = temperature.value();
    let q = temp_softmax(z, t)?;
    Ok(q.iter().zip(p).map(|(qi, pi)| (qi - pi) / t).collect())
}

fn mean_distribution<'a>(mut dists: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let first = dists.next().expect("at least one distribution");
    let mut sum = first.to_vec();
    let mut n = 1usize;
    for d in dists {
        sum.iter_mut().zip(d).for_each(|(s, v)| *s += v);
        n += 1;
    }
    let n = n as f64;
    sum.into_iter().map(|s| s / n).collect()
}

fn check_teachers(teachers: &[&ClassifierParams]) -> Result<usize> {
    let first = teachers
        .first()
        .ok_or_else(|| RkdError::invalid("at least one teacher is required"))?;
    let classes = first.num_classes();
    if teachers.iter().any(|t| t.num_classes() != classes) {
        return Err(RkdError::invalid(
            "teachers disagree on the number of classes",
        ));
    }
    Ok(classes)
}

/// Uniform mean over teachers of each teacher's eval-mode softmax at temperature `T`.
pub fn multi_teacher_targets(
    teachers: &[&ClassifierParams],
    features: &[f64],
    temperature: Temperature,
) -> Result<Vec<f64>> {
    check_teachers(teachers)?;
    let per_teacher = teachers
        .iter()
        .map(|t| temp_softmax(&t.logits(features)?, temperature.value()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_distribution(per_teacher.iter().map(Vec::as_slice)))
}

/// Soft targets of one teacher over a whole transfer set.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    pub rows: Vec<Vec<f64>>,
}

impl TargetTable {
    pub fn for_teacher(
        teacher: &ClassifierParams,
        transfer: &TransferSet,
        temperature: Temperature,
    ) -> Result<Self> {
        transfer.check_dim(teacher.input_dim())?;
        let rows = transfer
            .features()
            .iter()
            .map(|x| temp_softmax(&teacher.logits(x)?, temperature.value()))
            .collect::<Result<_>>()?;
        Ok(TargetTable { rows })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.rows.first().map(Vec::len)
    }

    /// Row-wise uniform mean, summed in the given order. Matches
    /// [`multi_teacher_targets`] bit for bit when tables are listed in the
    /// same order as the teachers.
    pub fn mean(tables: &[&TargetTable]) -> Result<TargetTable> {
        let first = tables
            .first()
            .ok_or_else(|| RkdError::invalid("at least one teacher is required"))?;
        if tables.iter().any(|t| t.rows.len() != first.rows.len()) {
            return Err(RkdError::invalid("target tables differ in length"));
        }
        let rows = (0..first.rows.len())
            .map(|i| mean_distribution(tables.iter().map(|t| t.rows[i].as_slice())))
            .collect();
        Ok(TargetTable { rows })
    }
}

/// Shuffled mini-batch Adam loop shared by pretraining and distillation.
/// `per_sample` traces one example with the supplied dropout RNG, adds its
/// gradient into the accumulator and returns its loss.
fn train_epochs<F>(
    params: &mut ClassifierParams,
    num_samples: usize,
    spec: &TrainSpec,
    mut per_sample: F,
) -> Result<()>
where
    F: FnMut(&ClassifierParams, usize, &mut SeedRng, &mut Gradients) -> Result<f64>,
{
    spec.validate()?;
    if num_samples == 0 {
        return Ok(());
    }
    let mut state = AdamState::new(params, spec.optimizer);
    let mut order: Vec<usize> = (0..num_samples).collect();
    for epoch in 0..spec.epochs as u64 {
        let mut shuffle = rng_from(spec.shuffle_seed, &[epoch, 0]);
        let mut dropout = rng_from(spec.shuffle_seed, &[epoch, 1]);
        order.shuffle(&mut shuffle);
        for batch in order.chunks(spec.batch_size) {
            let mut grads = Gradients::zeros_like(params);
            for &i in batch {
                per_sample(params, i, &mut dropout, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(params, &grads, &mut state)?;
        }
    }
    Ok(())
}

/// Trains a fresh classifier on labeled data with the T=1 hard-label loss.
pub fn pretrain(
    config: &ClassifierConfig,
    data: &SeasonDataset,
    spec: &TrainSpec,
) -> Result<ClassifierParams> {
    if spec.temperature != Temperature::PRETRAIN {
        return Err(RkdError::invalid(format!(
            "pretraining runs at temperature 1, got {}",
            spec.temperature.value()
        )));
    }
    if data.is_empty() {
        return Err(RkdError::invalid(format!(
            "season {} has no training samples",
            data.season_index
        )));
    }
    let labeled = data.labeled()?;
    if let Some((_, c)) = labeled.iter().find(|(_, c)| *c >= config.num_classes) {
        return Err(RkdError::invalid(format!(
            "label {c} out of range for {} classes",
            config.num_classes
        )));
    }
    let mut params = init_params(config)?;
    if let Some((x, _)) = labeled.iter().find(|(x, _)| x.len() != config.input_dim) {
        return Err(RkdError::invalid(format!(
            "sample has {} features, expected {}",
            x.len(),
            config.input_dim
        )));
    }
    train_epochs(&mut params, labeled.len(), spec, |p, i, rng, grads| {
        let (x, class) = labeled[i];
        let trace = p.forward_trace(x, Some(rng))?;
        let (loss, dz) = hard_loss_and_grad(&trace.logits, class)?;
        p.backward(&trace, &dz, grads);
        Ok(loss)
    })?;
    Ok(params)
}

/// Mean soft loss and mean parameter gradient of an eval-mode student over
/// `indices` of the transfer set.
pub fn soft_batch_objective(
    student: &ClassifierParams,
    transfer: &TransferSet,
    targets: &TargetTable,
    indices: &[usize],
    temperature: Temperature,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(student);
    let mut loss = 0.0;
    for &i in indices {
        let trace = student.forward_trace(&transfer.features()[i], None)?;
        let q = temp_softmax(&trace.logits, temperature.value())?;
        loss += soft_loss(&targets.rows[i], &q)?;
        let dz = soft_loss_grad(&trace.logits, &targets.rows[i], temperature)?;
        student.backward(&trace, &dz, &mut grads);
    }
    let n = indices.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Trains `student_init` to match precomputed soft targets over the transfer set.
pub fn distill_from_targets(
    student_init: ClassifierParams,
    transfer: &TransferSet,
    targets: &TargetTable,
    spec: &TrainSpec,
) -> Result<ClassifierParams> {
    transfer.check_dim(student_init.input_dim())?;
    if targets.rows.len() != transfer.len() {
        return Err(RkdError::invalid(
            "target table does not cover the transfer set",
        ));
    }
    if let Some(c) = targets.num_classes() {
        if c != student_init.num_classes() {
            return Err(RkdError::invalid(format!(
                "teachers predict {c} classes, student predicts {}",
                student_init.num_classes()
            )));
        }
    }
    let t = spec.temperature;
    let mut student = student_init;
    train_epochs(&mut student, transfer.len(), spec, |p, i, rng, grads| {
        let trace = p.forward_trace(&transfer.features()[i], Some(rng))?;
        let target = &targets.rows[i];
        let dz = soft_loss_grad(&trace.logits, target, t)?;
        p.backward(&trace, &dz, grads);
        soft_loss(target, &temp_softmax(&trace.logits, t.value())?)
    })?;
    Ok(student)
}

/// Distills the averaged soft targets of `teachers` into `student_init` on
/// the transfer set. Soft loss only; no hard-label term.
pub fn distill_student(
    student_init: ClassifierParams,
    teachers: &[&ClassifierParams],
    transfer: &TransferSet,
    spec: &TrainSpec,
) -> Result<ClassifierParams> {
    let classes = check_teachers(teachers)?;
    if classes != student_init.num_classes() {
        return Err(RkdError::invalid(format!(
            "teachers predict {classes} classes, student predicts {}",
            student_init.num_classes()
        )));
    }
    let tables = teachers
        .iter()
        .map(|t| TargetTable::for_teacher(t, transfer, spec.temperature))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TargetTable> = tables.iter().collect();
    let targets = TargetTable::mean(&refs)?;
    distill_from_targets(student_init, transfer, &targets, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierConfig, Dense};
    use crate::data::{Sample, Viewpoint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn soft_loss_examples() {
        assert!((soft_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let u = [0.25; 4];
        assert!((soft_loss(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(soft_loss(&[1.0], &[0.5, 0.5]).is_err());
        // Zero teacher mass on a zero student entry stays finite.
        assert_eq!(soft_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(soft_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    fn random_dist(rng: &mut SeedRng, n: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..n)
            .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        temp_softmax(&z, 1.0).unwrap()
    }

    #[test]
    fn self_loss_is_entropy_and_gibbs_holds() {
        let mut rng = SeedRng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(2..10);
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            let h = entropy(&p);
            assert!((soft_loss(&p, &p).unwrap() - h).abs() < 1e-12);
            assert!(soft_loss(&p, &q).unwrap() >= h - 1e-9);
        }
    }

    #[test]
    fn soft_grad_zero_at_match() {
        let z = [0.3, -1.2, 2.0];
        for t in [1.0, 10.0] {
            let t = Temperature::new(t).unwrap();
            let p = temp_softmax(&z, t.value()).unwrap();
            let g = soft_loss_grad(&z, &p, t).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-16));
        }
        assert!(soft_loss_grad(&z, &[0.5, 0.5], Temperature::DISTILL).is_err());
    }

    proptest! {
        #[test]
        fn soft_grad_sums_to_zero(
            z in proptest::collection::vec(-20.0f64..20.0, 2..10),
            raw in proptest::collection::vec(0.0f64..1.0, 10),
            t in 0.5f64..20.0,
        ) {
            let p = temp_softmax(&raw[..z.len()], 0.3).unwrap();
            let g = soft_loss_grad(&z, &p, Temperature::new(t).unwrap()).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_rejects_non_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<Temperature>("-2.0").is_err());
    }

    fn linear(weights: Vec<f64>) -> ClassifierParams {
        let config = ClassifierConfig::new(1, vec![], 2);
        let layer = Dense {
            in_dim: 1,
            out_dim: 2,
            weights,
            bias: vec![0.0, 0.0],
        };
        ClassifierParams::from_layers(config, vec![layer]).unwrap()
    }

    #[test]
    fn multi_teacher_examples() {
        let a = linear(vec![1.0, -1.0]);
        let one = multi_teacher_targets(&[&a], &[0.7], Temperature::DISTILL).unwrap();
        let direct = temp_softmax(&a.logits(&[0.7]).unwrap(), 10.0).unwrap();
        assert_eq!(one, direct);
        let many = multi_teacher_targets(&[&a, &a, &a], &[0.7], Temperature::DISTILL).unwrap();
        for (x, y) in many.iter().zip(&one) {
            assert!((x - y).abs() < 1e-15);
        }
        // Near one-hot in opposite directions averages to uniform.
        let b = linear(vec![-1.0, 1.0]);
        let mix = multi_teacher_targets(&[&a, &b], &[1e4], Temperature::PRETRAIN).unwrap();
        assert_eq!(mix, vec![0.5, 0.5]);
        assert!(multi_teacher_targets(&[], &[0.0], Temperature::PRETRAIN).is_err());
    }

    fn blobs(n: usize, seed: u64) -> SeasonDataset {
        let mut rng = SeedRng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let class = i % 2;
                let c = if class == 0 { -3.0 } else { 3.0 };
                let mut s = Sample::new(
                    Viewpoint::new(0.0, 0.0),
                    vec![
                        c + rng.sample::<f64, _>(StandardNormal),
                        c + rng.sample::<f64, _>(StandardNormal),
                    ],
                );
                s.class_id = Some(class);
                s
            })
            .collect();
        SeasonDataset::new(1, "toy", samples)
    }

    #[test]
    fn pretrain_zero_epochs_is_init() {
        let cfg = ClassifierConfig::new(2, vec![8], 2);
        let spec = TrainSpec {
            epochs: 0,
            ..TrainSpec::pretrain()
        };
        let p = pretrain(&cfg, &blobs(20, 1), &spec).unwrap();
        assert_eq!(p, init_params(&cfg).unwrap());
    }

    #[test]
    fn pretrain_contract_errors() {
        let cfg = ClassifierConfig::new(2, vec![8], 2);
        let mut data = blobs(20, 1);
        assert!(pretrain(&cfg, &data, &TrainSpec::distill()).is_err());
        data.samples[3].class_id = None;
        assert!(pretrain(&cfg, &data, &TrainSpec::pretrain()).is_err());
        let empty = SeasonDataset::new(1, "e", vec![]);
        assert!(pretrain(&cfg, &empty, &TrainSpec::pretrain()).is_err());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cfg = ClassifierConfig::new(2, vec![8], 2);
        let spec = TrainSpec {
            epochs: 3,
            ..TrainSpec::pretrain()
        };
        let a = pretrain(&cfg, &blobs(64, 2), &spec).unwrap();
        let b = pretrain(&cfg, &blobs(64, 2), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distill_rejects_mismatched_teachers() {
        let student = init_params(&ClassifierConfig::new(1, vec![], 3)).unwrap();
        let teacher = linear(vec![1.0, -1.0]);
        let transfer = TransferSet::new(vec![vec![0.1], vec![0.2]]);
        assert!(distill_student(
            student.clone(),
            &[&teacher],
            &transfer,
            &TrainSpec::distill()
        )
        .is_err());
        assert!(distill_student(student, &[], &transfer, &TrainSpec::distill()).is_err());
    }

    #[test]
    fn distill_from_self_starts_at_entropy() {
        let teacher = init_params(&ClassifierConfig::new(2, vec![6], 3).with_seed(4)).unwrap();
        let transfer = TransferSet::new(
            (0..40)
                .map(|i| vec![(i as f64).sin(), (i as f64).cos()])
                .collect(),
        );
        let targets = TargetTable::for_teacher(&teacher, &transfer, Temperature::DISTILL).unwrap();
        let idx: Vec<usize> = (0..transfer.len()).collect();
        let (loss, grads) =
            soft_batch_objective(&teacher, &transfer, &targets, &idx, Temperature::DISTILL)
                .unwrap();
        let mean_entropy = targets.rows.iter().map(|p| entropy(p)).sum::<f64>() / idx.len() as f64;
        assert!((loss - mean_entropy).abs() < 1e-12);
        assert!(grads.norm() < 1e-8);
    }

    #[test]
    fn table_mean_matches_per_sample_targets() {
        let t1 = init_params(&ClassifierConfig::new(2, vec![4], 3).with_seed(1)).unwrap();
        let t2 = init_params(&ClassifierConfig::new(2, vec![4], 3).with_seed(2)).unwrap();
        let transfer = TransferSet::new(vec![vec![0.5, -0.25], vec![3.0, 1.0]]);
        let a = TargetTable::for_teacher(&t1, &transfer, Temperature::DISTILL).unwrap();
        let b = TargetTable::for_teacher(&t2, &transfer, Temperature::DISTILL).unwrap();
        let mean = TargetTable::mean(&[&a, &b]).unwrap();
        for (i, x) in transfer.features().iter().enumerate() {
            let direct = multi_teacher_targets(&[&t1, &t2], x, Temperature::DISTILL).unwrap();
            assert_eq!(mean.rows[i], direct);
        }
    }
}
