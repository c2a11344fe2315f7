use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::training::{epoch_row, single_class_warning, EpochMetrics, TrainConfig};
use super::{one_hot, LabeledWindows, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax, softmax_with_temperature, Network, NetworkGrads, NetworkSpec};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfDistillation {
    #[default]
    Off,
    /// Teachers mix their own softened output into the hard label.
    TeachersSd,
    /// Teachers as above, and the student mixes its own output into the soft labels.
    TeachersStudentSd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OkdConfig {
    pub teachers: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub self_distillation: SelfDistillation,
    pub sd_mix: f64,
}

impl Default for OkdConfig {
    fn default() -> Self {
        OkdConfig {
            teachers: 3,
            temperature: 2.0,
            lambda: 1.0,
            self_distillation: SelfDistillation::Off,
            sd_mix: 0.5,
        }
    }
}

impl OkdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teachers == 0 {
            return Err(Error::Config("okd needs at least one teacher".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.sd_mix) {
            return Err(Error::Config(format!("sd_mix must lie in [0, 1], got {}", self.sd_mix)));
        }
        Ok(())
    }
}

/// Mean of the teacher distributions.
pub fn soft_labels(teacher_probabilities: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = teacher_probabilities
        .first()
        .ok_or_else(|| Error::Domain("soft labels need at least one teacher".into()))?;
    let mut acc = Array1::zeros(first.len());
    for p in teacher_probabilities {
        if p.len() != first.len() {
            return Err(Error::Shape(format!(
                "teacher distributions of length {} and {}",
                first.len(),
                p.len()
            )));
        }
        acc += p;
    }
    Ok(acc / teacher_probabilities.len() as f64)
}

#[derive(Debug, Clone)]
pub struct OkdStepOutput {
    pub teacher_grads: Vec<NetworkGrads>,
    pub student_grads: NetworkGrads,
    /// Weighted mean hard-label loss per teacher, before the `lambda` factor.
    pub teacher_losses: Vec<f64>,
    pub student_loss: f64,
}

impl OkdStepOutput {
    pub fn total_loss(&self, lambda: f64) -> f64 {
        self.student_loss + lambda * self.teacher_losses.iter().sum::<f64>()
    }
}

fn mix(target: &mut [f64], own: &Array1<f64>, weight: f64) {
    for (t, o) in target.iter_mut().zip(own) {
        *t = (1.0 - weight) * *t + weight * o;
    }
}

/// Gradients for every network on one minibatch.
///
/// `teacher_weights[k][i]` scales sample `i` in teacher `k`'s loss, which is
/// how bootstrap resampling enters; `None` weighs every sample equally. The
/// student term sees teacher outputs only as constants.
pub fn okd_step(
    data: &LabeledWindows,
    batch: &[usize],
    teacher_weights: Option<&[Vec<f64>]>,
    teachers: &[Network],
    student: &Network,
    config: &OkdConfig,
) -> Result<OkdStepOutput> {
    config.validate()?;
    if teachers.is_empty() {
        return Err(Error::Domain("okd needs at least one teacher".into()));
    }
    for (k, t) in teachers.iter().enumerate() {
        let (a, b) = (t.spec(), student.spec());
        if (a.input_rows, a.input_cols, a.extra_inputs, a.output_dim)
            != (b.input_rows, b.input_cols, b.extra_inputs, b.output_dim)
        {
            return Err(Error::Shape(format!("teacher {k} and student dimensions differ")));
        }
    }
    if student.output_dim() != NUM_CLASSES {
        return Err(Error::Shape(format!(
            "student outputs {} classes, labels have {NUM_CLASSES}",
            student.output_dim()
        )));
    }
    if let Some(w) = teacher_weights {
        if w.len() != teachers.len() || w.iter().any(|v| v.len() != data.len()) {
            return Err(Error::Shape("teacher weights must be teachers × samples".into()));
        }
    }
    if batch.is_empty() {
        return Err(Error::Empty("okd batch".into()));
    }
    let temp = config.temperature;
    let n = teachers.len();
    let mut teacher_grads: Vec<NetworkGrads> = teachers.iter().map(NetworkGrads::zeros_like).collect();
    let mut teacher_loss_sum = vec![0.0; n];
    let mut teacher_weight_sum = vec![0.0; n];
    let mut student_grads = NetworkGrads::zeros_like(student);
    let mut student_loss = 0.0;

    for &i in batch {
        let window = data.windows[i].matrix.view();
        let y = one_hot(data.labels[i].index());
        let mut softened = Vec::with_capacity(n);
        for (k, teacher) in teachers.iter().enumerate() {
            let (logits, trace) = teacher.forward(window, &[])?;
            let z = logits.as_slice().expect("contiguous");
            let p_soft = softmax_with_temperature(z, temp)?;
            let weight = teacher_weights.map_or(1.0, |w| w[k][i]);
            if weight > 0.0 {
                let mut target = y;
                if config.self_distillation != SelfDistillation::Off {
                    mix(&mut target, &p_soft, config.sd_mix);
                }
                let p = softmax(z);
                teacher_loss_sum[k] += weight * cross_entropy(&target, p.as_slice().expect("contiguous"))?;
                teacher_weight_sum[k] += weight;
                if config.lambda > 0.0 {
                    let d = (&p - &Array1::from(target.to_vec())) * (config.lambda * weight);
                    teacher_grads[k].add_scaled(&teacher.backward(&trace, &d)?.grads, 1.0);
                }
            }
            softened.push(p_soft);
        }

        let mut target = soft_labels(&softened)?.to_vec();
        let (logits, trace) = student.forward(window, &[])?;
        let p_s = softmax_with_temperature(logits.as_slice().expect("contiguous"), temp)?;
        if config.self_distillation == SelfDistillation::TeachersStudentSd {
            mix(&mut target, &p_s, config.sd_mix);
        }
        student_loss += cross_entropy(&target, p_s.as_slice().expect("contiguous"))?;
        let d = (&p_s - &Array1::from(target)) / temp;
        student_grads.add_scaled(&student.backward(&trace, &d)?.grads, 1.0);
    }

    let mut teacher_losses = Vec::with_capacity(n);
    for k in 0..n {
        let w = teacher_weight_sum[k];
        if w > 0.0 {
            teacher_grads[k].scale(1.0 / w);
            teacher_losses.push(teacher_loss_sum[k] / w);
        } else {
            teacher_losses.push(0.0);
        }
    }
    student_grads.scale(1.0 / batch.len() as f64);
    Ok(OkdStepOutput {
        teacher_grads,
        student_grads,
        teacher_losses,
        student_loss: student_loss / batch.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct OkdOutcome {
    pub teachers: Vec<Network>,
    pub student: Network,
    pub history: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

/// Bootstrap multiplicities: how many times each sample was drawn.
fn bootstrap_counts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    counts
}

/// `count` independently seeded networks plus a student, all sharing `spec`.
pub fn init_okd_networks(spec: &NetworkSpec, count: usize, seed: u64) -> (Vec<Network>, Network) {
    let teachers = (0..count)
        .map(|k| Network::new(spec.clone(), &mut rng_for(seed, &format!("teacher.{k}"))))
        .collect();
    let student = Network::new(spec.clone(), &mut rng_for(seed, "student"));
    (teachers, student)
}

/// Trains teachers and student together in a single phase. History rows
/// describe the student.
pub fn train_okd(
    train: &LabeledWindows,
    validation: Option<&LabeledWindows>,
    mut teachers: Vec<Network>,
    mut student: Network,
    train_config: &TrainConfig,
    okd_config: &OkdConfig,
    seed: u64,
) -> Result<OkdOutcome> {
    train_config.validate()?;
    okd_config.validate()?;
    if teachers.len() != okd_config.teachers {
        return Err(Error::Config(format!(
            "configured {} teachers but {} were given",
            okd_config.teachers,
            teachers.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let warnings: Vec<String> = single_class_warning(train).into_iter().collect();
    let weights: Vec<Vec<f64>> = (0..teachers.len())
        .map(|k| bootstrap_counts(train.len(), &mut rng_for(seed, &format!("bootstrap.{k}"))))
        .collect();
    let mut shuffle_rng = rng_for(seed, "okd.shuffle");
    let mut teacher_opts: Vec<_> = teachers.iter().map(|_| train_config.optimizer()).collect();
    let mut student_opt = train_config.optimizer();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(train_config.batch_size) {
            let out = okd_step(train, batch, Some(&weights), &teachers, &student, okd_config)?;
            for ((t, opt), g) in teachers.iter_mut().zip(&mut teacher_opts).zip(&out.teacher_grads) {
                opt.step(t, g)?;
            }
            student_opt.step(&mut student, &out.student_grads)?;
        }
        history.push(epoch_row(epoch, "train", &student, train)?);
        if let Some(val) = validation {
            history.push(epoch_row(epoch, "validation", &student, val)?);
        }
    }
    Ok(OkdOutcome {
        teachers,
        student,
        history,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::Position;
    use crate::market_data::FeatureWindow;
    use ndarray::{array, Array2};

    #[test]
    fn soft_label_examples() {
        let s = soft_labels(&[array![1.0, 0.0, 0.0], array![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(s, array![0.5, 0.5, 0.0]);
        let q = array![0.2, 0.3, 0.5];
        assert_eq!(soft_labels(&[q.clone()]).unwrap(), q);
        let u = Array1::from_elem(3, 1.0 / 3.0);
        let s = soft_labels(&[u.clone(), u.clone(), u.clone()]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(soft_labels(&[]), Err(Error::Domain(_))));
    }

    fn toy_data() -> LabeledWindows {
        let windows = (0..6)
            .map(|i| FeatureWindow {
                matrix: Array2::from_shape_fn((2, 2), |(r, c)| (i * 3 + r * 2 + c) as f64 * 0.1 - 0.5),
                timestamps: vec![i as i64, i as i64 + 1],
                end_timestamp: i as i64 + 1,
                target_index: i + 2,
            })
            .collect();
        let labels = [Position::Long, Position::Short, Position::Flat, Position::Long, Position::Flat, Position::Short];
        LabeledWindows::new(windows, labels.to_vec()).unwrap()
    }

    fn small_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::classifier(2, 2, 3);
        spec.hidden = vec![5];
        spec
    }

    #[test]
    fn zero_lambda_gives_zero_teacher_gradients() {
        let data = toy_data();
        let (teachers, student) = init_okd_networks(&small_spec(), 2, 3);
        let cfg = OkdConfig { teachers: 2, lambda: 0.0, ..OkdConfig::default() };
        let out = okd_step(&data, &[0, 1, 2, 3], None, &teachers, &student, &cfg).unwrap();
        for g in &out.teacher_grads {
            assert_eq!(*g, NetworkGrads::zeros_like(&teachers[0]));
        }
        assert!(out.student_grads != NetworkGrads::zeros_like(&student));
    }

    #[test]
    fn fixed_teacher_reduces_to_plain_distillation() {
        let data = toy_data();
        let spec = small_spec();
        let mut teacher = Network::zeros(spec.clone());
        let q = [0.2, 0.3, 0.5];
        let last = teacher.layers.last_mut().unwrap();
        for (b, v) in last.bias.iter_mut().zip(q) {
            *b = f64::ln(v);
        }
        let student = Network::new(spec, &mut rng_for(1, "s"));
        let cfg = OkdConfig { teachers: 1, temperature: 1.0, ..OkdConfig::default() };
        let out = okd_step(&data, &[4], None, &[teacher], &student, &cfg).unwrap();
        let z = student.predict(data.windows[4].matrix.view(), &[]).unwrap();
        let p_s = softmax(z.as_slice().unwrap());
        let expected = cross_entropy(&q, p_s.as_slice().unwrap()).unwrap();
        assert!((out.student_loss - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let data = toy_data();
        let (teachers, _) = init_okd_networks(&small_spec(), 1, 3);
        let student = Network::zeros(NetworkSpec::classifier(3, 2, 3));
        let cfg = OkdConfig { teachers: 1, ..OkdConfig::default() };
        assert!(matches!(
            okd_step(&data, &[0], None, &teachers, &student, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn okd_training_is_deterministic() {
        let data = toy_data();
        let cfg = OkdConfig { teachers: 2, self_distillation: SelfDistillation::TeachersStudentSd, ..OkdConfig::default() };
        let tc = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
        let run = || {
            let (t, s) = init_okd_networks(&small_spec(), 2, 11);
            train_okd(&data, None, t, s, &tc, &cfg, 11).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.student, b.student);
        assert_eq!(a.history, b.history);
    }
}
