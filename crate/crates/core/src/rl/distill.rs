use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::policy::{Observation, PolicyGrads, PolicyNetwork, PolicySpec, NUM_ACTIONS};
use super::ppo::train_ppo;
use super::RlTrainConfig;
use crate::backtest::Position;
use crate::env::TradingEnv;
use crate::error::{Error, Result};
use crate::nn::{kl_divergence, softmax_with_temperature, Adam, AdamConfig};
use crate::seed::{derive_seed, rng_for};
use crate::supervised::argmax;

/// Frozen teachers, each tagged with the training subset it saw.
#[derive(Debug, Clone)]
pub struct TeacherPool {
    teachers: Vec<PolicyNetwork>,
    subsets: Vec<String>,
    pub temperature: f64,
}

impl TeacherPool {
    pub fn new(teachers: Vec<PolicyNetwork>, subsets: Vec<String>, temperature: f64) -> Result<Self> {
        if teachers.len() != subsets.len() {
            return Err(Error::Shape(format!(
                "{} teachers but {} subset ids",
                teachers.len(),
                subsets.len()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        Ok(TeacherPool {
            teachers,
            subsets,
            temperature,
        })
    }

    pub fn teachers(&self) -> &[PolicyNetwork] {
        &self.teachers
    }

    pub fn subsets(&self) -> &[String] {
        &self.subsets
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Mean of the teachers' softened action distributions.
    pub fn soft_targets(&self, obs: &Observation, temperature: f64) -> Result<Array1<f64>> {
        if self.teachers.is_empty() {
            return Err(Error::Domain("teacher pool is empty".into()));
        }
        let mut acc = Array1::zeros(NUM_ACTIONS);
        for t in &self.teachers {
            let z = t.logits(obs)?;
            acc += &softmax_with_temperature(z.as_slice().expect("contiguous"), temperature)?;
        }
        Ok(acc / self.teachers.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    /// Mean `KL(target || student)` over the states.
    pub loss: f64,
    pub grads: PolicyGrads,
}

/// Gradients of the mean KL from the softened teacher mixture to the
/// student's softened action distribution. Only the student receives gradients.
pub fn distill_policy(
    pool: &TeacherPool,
    student: &PolicyNetwork,
    states: &[Observation],
    temperature: f64,
) -> Result<DistillOutput> {
    if pool.is_empty() {
        return Err(Error::Domain("teacher pool is empty".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if states.is_empty() {
        return Err(Error::Empty("distillation states".into()));
    }
    let mut grads = PolicyGrads::zeros_like(student);
    let mut loss = 0.0;
    for obs in states {
        let target = pool.soft_targets(obs, temperature)?;
        let (z, _, trace) = student.forward(obs.window.view(), &obs.extras)?;
        let p = softmax_with_temperature(z.as_slice().expect("contiguous"), temperature)?;
        loss += kl_divergence(target.as_slice().expect("contiguous"), p.as_slice().expect("contiguous"))?;
        let d = (&p - &target) / temperature;
        grads.add_scaled(&student.backward(&trace, &d, 0.0)?, 1.0);
    }
    let n = states.len() as f64;
    grads.scale(1.0 / n);
    Ok(DistillOutput { loss: loss / n, grads })
}

/// States visited by the pool's consensus greedy policy on each environment.
pub fn collect_states(pool: &TeacherPool, envs: &mut [TradingEnv]) -> Result<Vec<Observation>> {
    let mut states = Vec::new();
    for env in envs.iter_mut() {
        let mut s = env.reset();
        while !s.done {
            let obs = Observation::from(&s);
            let target = pool.soft_targets(&obs, pool.temperature)?;
            let a = Position::from_index(argmax(target.as_slice().expect("contiguous")))?;
            states.push(obs);
            s = env.step(a)?.next_state;
        }
    }
    Ok(states)
}

/// Minibatch Adam on the distillation loss. Returns the student and the
/// mean loss of each epoch.
pub fn train_distilled(
    pool: &TeacherPool,
    mut student: PolicyNetwork,
    states: &[Observation],
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<(PolicyNetwork, Vec<f64>)> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(adam);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let picked: Vec<Observation> = batch.iter().map(|&i| states[i].clone()).collect();
            let out = distill_policy(pool, &student, &picked, pool.temperature)?;
            total += out.loss * batch.len() as f64;
            opt.step(&mut student, &out.grads)?;
        }
        history.push(total / states.len().max(1) as f64);
    }
    Ok((student, history))
}

/// One PPO teacher per named subset, each with its own seed.
pub fn train_teacher_pool(
    subsets: Vec<(String, Vec<TradingEnv>)>,
    spec: &PolicySpec,
    config: &RlTrainConfig,
    temperature: f64,
    seed: u64,
) -> Result<TeacherPool> {
    let mut teachers = Vec::with_capacity(subsets.len());
    let mut names = Vec::with_capacity(subsets.len());
    for (name, mut envs) in subsets {
        let init = PolicyNetwork::new(spec.clone(), &mut rng_for(seed, &format!("teacher.{name}")));
        let (outcome, _) = train_ppo(&mut envs, init, config, derive_seed(seed, &format!("teacher.{name}.train")))?;
        if let Some(it) = outcome.aborted_at {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        teachers.push(outcome.policy);
        names.push(name);
    }
    TeacherPool::new(teachers, names, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBlocks;
    use ndarray::Array2;

    fn spec() -> PolicySpec {
        PolicySpec::new(2, 2, &[4], None).unwrap()
    }

    fn states() -> Vec<Observation> {
        (0..4)
            .map(|i| Observation {
                window: Array2::from_shape_fn((2, 2), |(r, c)| (i + r) as f64 * 0.4 - c as f64 * 0.3),
                extras: vec![0.0, 1.0, 0.0, 0.0],
            })
            .collect()
    }

    #[test]
    fn identical_student_has_zero_loss_and_gradient() {
        let teacher = PolicyNetwork::new(spec(), &mut rng_for(4, "t"));
        let pool = TeacherPool::new(vec![teacher.clone()], vec!["A".into()], 2.0).unwrap();
        let out = distill_policy(&pool, &teacher, &states(), 2.0).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert!(out.grads.blocks().iter().all(|b| b.data.iter().all(|v| v.abs() < 1e-15)));
    }

    #[test]
    fn empty_pool_is_a_domain_error() {
        let pool = TeacherPool::new(vec![], vec![], 1.0).unwrap();
        let student = PolicyNetwork::zeros(spec());
        assert!(matches!(distill_policy(&pool, &student, &states(), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn opposed_confident_teachers_mix_to_half_and_half() {
        let mut long = PolicyNetwork::zeros(spec());
        long.policy.bias[2] = 50.0;
        let mut short = PolicyNetwork::zeros(spec());
        short.policy.bias[0] = 50.0;
        let pool = TeacherPool::new(vec![long, short], vec!["A".into(), "B".into()], 0.05).unwrap();
        let t = pool.soft_targets(&states()[0], 0.05).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-12 && t[1].abs() < 1e-12 && (t[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distillation_reduces_loss() {
        let teacher = PolicyNetwork::new(spec(), &mut rng_for(5, "t"));
        let pool = TeacherPool::new(vec![teacher], vec!["A".into()], 1.0).unwrap();
        let student = PolicyNetwork::new(spec(), &mut rng_for(6, "s"));
        let adam = AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() };
        let (_, hist) = train_distilled(&pool, student, &states(), 60, 2, adam, 1).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
    }
}
