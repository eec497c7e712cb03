//! Finite-difference checks of the model gradients on a tiny network.
//!
//! Three objectives are checked per seed, each against central differences
//! of its forward value only:
//! the supervised query loss (first order, every non-generator tensor),
//! the adapted query loss with respect to head weights (the gradient runs
//! through the recorded inner step), and the same loss with respect to the
//! generator, whose only path is the soft labels of the inner step.

use std::collections::BTreeMap;

use metatrack_autodiff::gradcheck::relative_error;
use metatrack_autodiff::suite::{FIRST_ORDER_TOLERANCE, SECOND_ORDER_TOLERANCE};
use metatrack_autodiff::Tensor;
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::Result;
use crate::labels::SupportExample;
use crate::meta::{adapted_query_loss, supervised_gradients, task_gradients, LossWeights, MetaConfig};
use crate::nets::{ModelParams, NetConfig, ParamGroup};
use crate::rng::Seed;
use crate::synthdata::{generate_sequence, make_task, QueryExample, SeqParams};

/// Inner step size used by the checks; large enough that the second-order
/// terms are far above finite-difference noise.
pub const CHECK_ALPHA: f64 = 0.05;
/// Central-difference step. The network has thousands of ReLU units, so
/// steps much larger than this regularly straddle a kink.
pub const MODEL_STEP: f64 = 1e-6;
/// Coordinates sampled per tensor.
pub const COORDS_PER_TENSOR: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Supervised,
    MetaHeads,
    MetaGenerator,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Supervised => "supervised",
            Objective::MetaHeads => "meta_heads",
            Objective::MetaGenerator => "meta_generator",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Objective::Supervised => FIRST_ORDER_TOLERANCE,
            Objective::MetaHeads | Objective::MetaGenerator => SECOND_ORDER_TOLERANCE,
        }
    }

    fn covers(self, name: &str) -> bool {
        match (self, ParamGroup::of(name)) {
            (Objective::Supervised, Some(g)) => g != ParamGroup::Generator,
            (Objective::MetaHeads, Some(ParamGroup::Head(_))) => true,
            (Objective::MetaGenerator, Some(ParamGroup::Generator)) => true,
            _ => false,
        }
    }
}

pub const OBJECTIVES: [Objective; 3] = [Objective::Supervised, Objective::MetaHeads, Objective::MetaGenerator];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheck {
    pub objective: Objective,
    pub seed: u64,
    pub coordinates: usize,
    pub relative_error: f64,
}

impl ModelCheck {
    pub fn passes(&self) -> bool {
        self.relative_error <= self.objective.tolerance()
    }
}

/// A random tiny model with a two-example support set and two queries.
/// Every parameter, biases included, is jittered away from its
/// initialization: with zero biases some units sit exactly on a ReLU kink
/// and the two sides of a central difference disagree.
pub fn tiny_task(seed: u64) -> Result<(ModelParams, Vec<SupportExample>, Vec<QueryExample>)> {
    let config = NetConfig::tiny();
    let mut model = ModelParams::init(config.clone(), Seed(seed).child("model"))?;
    let mut rng = Seed(seed).child("jitter").rng();
    let names: Vec<String> = model.names().map(str::to_string).collect();
    for name in names {
        let mut t = model.get(&name).expect("listed").clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        model.set(&name, t)?;
    }
    let seq = generate_sequence(Seed(seed).child("sequence").0, &SeqParams { length: 4, ..SeqParams::default() })?;
    let task = make_task(&seq, 2, 2, &config, &mut Seed(seed).child("task").rng())?;
    Ok((model, task.support, task.query))
}

fn perturbed(model: &ModelParams, name: &str, index: usize, delta: f64) -> Result<ModelParams> {
    let mut m = model.clone();
    let mut t = m.get(name).expect("known tensor").clone();
    t.data_mut()[index] += delta;
    m.set(name, t)?;
    Ok(m)
}

/// Runs the check of one objective at one seed.
pub fn check_model(objective: Objective, seed: u64) -> Result<ModelCheck> {
    let (model, support, query) = tiny_task(seed)?;
    let cfg = MetaConfig { alpha: CHECK_ALPHA, support_size: 2, query_size: 2, ..MetaConfig::default() };
    let weights = LossWeights::default();
    let value = |m: &ModelParams| -> Result<f64> {
        Ok(match objective {
            Objective::Supervised => supervised_gradients(m, &query, &weights)?.query.total,
            _ => adapted_query_loss(m, &support, &query, &cfg)?.total,
        })
    };
    let grads: BTreeMap<String, Tensor> = match objective {
        Objective::Supervised => supervised_gradients(&model, &query, &weights)?.grads,
        _ => task_gradients(&model, &support, &query, &cfg)?.grads,
    };
    let mut rng = Seed(seed).child(objective.name()).rng();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (name, g) in grads.iter().filter(|(n, _)| objective.covers(n)) {
        let picks = sample(&mut rng, g.len(), COORDS_PER_TENSOR.min(g.len()));
        for i in picks.iter() {
            let plus = value(&perturbed(&model, name, i, MODEL_STEP)?)?;
            let minus = value(&perturbed(&model, name, i, -MODEL_STEP)?)?;
            analytic.push(g.data()[i]);
            numeric.push((plus - minus) / (2.0 * MODEL_STEP));
        }
    }
    let n = analytic.len();
    let err = relative_error(&Tensor::from_vec(analytic), &Tensor::from_vec(numeric));
    Ok(ModelCheck { objective, seed, coordinates: n, relative_error: err })
}
