//! Whole-model diagnostics: finite-difference gradient validation and the
//! prefix-causality check for inference routing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::Graph;
use crate::model::{aspect_std, Batch, Model, ModelConfig, RouterSettings, RoutingControl, RoutingMode};

/// Micro configuration used for gradient validation.
pub fn gradcheck_config(mode: RoutingMode) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 32,
        seq_len: 8,
        n_routed_experts: 4,
        granularity: 1,
        expansion: 4,
        expert_dim: 32,
        routing_mode: mode,
        ..ModelConfig::default()
    }
}

pub fn random_batch(seed: u64, batch_size: usize, seq: usize, vocab: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<Vec<usize>> = (0..batch_size)
        .map(|_| (0..=seq).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    let refs: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    Batch::from_windows(&refs).expect("equal-length windows")
}

/// Redraws every parameter, including the zero-initialized projections,
/// from its aspect-ratio normal (standard normal for the embedding).
pub fn randomize_params(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        let std = if p.name == "embed" { 1.0 } else { aspect_std(p.shape[0], p.shape[1]) };
        let dist = Normal::new(0.0, std).expect("positive std");
        p.data.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every parameter's autodiff gradient with central differences.
///
/// All parameters are redrawn from non-zero distributions so that no path is
/// trivially dead, one training pass records the routing decisions, and
/// every later evaluation replays them.
pub fn gradient_check(config: ModelConfig, aux_alpha: f64, seed: u64, step: f64) -> Result<GradCheck> {
    let settings = RouterSettings { et_warmup_steps: 0, ..RouterSettings::default() };
    let mut model = Model::<f64>::new(config.clone(), settings, seed)?;
    randomize_params(&mut model, seed ^ 0x5eed);
    let batch = random_batch(seed.wrapping_add(1), 2, config.seq_len, config.vocab_size);

    let mut g = Graph::new();
    let rec = model.forward(&mut g, &batch, &RoutingControl::Train, aux_alpha)?;
    let frozen = RoutingControl::Frozen(rec.moe);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &batch, &frozen, aux_alpha)?;
    g.backward(fwd.loss)?;
    let analytic: Vec<Vec<f64>> = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]))
        .collect();

    let mut out = GradCheck { n_checked: 0, max_rel_err: 0.0, worst_param: String::new(), worst_index: 0 };
    for j in 0..model.params().len() {
        for k in 0..model.params()[j].data.len() {
            let orig = model.params()[j].data[k];
            let eval = |x: f64, m: &mut Model<f64>| -> Result<f64> {
                m.params_mut()[j].data[k] = x;
                let mut g = Graph::new();
                let f = m.forward(&mut g, &batch, &frozen, aux_alpha)?;
                Ok(g.scalar(f.loss))
            };
            let plus = eval(orig + step, &mut model)?;
            let minus = eval(orig - step, &mut model)?;
            model.params_mut()[j].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic[j][k], numeric, 1e-6);
            out.n_checked += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst_param = model.params()[j].name.clone();
                out.worst_index = k;
            }
        }
    }
    Ok(out)
}

/// Runs inference on every prefix of each sequence and checks that the
/// routed-expert sets of the prefix tokens equal those of the full pass.
/// Returns the number of compared (layer, token) decisions.
pub fn prefix_routing_consistent(model: &mut Model<f64>, batch: &Batch) -> Result<Option<usize>> {
    let mut g = Graph::new();
    let full = model.forward(&mut g, batch, &RoutingControl::Eval, 0.0)?;
    let mut compared = 0;
    for b in 0..batch.batch_size {
        let window: Vec<usize> = batch.inputs[b * batch.seq..(b + 1) * batch.seq]
            .iter()
            .copied()
            .chain(std::iter::once(batch.targets[(b + 1) * batch.seq - 1]))
            .collect();
        for t in 1..=batch.seq {
            let prefix = Batch::from_windows(&[&window[..=t]])?;
            let mut g = Graph::new();
            let part = model.forward(&mut g, &prefix, &RoutingControl::Eval, 0.0)?;
            for (a, f) in part.moe.iter().zip(&full.moe) {
                for tok in 0..t {
                    if a.kept.experts_for(tok) != f.kept.experts_for(b * batch.seq + tok) {
                        return Ok(None);
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(Some(compared))
}
