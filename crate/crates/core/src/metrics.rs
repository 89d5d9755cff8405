//! Opponent-model diagnostics against the known prey policy.
//!
//! These functions read the ground truth and so must stay out of the
//! learning path. They are pure and never touch parameters.

use crate::diffcore::ActionDistribution;
use crate::error::{Error, Result};
use crate::oppmodel::OpponentModel;

/// Floor applied to predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `KL(truth ‖ predicted)`, with predicted entries floored at [`PROB_FLOOR`].
pub fn kld(truth: &ActionDistribution, predicted: &ActionDistribution) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::config(format!(
            "cannot compare distributions over {} and {} actions",
            truth.len(),
            predicted.len()
        )));
    }
    Ok(truth
        .probs()
        .iter()
        .zip(predicted.probs())
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t / p.max(PROB_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Fraction of samples whose argmax prediction equals the realised action.
/// `Ok(None)` when the model width differs from the true action count.
pub fn prediction_accuracy(samples: &[(usize, &ActionDistribution)], true_actions: usize) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Err(Error::config("accuracy over zero samples is undefined"));
    }
    if samples.iter().any(|(_, d)| d.len() != true_actions) {
        return Ok(None);
    }
    let hits = samples.iter().filter(|(a, d)| d.argmax() == *a).count();
    Ok(Some(hits as f64 / samples.len() as f64))
}

/// Averages for one (agent, opponent) pair. `None` marks a metric that is
/// undefined: no samples, or KLD and accuracy when the model width differs
/// from the opponent's action count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OpponentDiagnostics {
    pub kld: Option<f64>,
    pub entropy: Option<f64>,
    pub accuracy: Option<f64>,
    pub samples: usize,
}

/// One visited step as seen by the metric code.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitedStep {
    /// Observation of every controlled agent.
    pub observations: Vec<Vec<f64>>,
    /// Ground-truth distribution of each opponent, `None` once it is gone.
    pub truth: Vec<Option<ActionDistribution>>,
    /// Action each opponent then took.
    pub actions: Vec<Option<usize>>,
}

/// Diagnostics indexed `[agent][opponent]`, averaged over visited steps in
/// which the opponent was active. Agents without models get an empty list.
pub fn collect_diagnostics(models: &[&[OpponentModel]], steps: &[VisitedStep]) -> Result<Vec<Vec<OpponentDiagnostics>>> {
    let mut out = Vec::with_capacity(models.len());
    for (i, agent_models) in models.iter().enumerate() {
        let mut per_opp = Vec::with_capacity(agent_models.len());
        for (k, model) in agent_models.iter().enumerate() {
            let mut kld_sum = 0.0;
            let mut ent_sum = 0.0;
            let mut preds = Vec::new();
            let mut comparable = true;
            for s in steps {
                let (Some(truth), Some(action)) = (&s.truth[k], s.actions[k]) else { continue };
                let pred = model.predict(&s.observations[i])?;
                ent_sum += pred.entropy();
                if pred.len() == truth.len() {
                    kld_sum += kld(truth, &pred)?;
                } else {
                    comparable = false;
                }
                preds.push((action, pred, truth.len()));
            }
            let n = preds.len();
            if n == 0 {
                per_opp.push(OpponentDiagnostics::default());
                continue;
            }
            let true_dim = preds[0].2;
            let pairs: Vec<(usize, &ActionDistribution)> = preds.iter().map(|(a, d, _)| (*a, d)).collect();
            per_opp.push(OpponentDiagnostics {
                kld: comparable.then(|| kld_sum / n as f64),
                entropy: Some(ent_sum / n as f64),
                accuracy: if comparable { prediction_accuracy(&pairs, true_dim)? } else { None },
                samples: n,
            });
        }
        out.push(per_opp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Init, Mlp, MlpSpec, ParamBlock};
    use crate::rng::{stream, Purpose};
    use rand::Rng as _;

    fn d(p: &[f64]) -> ActionDistribution {
        ActionDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn kld_examples() {
        let u = ActionDistribution::uniform(5);
        assert_eq!(kld(&u, &u).unwrap(), 0.0);
        let v = kld(&d(&[0.5, 0.5]), &d(&[0.75, 0.25])).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((v - expected).abs() < 1e-15 && (v - 0.14384).abs() < 1e-5);
        let p = d(&[0.1, 0.3, 0.2, 0.15, 0.25]);
        let closed = -(5f64.ln()) - 0.2 * p.probs().iter().map(|x| x.ln()).sum::<f64>();
        assert!((kld(&u, &p).unwrap() - closed).abs() < 1e-12);
        assert!(kld(&u, &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kld_floor_keeps_value_finite() {
        let wrong = d(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let v = kld(&ActionDistribution::uniform(5), &wrong).unwrap();
        assert!(v.is_finite());
        assert!((v - (-(5f64.ln()) - 0.8 * PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn accuracy_examples() {
        let u = ActionDistribution::uniform(5);
        let mut rng = stream(1, Purpose::Test, 0);
        let samples: Vec<(usize, &ActionDistribution)> = (0..10_000).map(|_| (rng.gen_range(0..5), &u)).collect();
        let acc = prediction_accuracy(&samples, 5).unwrap().unwrap();
        assert!((acc - 0.2).abs() < 0.02, "{acc}");
        let sure = d(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(prediction_accuracy(&[(2, &sure), (2, &sure)], 5).unwrap(), Some(1.0));
        assert!(prediction_accuracy(&[], 5).is_err());
        let three = ActionDistribution::uniform(3);
        assert_eq!(prediction_accuracy(&[(1, &three)], 5).unwrap(), None);
    }

    fn zero_model(obs_len: usize, d: usize) -> OpponentModel {
        let spec = MlpSpec::new(obs_len + 1, &[], d);
        let net = Mlp::from_params(spec, vec![ParamBlock::zeros("w0", vec![obs_len + 1, d]), ParamBlock::zeros("b0", vec![d])]).unwrap();
        OpponentModel::from_net(net, obs_len, 1, 0).unwrap()
    }

    fn steps(n: usize) -> Vec<VisitedStep> {
        let mut rng = stream(2, Purpose::Test, 0);
        (0..n)
            .map(|_| VisitedStep {
                observations: vec![vec![rng.gen(), rng.gen(), rng.gen()]],
                truth: vec![Some(ActionDistribution::uniform(5))],
                actions: vec![Some(rng.gen_range(0..5))],
            })
            .collect()
    }

    #[test]
    fn uniform_models_against_uniform_prey() {
        let m = [zero_model(3, 5)];
        let diag = collect_diagnostics(&[&m], &steps(10_000)).unwrap();
        let g = &diag[0][0];
        assert_eq!(g.kld, Some(0.0));
        assert!((g.entropy.unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((g.accuracy.unwrap() - 0.2).abs() < 0.02);
        assert_eq!(g.samples, 10_000);
    }

    #[test]
    fn width_mismatch_is_not_applicable() {
        let m = [zero_model(3, 8)];
        let g = &collect_diagnostics(&[&m], &steps(50)).unwrap()[0][0];
        assert_eq!((g.kld, g.accuracy), (None, None));
        assert!((g.entropy.unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inactive_opponent_skipped_and_deterministic() {
        let m = [OpponentModel::new(3, 1, 0, 5, &[4], Init::ScaledUniform, "om", &mut stream(3, Purpose::Test, 0)).unwrap()];
        let mut s = steps(20);
        s[3].truth[0] = None;
        s[3].actions[0] = None;
        let a = collect_diagnostics(&[&m], &s).unwrap();
        assert_eq!(a[0][0].samples, 19);
        assert_eq!(a, collect_diagnostics(&[&m], &s).unwrap());
        assert!(a[0][0].kld.unwrap() >= 0.0);
    }
}
