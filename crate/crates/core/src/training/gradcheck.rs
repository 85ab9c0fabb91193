//! Central finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{batch_losses, BatchInputs, LossVars, TrainConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    Heatmap,
    Point,
    Edge,
    Visibility,
    Synthetic,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Heatmap,
        LossTerm::Point,
        LossTerm::Edge,
        LossTerm::Visibility,
        LossTerm::Synthetic,
    ];

    fn pick(self, lv: &LossVars) -> Option<Var> {
        match self {
            LossTerm::Heatmap => Some(lv.hm),
            LossTerm::Point => lv.pt,
            LossTerm::Edge => lv.edge,
            LossTerm::Visibility => lv.vis,
            LossTerm::Synthetic => lv.syn,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a − n| / max(|a|, |n|, 1e-6)`
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

fn term_value(model: &Model, batch: &BatchInputs, cfg: &TrainConfig, term: LossTerm) -> Result<f64> {
    let mut g = Graph::new();
    let lv = batch_losses(&mut g, model, batch, cfg, false)?;
    let v = term.pick(&lv).ok_or_else(|| Error::invalid("term", format!("{term:?} is not active")))?;
    Ok(g.value(v).item())
}

/// Compares analytic and central-difference gradients of one loss term at
/// `probes` random parameter elements that the term depends on.
pub fn check_term(
    model: &mut Model,
    batch: &BatchInputs,
    cfg: &TrainConfig,
    term: LossTerm,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<Probe>> {
    let mut g = Graph::new();
    let lv = batch_losses(&mut g, model, batch, cfg, false)?;
    let v = term.pick(&lv).ok_or_else(|| Error::invalid("term", format!("{term:?} is not active")))?;
    let grads = g.backward(v).param_grads(&g, model.store.len());
    let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
    if live.is_empty() {
        return Err(Error::invalid("term", format!("{term:?} depends on no parameters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = live[rng.gen_range(0..live.len())];
        let index = rng.gen_range(0..model.store.get(id).len());
        let analytic = grads[id].as_ref().unwrap().data()[index];
        let x0 = model.store.get(id).data()[index];
        model.store.get_mut(id).data_mut()[index] = x0 + eps;
        let up = term_value(model, batch, cfg, term)?;
        model.store.get_mut(id).data_mut()[index] = x0 - eps;
        let down = term_value(model, batch, cfg, term)?;
        model.store.get_mut(id).data_mut()[index] = x0;
        out.push(Probe {
            param: model.store.name(id).to_string(),
            index,
            analytic,
            numeric: (up - down) / (2.0 * eps),
        });
    }
    Ok(out)
}
