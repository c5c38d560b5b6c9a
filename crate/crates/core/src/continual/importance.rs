//! Parameter-importance state for the EWC and RWalk regularizers.

use atlas_autodiff::Tensor;

/// Buffers shaped like the parameter list.
///
/// `fisher` holds the summed per-stage Fisher estimate for EWC or the
/// running average of squared gradients for RWalk. `omega` is the
/// importance frozen at the last stage boundary, `anchor` the parameters
/// there; both stay unset until a stage has finished.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub fisher: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub omega: Vec<Tensor>,
    pub anchor: Option<Vec<Tensor>>,
    pub step: u64,
    last: Vec<Tensor>,
}

fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

impl ImportanceState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            fisher: zeros_like(params),
            scores: zeros_like(params),
            omega: zeros_like(params),
            anchor: None,
            step: 0,
            last: params.to_vec(),
        }
    }

    /// Adds `grad²` averaged over samples to the EWC Fisher.
    pub fn accumulate_fisher(&mut self, mean_sq_grads: &[Tensor]) {
        for (f, g) in self.fisher.iter_mut().zip(mean_sq_grads) {
            for (a, b) in f.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    /// EWC stage boundary: freeze the Fisher sum and anchor at `params`.
    pub fn consolidate_ewc(&mut self, params: &[Tensor]) {
        self.omega = self.fisher.clone();
        self.anchor = Some(params.to_vec());
    }

    /// RWalk stage boundary: importance is the averaged Fisher plus the path
    /// scores scaled into `[0, 1]` by their maximum.
    pub fn consolidate_rwalk(&mut self, params: &[Tensor]) {
        let max = self
            .scores
            .iter()
            .flat_map(|s| s.data())
            .fold(0.0f32, |m, &v| m.max(v));
        self.omega = self
            .fisher
            .iter()
            .zip(&self.scores)
            .map(|(f, s)| {
                let data = f
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(&fv, &sv)| fv + if max > 0.0 { sv / max } else { 0.0 })
                    .collect();
                Tensor::new(f.shape(), data).expect("same shape")
            })
            .collect();
        self.anchor = Some(params.to_vec());
    }

    /// Adds the penalty gradient `lambda * omega * (theta - anchor)` to `grads`.
    pub fn add_penalty_grad(&self, params: &[Tensor], grads: &mut [Tensor], lambda: f32) {
        let Some(anchor) = &self.anchor else { return };
        for (((g, p), a), w) in grads.iter_mut().zip(params).zip(anchor).zip(&self.omega) {
            for (((gv, &pv), &av), &wv) in g
                .data_mut()
                .iter_mut()
                .zip(p.data())
                .zip(a.data())
                .zip(w.data())
            {
                *gv += lambda * wv * (pv - av);
            }
        }
    }
}

/// `(lambda / 2) * sum(omega * (theta - anchor)²)`; zero before the first
/// stage boundary.
pub fn ewc_penalty(params: &[Tensor], state: &ImportanceState, lambda: f32) -> f64 {
    let Some(anchor) = &state.anchor else { return 0.0 };
    let mut sum = 0.0f64;
    for ((p, a), w) in params.iter().zip(anchor).zip(&state.omega) {
        for ((&pv, &av), &wv) in p.data().iter().zip(a.data()).zip(w.data()) {
            let d = pv as f64 - av as f64;
            sum += wv as f64 * d * d;
        }
    }
    0.5 * lambda as f64 * sum
}

/// One RWalk bookkeeping step, called after every optimizer update with the
/// task-loss gradient `grads` of that step and the updated `params`.
///
/// The Fisher follows `F = alpha * F + (1 - alpha) * g²`. Every `every`
/// steps, with `d` the parameter change since the previous such update,
/// each score grows by `max(0, -g * d) / (F * d² / 2 + xi)`.
pub fn rwalk_update(
    state: &mut ImportanceState,
    grads: &[Tensor],
    params: &[Tensor],
    every: usize,
    alpha: f32,
    xi: f32,
) {
    state.step += 1;
    for (f, g) in state.fisher.iter_mut().zip(grads) {
        for (fv, &gv) in f.data_mut().iter_mut().zip(g.data()) {
            *fv = alpha * *fv + (1.0 - alpha) * gv * gv;
        }
    }
    if every == 0 || state.step % every as u64 != 0 {
        return;
    }
    for (i, p) in params.iter().enumerate() {
        let s = state.scores[i].data_mut();
        let (f, g, last) = (state.fisher[i].data(), grads[i].data(), state.last[i].data());
        for (k, &pv) in p.data().iter().enumerate() {
            let d = pv - last[k];
            s[k] += (-g[k] * d).max(0.0) / (0.5 * f[k] * d * d + xi);
        }
    }
    state.last = params.to_vec();
}
