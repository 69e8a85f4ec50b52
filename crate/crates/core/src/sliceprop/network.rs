//! Forward passes of the feature CNN and the displacement-field network.

use std::collections::BTreeMap;

use super::model::{bias_key, gate_key, in_factor_key, layers, out_factor_key, weight_key, LayerDef, PropagatorModel, Regularization};
use crate::error::Result;
use crate::grad::{Tape, Var};
use crate::rng::Stream;

/// Parameters placed on a tape, with the options of one forward pass.
pub(crate) struct Bound<'m> {
    pub model: &'m PropagatorModel,
    pub vars: BTreeMap<String, Var>,
    /// Batch-ensemble member, if the model has factors.
    pub member: Option<usize>,
}

impl<'m> Bound<'m> {
    /// Records every parameter on `tape`, as a gradient leaf when `trainable`.
    pub fn new(tape: &mut Tape, model: &'m PropagatorModel, trainable: bool, member: Option<usize>) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }))
            .collect();
        Bound { model, vars, member }
    }

    fn var(&self, key: &str) -> Var {
        self.vars[key]
    }

    fn conv(&self, tape: &mut Tape, layer: &LayerDef, x: Var) -> Result<Var> {
        let x = match self.member {
            Some(m) => tape.channel_scale(x, self.var(&in_factor_key(layer.name, m)))?,
            None => x,
        };
        let (w, b) = (self.var(&weight_key(layer.name)), Some(self.var(&bias_key(layer.name))));
        let y = if layer.kernel.len() == 3 { tape.conv3d(x, w, b)? } else { tape.conv2d(x, w, b)? };
        match self.member {
            Some(m) => tape.channel_scale(y, self.var(&out_factor_key(layer.name, m))),
            None => Ok(y),
        }
    }

    /// ReLU followed by the model's stochastic regularizer when `stream` is
    /// given; deterministic passes use the expectation (identity).
    fn activate(&self, tape: &mut Tape, layer: &LayerDef, x: Var, stream: Option<&mut Stream>) -> Result<Var> {
        let y = tape.relu(x)?;
        let Some(stream) = stream else { return Ok(y) };
        match self.model.regularization {
            Regularization::None => Ok(y),
            Regularization::Dropout { rate } => tape.dropout(y, rate, stream),
            Regularization::Concrete { temperature, .. } => {
                tape.concrete_gate(y, self.var(&gate_key(layer.name)), temperature, stream)
            }
        }
    }

    fn layer(&self, tape: &mut Tape, layer: &LayerDef, x: Var, stream: Option<&mut Stream>) -> Result<Var> {
        let y = self.conv(tape, layer, x)?;
        if layer.hidden {
            self.activate(tape, layer, y, stream)
        } else {
            Ok(y)
        }
    }

    /// Feature map `[C, H, W]` of an edge profile `[E, H, W]`.
    pub fn features(&self, tape: &mut Tape, edges: Var, mut stream: Option<&mut Stream>) -> Result<Var> {
        let mut x = edges;
        for layer in layers(&self.model.arch) {
            x = self.layer(tape, &layer, x, stream.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Displacement fields `[4, D, H, W]` of a volume `[1, D, H, W]`.
    pub fn fields(&self, tape: &mut Tape, volume: Var, mut stream: Option<&mut Stream>) -> Result<Var> {
        let defs = layers(&self.model.arch);
        let [c, d, h, w] = <[usize; 4]>::try_from(tape.shape(volume)).map_err(|_| {
            crate::error::Error::shape("flow_net", format!("{:?} is not [1, D, H, W]", tape.shape(volume)))
        })?;
        debug_assert_eq!(c, 1);
        let e1 = self.layer(tape, &defs[0], volume, stream.as_deref_mut())?;
        let pooled = tape.avg_pool2(e1)?;
        let e2 = self.layer(tape, &defs[1], pooled, stream.as_deref_mut())?;
        let dec = self.layer(tape, &defs[2], e2, stream.as_deref_mut())?;
        let up = tape.upsample2(dec, [d, h, w])?;
        let skip = tape.add(up, e1)?;
        self.layer(tape, &defs[3], skip, stream)
    }

    /// Concrete-dropout penalty: for each gated layer with drop probability
    /// `p` feeding weights `W`,
    /// `weight_reg * |W|^2 / (1 - p) - dropout_reg * H(p)`.
    pub fn concrete_penalty(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let Regularization::Concrete { weight_reg, dropout_reg, .. } = self.model.regularization else {
            return Ok(None);
        };
        let defs = layers(&self.model.arch);
        let mut total: Option<Var> = None;
        for (i, layer) in defs.iter().enumerate().filter(|(_, l)| l.hidden) {
            let next = &defs[i + 1];
            let logit = self.var(&gate_key(layer.name));
            let w = self.var(&weight_key(next.name));
            let p = tape.sigmoid(logit)?;
            let neg = tape.scale(logit, -1.0)?;
            let keep = tape.sigmoid(neg)?;
            let wsq = tape.mul(w, w)?;
            let wsq = tape.sum(wsq)?;
            let weight_term = tape.div(wsq, keep)?;
            let weight_term = tape.scale(weight_term, weight_reg)?;
            // p ln p + (1 - p) ln(1 - p) is the negative Bernoulli entropy.
            let lp = tape.ln(p)?;
            let lq = tape.ln(keep)?;
            let a = tape.mul(p, lp)?;
            let b = tape.mul(keep, lq)?;
            let neg_entropy = tape.add(a, b)?;
            let entropy_term = tape.scale(neg_entropy, dropout_reg)?;
            let term = tape.add(weight_term, entropy_term)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total)
    }
}
