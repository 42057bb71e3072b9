//! Named parameter trees, graph binding and the Adam optimizer over them.
//!
//! A [`ParamSet`] is the serializable state of one network (trainable
//! tensors plus batch-norm running statistics). A forward pass runs inside a
//! [`Ctx`], which binds each attached set's tensors onto a [`Tape`] the first
//! time they are used: as gradient leaves when the set is trainable, as
//! constants when it is frozen.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamState, BnMode, BnStats, Conv2dSpec, Tape, Tensor, Var};

/// Ordered name → tensor map for parameters and running buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        self.buffers.insert(name, t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Applies the running-average update for every batch norm observed in train mode.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let mut mean = self.buffer(&format!("{prefix}.running_mean"))?.clone();
            let var = self.buffer_mut(&format!("{prefix}.running_var"))?;
            stats.update_running(mean.data_mut(), var.data_mut());
            *self.buffer_mut(&format!("{prefix}.running_mean"))? = mean;
        }
        Ok(())
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    pub fn conv(&mut self, set: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan = cin * k * k;
        set.insert_param(format!("{name}.weight"), self.fan_in(&[cout, cin, k, k], fan))?;
        set.insert_param(format!("{name}.bias"), self.fan_in(&[cout], fan))
    }

    /// Conv without bias, for layers that feed a batch norm (which would cancel it).
    pub fn conv_no_bias(&mut self, set: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        set.insert_param(format!("{name}.weight"), self.fan_in(&[cout, cin, k, k], cin * k * k))
    }

    pub fn conv_zero(&mut self, set: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        set.insert_param(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]))?;
        set.insert_param(format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn linear(&mut self, set: &mut ParamSet, name: &str, din: usize, dout: usize) -> Result<()> {
        set.insert_param(format!("{name}.weight"), self.fan_in(&[dout, din], din))?;
        set.insert_param(format!("{name}.bias"), self.fan_in(&[dout], din))
    }

    pub fn batch_norm(&mut self, set: &mut ParamSet, name: &str, c: usize) -> Result<()> {
        set.insert_param(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
        set.insert_param(format!("{name}.beta"), Tensor::zeros(&[c]))?;
        set.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
        set.insert_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0))
    }
}

/// Index of a parameter set attached to a [`Ctx`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SetId(usize);

struct Attached<'a> {
    params: &'a ParamSet,
    trainable: bool,
    bn_mode: BnMode,
}

/// One forward/backward transaction over a set of attached parameter trees.
pub struct Ctx<'a> {
    pub tape: Tape,
    sets: Vec<Attached<'a>>,
    bound: HashMap<(SetId, String), Var>,
    bn_updates: Vec<(SetId, String, BnStats)>,
}

impl Default for Ctx<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Ctx<'a> {
    pub fn new() -> Self {
        Ctx {
            tape: Tape::new(),
            sets: Vec::new(),
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn attach(&mut self, params: &'a ParamSet, trainable: bool, bn_mode: BnMode) -> SetId {
        self.sets.push(Attached {
            params,
            trainable,
            bn_mode,
        });
        SetId(self.sets.len() - 1)
    }

    pub fn bn_mode(&self, set: SetId) -> BnMode {
        self.sets[set.0].bn_mode
    }

    /// Tape handle for a named parameter, bound on first use.
    pub fn p(&mut self, set: SetId, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(&(set, name.to_string())) {
            return Ok(v);
        }
        let at = &self.sets[set.0];
        let t = at.params.param(name)?.clone();
        let v = if at.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert((set, name.to_string()), v);
        Ok(v)
    }

    pub fn has(&self, set: SetId, name: &str) -> bool {
        self.sets[set.0].params.contains(name)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn conv(&mut self, set: SetId, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
        let w = self.p(set, &format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.has(set, &bias_name) {
            Some(self.p(set, &bias_name)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, spec)
    }

    /// Same-padded, stride-1 conv with the kernel size read off the weight.
    pub fn conv_same(&mut self, set: SetId, name: &str, x: Var) -> Result<Var> {
        let k = self.sets[set.0].params.param(&format!("{name}.weight"))?.shape()[2];
        self.conv(set, name, x, Conv2dSpec::same(k))
    }

    pub fn linear(&mut self, set: SetId, name: &str, x: Var) -> Result<Var> {
        let w = self.p(set, &format!("{name}.weight"))?;
        let b = self.p(set, &format!("{name}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }

    /// Batch norm in the mode the set was attached with.
    pub fn batch_norm(&mut self, set: SetId, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(set, &format!("{name}.gamma"))?;
        let beta = self.p(set, &format!("{name}.beta"))?;
        match self.sets[set.0].bn_mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta)?;
                self.bn_updates.push((set, name.to_string(), stats));
                Ok(y)
            }
            BnMode::Eval => {
                let ps = self.sets[set.0].params;
                let rm = ps.buffer(&format!("{name}.running_mean"))?.data();
                let rv = ps.buffer(&format!("{name}.running_var"))?.data();
                self.tape.batch_norm_eval(x, gamma, beta, rm, rv)
            }
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound parameter of `set`, in binding order. Parameters
    /// that were never reached get zeros.
    pub fn grads(&self, set: SetId) -> Vec<(String, Vec<f64>)> {
        let ps = self.sets[set.0].params;
        ps.params()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(&(set, name.to_string()))
                    .and_then(|v| self.tape.grad(*v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.to_string(), g)
            })
            .collect()
    }

    pub fn bn_updates(&self, set: SetId) -> Vec<(String, BnStats)> {
        self.bn_updates
            .iter()
            .filter(|(s, _, _)| *s == set)
            .map(|(_, n, st)| (n.clone(), st.clone()))
            .collect()
    }
}

/// Adam over every parameter of one [`ParamSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Optimizer {
    pub states: IndexMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(params: &ParamSet) -> Self {
        Optimizer {
            states: params
                .params()
                .map(|(n, t)| (n.to_string(), AdamState::new(t.numel())))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)], lr: f64) -> Result<()> {
        // validate everything first so a bad gradient leaves the tree untouched
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        for (name, g) in grads {
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for {name}")))?;
            adam_step(params.param_mut(name)?, g, state, lr)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.values().map(|s| s.t).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_sets_get_no_gradient() {
        let mut a = ParamSet::new();
        let mut init = Init::new(3);
        init.linear(&mut a, "l", 2, 2).unwrap();
        let b = a.clone();
        let mut ctx = Ctx::new();
        let sa = ctx.attach(&a, true, BnMode::Eval);
        let sb = ctx.attach(&b, false, BnMode::Eval);
        let x = ctx.input(Tensor::full(&[1, 2], 1.0));
        let ya = ctx.linear(sa, "l", x).unwrap();
        let yb = ctx.linear(sb, "l", x).unwrap();
        let s = ctx.tape.add(ya, yb).unwrap();
        let s = ctx.tape.sum(s).unwrap();
        ctx.backward(s).unwrap();
        assert!(ctx.grads(sa).iter().all(|(_, g)| g.iter().any(|v| *v != 0.0)));
        assert!(ctx.grads(sb).iter().all(|(_, g)| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        let mut a = Init::new(11);
        let mut b = Init::new(11);
        assert!(a.fan_in(&[4, 4], 4).bitwise_eq(&b.fan_in(&[4, 4], 4)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamSet::new();
        s.insert_param("x", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert_buffer("x", Tensor::zeros(&[1])).is_err());
    }
}
