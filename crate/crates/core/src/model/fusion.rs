//! Multi-view feature fusion strategies, selected by name at runtime.
//!
//! Each strategy turns the k per-view maps of one pyramid level into a single
//! map with `k * C` channels. The same strategy instance (and parameters) is
//! applied at every pyramid level.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::init::linear_param;
use super::InitScheme;
use crate::autodiff::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// What a strategy needs to allocate its parameters.
#[derive(Debug, Clone, Copy)]
pub struct FusionInit {
    /// Channels after concatenating all views.
    pub channels: usize,
    pub reduction: usize,
    pub scheme: InitScheme,
}

pub trait Fusion<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn fuse_level(&self, tape: &mut Tape<T>, params: &ParamStore<T>, views: &[Var]) -> Result<Var>;
}

/// Channel concatenation; later layers do all the mixing.
pub struct ConcatFusion;

impl<T: Real> Fusion<T> for ConcatFusion {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn fuse_level(&self, tape: &mut Tape<T>, _params: &ParamStore<T>, views: &[Var]) -> Result<Var> {
        if views.len() == 1 {
            return Ok(views[0]);
        }
        tape.concat(views, 1)
    }
}

/// Initial output bias of the attention bottleneck; sigmoid(2) ~ 0.88.
pub const GATE_BIAS: f64 = 2.0;

/// Channel attention over the concatenated views:
/// `F_c = F * sigmoid(theta(avgpool(F) + maxpool(F)))`, with `theta` a
/// two-layer bottleneck MLP (ReLU between).
pub struct AttentionFusion {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AttentionFusion {
    pub fn new<T: Real>(init: &FusionInit, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (init.channels / init.reduction).max(1);
        let (w1, b1) = linear_param(store, "fusion.theta1", init.channels, hidden, init.scheme, rng);
        let (w2, b2) = linear_param(store, "fusion.theta2", hidden, init.channels, init.scheme, rng);
        if init.scheme == InitScheme::Random {
            // gates start near 1, so training begins close to plain concatenation
            store.get_mut(b2).data_mut().fill(T::c(GATE_BIAS));
        }
        Self { w1, b1, w2, b2 }
    }

    /// Per-channel weights `[N, C]` for a concatenated map `f`.
    pub fn weights<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, f: Var) -> Result<Var> {
        let avg = tape.global_avg_pool(f)?;
        let max = tape.global_max_pool(f)?;
        let pooled = tape.add(avg, max)?;
        let (w1, b1) = (tape.param(params, self.w1), tape.param(params, self.b1));
        let h = tape.linear(pooled, w1, Some(b1))?;
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(params, self.w2), tape.param(params, self.b2));
        let z = tape.linear(h, w2, Some(b2))?;
        Ok(tape.sigmoid(z))
    }
}

impl<T: Real> Fusion<T> for AttentionFusion {
    fn name(&self) -> &'static str {
        "cbam"
    }

    fn fuse_level(&self, tape: &mut Tape<T>, params: &ParamStore<T>, views: &[Var]) -> Result<Var> {
        let f = if views.len() == 1 { views[0] } else { tape.concat(views, 1)? };
        let w = self.weights(tape, params, f)?;
        tape.channel_mul(f, w)
    }
}

pub type FusionCtor<T> = fn(&FusionInit, &mut ParamStore<T>, &mut ChaCha8Rng) -> Box<dyn Fusion<T>>;

fn build_concat<T: Real>(_: &FusionInit, _: &mut ParamStore<T>, _: &mut ChaCha8Rng) -> Box<dyn Fusion<T>> {
    Box::new(ConcatFusion)
}

fn build_attention<T: Real>(init: &FusionInit, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Box<dyn Fusion<T>> {
    Box::new(AttentionFusion::new(init, store, rng))
}

/// Name -> constructor table of fusion strategies.
pub struct FusionRegistry<T> {
    ctors: BTreeMap<&'static str, FusionCtor<T>>,
}

impl<T: Real> Default for FusionRegistry<T> {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("concat", build_concat::<T>);
        r.register("cbam", build_attention::<T>);
        r
    }
}

impl<T: Real> FusionRegistry<T> {
    pub fn register(&mut self, name: &'static str, ctor: FusionCtor<T>) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ctors.contains_key(name)
    }

    pub fn build(
        &self,
        name: &str,
        init: &FusionInit,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn Fusion<T>>> {
        let ctor = self.ctors.get(name).ok_or_else(|| {
            Error::Config(format!("unknown fusion strategy {name:?}; known: {}", self.names().join(", ")))
        })?;
        Ok(ctor(init, store, rng))
    }
}
