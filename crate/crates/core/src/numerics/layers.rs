//! Parameterized building blocks.
//!
//! FCBlock = dense → batch norm → relu; ConvBlock = conv1d → batch norm → relu;
//! ResBlock = two ConvBlocks with an additive skip around them. Sequence-shaped FCBlocks
//! are kernel-1 convolutions, i.e. the same dense layer applied to every frame.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::numerics::graph::{BnStats, Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{Real, Tensor};

/// How a forward pass treats a store: batch-norm mode and whether weights take gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ctx {
    pub train: bool,
    pub trainable: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        train: true,
        trainable: true,
    };
    pub const EVAL: Ctx = Ctx {
        train: false,
        trainable: false,
    };
}

fn uniform_init<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(&format!("{name}.w"), uniform_init(&[cout, cin], cin, rng))?,
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let w = g.param(p, self.w, ctx.trainable);
        let b = g.param(p, self.b, ctx.trainable);
        g.dense(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(
                &format!("{name}.w"),
                uniform_init(&[cout, cin, kernel], cin * kernel, rng),
            )?,
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let w = g.param(p, self.w, ctx.trainable);
        let b = g.param(p, self.b, ctx.trainable);
        g.conv1d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            )?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma, ctx.trainable);
        let beta = g.param(p, self.beta, ctx.trainable);
        let stats = BnStats {
            mean_id: self.mean,
            var_id: self.var,
            mean: p.get(self.mean).data(),
            var: p.get(self.var).data(),
        };
        g.batch_norm(x, gamma, beta, stats, ctx.train)
    }
}

/// Dense → batch norm → relu on `[B, C]` vectors.
#[derive(Clone, Debug)]
pub struct FcBlock {
    pub dense: Dense,
    pub bn: BatchNorm,
}

impl FcBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dense: Dense::new(store, &format!("{name}.fc"), cin, cout, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let y = self.dense.forward(g, p, ctx, x)?;
        let y = self.bn.forward(g, p, ctx, y)?;
        Ok(g.relu(y))
    }
}

/// Conv1d → batch norm → relu on `[B, C, T]` sequences.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(store, &format!("{name}.conv"), cin, cout, kernel, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, ctx, x)?;
        let y = self.bn.forward(g, p, ctx, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvBlock::new(store, &format!("{name}.a"), channels, channels, kernel, rng)?,
            second: ConvBlock::new(store, &format!("{name}.b"), channels, channels, kernel, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let y = self.first.forward(g, p, ctx, x)?;
        let y = self.second.forward(g, p, ctx, y)?;
        g.add(x, y)
    }
}
