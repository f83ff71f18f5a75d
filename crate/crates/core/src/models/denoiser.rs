use rand::Rng;

use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::diffusion::{Cond, NoisePredictor};
use crate::nn::{timestep_features, Conv2d, Linear, ParamStore, STORE_DENOISER};
use crate::tensor::Tensor;

/// `x + conv2(silu(conv1(silu(x)) + W emb))`.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    conv1: Conv2d,
    emb: Linear,
    conv2: Conv2d,
}

impl ResBlock {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, e: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            emb: Linear::new(store, &format!("{name}.emb"), e, c, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, emb: Var) -> Var {
        let r = g.silu(x);
        let r = self.conv1.forward(g, store, r);
        let bias = self.emb.forward(g, store, emb);
        let r = g.channel_bias(r, bias);
        let r = g.silu(r);
        let r = self.conv2.forward(g, store, r);
        g.add(x, r)
    }
}

/// Residual convolutional noise predictor with timestep and class
/// embeddings. The class table has one extra row for the null condition.
#[derive(Clone, Debug)]
pub struct LatentDenoiser {
    pub(crate) store: ParamStore,
    time_dim: usize,
    emb_dim: usize,
    num_classes: usize,
    time1: Linear,
    time2: Linear,
    table: usize,
    input: Conv2d,
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

impl LatentDenoiser {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new(STORE_DENOISER);
        let (c, e) = (arch.denoiser_channels, arch.emb_dim);
        let time1 = Linear::new(&mut store, "time1", arch.time_dim, e, rng);
        let time2 = Linear::new(&mut store, "time2", e, e, rng);
        let table = store.add(
            "class_table",
            Tensor::randn(&[arch.num_classes + 1, e], rng).scale(0.5),
        );
        let input = Conv2d::new(&mut store, "input", arch.latent_channels, c, 3, 1, 1, rng);
        let blocks = (0..arch.denoiser_blocks)
            .map(|i| ResBlock::new(&mut store, &format!("block{i}"), c, e, rng))
            .collect();
        let out = Conv2d::zeros(&mut store, "out", c, arch.latent_channels, 3, 1, 1);
        Self {
            store,
            time_dim: arch.time_dim,
            emb_dim: arch.emb_dim,
            num_classes: arch.num_classes,
            time1,
            time2,
            table,
            input,
            blocks,
            out,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Index of the null (unconditional) row of the class table.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

}

pub(crate) fn table_row(store: &ParamStore, table: usize, class: Option<usize>) -> Tensor {
    let t = store.get(table);
    let (rows, e) = (t.shape()[0], t.shape()[1]);
    let r = class.unwrap_or(rows - 1).min(rows - 1);
    Tensor::new(&[e], t.data()[r * e..(r + 1) * e].to_vec()).expect("embedding row")
}

/// Rows of a class table (with a trailing null row) or a free embedding,
/// broadcast to `[n, E]`.
pub(crate) fn condition_rows(g: &mut Graph, store: &ParamStore, table: usize, n: usize, cond: &Cond) -> Var {
    let shape = store.get(table).shape().to_vec();
    let (null, e) = (shape[0] - 1, shape[1]);
    let rows = |g: &mut Graph, idx: Vec<usize>| {
        let t = store.var(g, table);
        g.gather(t, idx)
    };
    match cond {
        Cond::None => rows(g, vec![null; n]),
        Cond::Class(c) => rows(g, vec![(*c).min(null); n]),
        Cond::Classes(cs) => {
            assert_eq!(cs.len(), n, "one class per batch item");
            rows(g, cs.iter().map(|&c| c.min(null)).collect())
        }
        Cond::Embedding(t) => {
            let v = g.constant(t.clone().reshape(&[1, e]).expect("embedding size"));
            g.broadcast_rows(v, n)
        }
        Cond::Var(v) => g.broadcast_rows(*v, n),
    }
}

impl NoisePredictor for LatentDenoiser {
    fn predict(&self, g: &mut Graph, z: Var, t: &[usize], cond: &Cond) -> Var {
        let n = t.len();
        let feats = g.constant(timestep_features(t, self.time_dim));
        let h = self.time1.forward(g, &self.store, feats);
        let h = g.silu(h);
        let h = self.time2.forward(g, &self.store, h);
        let c = condition_rows(g, &self.store, self.table, n, cond);
        let h = g.add(h, c);
        let emb = g.silu(h);

        let mut x = self.input.forward(g, &self.store, z);
        for b in &self.blocks {
            x = b.forward(g, &self.store, x, emb);
        }
        let x = g.silu(x);
        self.out.forward(g, &self.store, x)
    }

    fn class_embedding(&self, class: Option<usize>) -> Option<Tensor> {
        Some(table_row(&self.store, self.table, class))
    }
}
