use rand::Rng;

use super::Architecture;
use crate::autograd::{Graph, Var};
use crate::nn::{Conv2d, ParamStore, STORE_DECODER, STORE_ENCODER};

/// Deterministic downsampling encoder: strided 4x4 convolutions, one 3x3
/// mixing layer and a 1x1 projection to the latent channels.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub(crate) store: ParamStore,
    down: Vec<Conv2d>,
    mix: Conv2d,
    proj: Conv2d,
}

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new(STORE_ENCODER);
        let mut cin = arch.image_channels;
        let mut down = Vec::new();
        for (i, &c) in arch.encoder_channels.iter().enumerate() {
            down.push(Conv2d::new(&mut store, &format!("down{i}"), cin, c, 4, 2, 1, rng));
            cin = c;
        }
        let mix = Conv2d::new(&mut store, "mix", cin, cin, 3, 1, 1, rng);
        let proj = Conv2d::new(&mut store, "proj", cin, arch.latent_channels, 1, 1, 0, rng);
        Self {
            store,
            down,
            mix,
            proj,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for conv in &self.down {
            h = conv.forward(g, &self.store, h);
            h = g.silu(h);
        }
        let m = self.mix.forward(g, &self.store, h);
        let m = g.silu(m);
        let h = g.add(h, m);
        self.proj.forward(g, &self.store, h)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Nearest-upsampling convolutional decoder.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    pub(crate) store: ParamStore,
    input: Conv2d,
    mix: Conv2d,
    up: Vec<Conv2d>,
    out: Conv2d,
}

impl ConvDecoder {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new(STORE_DECODER);
        let ch = &arch.decoder_channels;
        let input = Conv2d::new(&mut store, "input", arch.latent_channels, ch[0], 3, 1, 1, rng);
        let mix = Conv2d::new(&mut store, "mix", ch[0], ch[0], 3, 1, 1, rng);
        let up = ch
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &format!("up{i}"), w[0], w[1], 3, 1, 1, rng))
            .collect();
        let out = Conv2d::new(&mut store, "out", *ch.last().expect("decoder channels"), arch.image_channels, 3, 1, 1, rng);
        Self {
            store,
            input,
            mix,
            up,
            out,
        }
    }

    /// Unclamped image prediction from a raw latent.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.input.forward(g, &self.store, z);
        let h = g.silu(h);
        let m = self.mix.forward(g, &self.store, h);
        let m = g.silu(m);
        let mut h = g.add(h, m);
        for conv in &self.up {
            h = g.upsample2x(h);
            h = conv.forward(g, &self.store, h);
            h = g.silu(h);
        }
        self.out.forward(g, &self.store, h)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
