//! Per-view feature pipeline: extraction, transition, residual cross-view
//! fusion, HR reconstruction and SR image composition.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::linalg::Resample;
use crate::nn::{Builder, CaLayer, Conv2d, Rdb};

/// Stack of RDBs whose outputs are concatenated and fused by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct DenseStack {
    rdbs: Vec<Rdb>,
    fuse: Conv2d,
}

impl DenseStack {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope(name);
        let c = cfg.channels;
        let rdbs = (0..cfg.rdb_blocks)
            .map(|i| Rdb::new(&mut s, &format!("rdb{i}"), c, cfg.rdb_layers, cfg.rdb_growth))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(&mut s, "fuse", c * cfg.rdb_blocks, c, 1)?;
        Ok(DenseStack { rdbs, fuse })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.rdbs.len());
        let mut h = x;
        for rdb in &self.rdbs {
            h = rdb.forward(g, h)?;
            outs.push(h);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.fuse.forward(g, cat)
    }
}

/// Shallow 3x3 conv followed by a [`DenseStack`].
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    shallow: Conv2d,
    body: DenseStack,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("extract");
        Ok(FeatureExtractor {
            shallow: Conv2d::new(&mut s, "shallow", 3, cfg.channels, 3)?,
            body: DenseStack::new(&mut s, "body", cfg)?,
        })
    }

    pub fn forward(&self, g: &Graph, lr: Var) -> Result<Var> {
        let [_, c, _, _] = g.shape(lr);
        if c != 3 {
            return Err(Error::invalid("extract_features", format!("expected 3 channels, got {c}")));
        }
        let shallow = self.shallow.forward(g, lr)?;
        self.body.forward(g, shallow)
    }
}

/// Spatial pyramid pooling: each level is pooled onto a `k x k` grid and
/// restored by nearest-neighbour upsampling; the levels are concatenated
/// with the input and fused by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct Transition {
    levels: Vec<usize>,
    fuse: Conv2d,
}

impl Transition {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("transition");
        let c = cfg.channels;
        Ok(Transition {
            levels: cfg.spp_levels.clone(),
            fuse: Conv2d::new(&mut s, "fuse", c * (1 + cfg.spp_levels.len()), c, 1)?,
        })
    }

    /// The input followed by every restored pyramid level, before fusion.
    pub fn pyramid(&self, g: &Graph, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = g.shape(x);
        let mut parts = vec![x];
        for &k in &self.levels {
            let pooled = g.adaptive_avg_pool(x, k)?;
            parts.push(g.upsample_nearest(pooled, h, w));
        }
        Ok(parts)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let parts = self.pyramid(g, x)?;
        let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        self.fuse.forward(g, cat)
    }
}

/// `CALayer(RDB(other - own) + own)`.
#[derive(Clone, Debug)]
pub struct ResidualFusion {
    rdb: Rdb,
    ca: CaLayer,
}

impl ResidualFusion {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ResidualFusion {
            rdb: Rdb::new(&mut s, "rdb", cfg.channels, cfg.rdb_layers, cfg.rdb_growth)?,
            ca: CaLayer::new(&mut s, "ca", cfg.channels)?,
        })
    }

    /// Fuses an already-formed residual with the own-view feature.
    pub fn fuse_residual(&self, g: &Graph, residual: Var, own: Var) -> Result<Var> {
        let r = self.rdb.forward(g, residual)?;
        self.ca.forward(g, g.add(r, own)?)
    }

    pub fn forward(&self, g: &Graph, own: Var, other: Var) -> Result<Var> {
        ensure_shape("feature_fusion", g.shape(own), g.shape(other))?;
        let residual = g.sub(other, own)?;
        self.fuse_residual(g, residual, own)
    }

    pub fn channel_attention(&self) -> &CaLayer {
        &self.ca
    }
}

/// Dense stack, conv to `C * s^2` channels and sub-pixel rearrangement.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    body: DenseStack,
    expand: Conv2d,
    scale: usize,
}

impl Reconstructor {
    pub fn new<R: Rng>(b: &mut Builder<R>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("reconstruct");
        let c = cfg.channels;
        Ok(Reconstructor {
            body: DenseStack::new(&mut s, "body", cfg)?,
            expand: Conv2d::new(&mut s, "expand", c, c * cfg.scale * cfg.scale, 3)?,
            scale: cfg.scale,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let body = self.body.forward(g, x)?;
        let expanded = self.expand.forward(g, body)?;
        g.pixel_shuffle(expanded, self.scale)
    }
}

/// Bicubic upsampling operators for one LR size.
#[derive(Clone, Debug)]
pub struct Upsampler {
    ry: Rc<Resample>,
    rx: Rc<Resample>,
}

impl Upsampler {
    pub fn bicubic(h: usize, w: usize, scale: usize) -> Self {
        Upsampler {
            ry: Rc::new(Resample::bicubic_up(h, scale)),
            rx: Rc::new(Resample::bicubic_up(w, scale)),
        }
    }

    pub fn bilinear(h: usize, w: usize, scale: usize) -> Self {
        Upsampler {
            ry: Rc::new(Resample::bilinear_up(h, scale)),
            rx: Rc::new(Resample::bilinear_up(w, scale)),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.resample(x, Rc::clone(&self.ry), Rc::clone(&self.rx))
    }
}

/// `SR = upsampled LR + f_REC(H)`; `up` is the bicubic upsampled LR image.
pub fn compose_sr(g: &Graph, rec: &Conv2d, up: Var, hr_features: Var) -> Result<Var> {
    let residual = rec.forward(g, hr_features)?;
    g.add(up, residual)
}
