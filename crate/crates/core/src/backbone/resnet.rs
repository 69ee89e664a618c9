//! Bottleneck residual network. Group normalization stands in for batch
//! normalization so that embeddings are independent of batch composition;
//! both carry one scale and one shift per channel.

use rand::Rng;

use crate::autograd::Var;
use crate::kernels::ConvGeom;
use crate::nn::{Builder, Conv2d, GroupNorm, Session};

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub conv3: Conv2d,
    pub norm3: GroupNorm,
    pub downsample: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_ch: usize, mid: usize, out: usize, stride: usize) -> Self {
        let pw = ConvGeom::default();
        let sp = ConvGeom {
            stride,
            padding: 1,
            ..Default::default()
        };
        let downsample = (stride != 1 || in_ch != out).then(|| {
            let g = ConvGeom {
                stride,
                ..Default::default()
            };
            (
                Conv2d::new(&mut b.sub("downsample.conv"), in_ch, out, 1, g, false),
                GroupNorm::new(&mut b.sub("downsample.norm"), out),
            )
        });
        Bottleneck {
            conv1: Conv2d::new(&mut b.sub("conv1"), in_ch, mid, 1, pw, false),
            norm1: GroupNorm::new(&mut b.sub("norm1"), mid),
            conv2: Conv2d::new(&mut b.sub("conv2"), mid, mid, 3, sp, false),
            norm2: GroupNorm::new(&mut b.sub("norm2"), mid),
            conv3: Conv2d::new(&mut b.sub("conv3"), mid, out, 1, pw, false),
            norm3: GroupNorm::new(&mut b.sub("norm3"), out),
            downsample,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let h = self.conv1.forward(s, x);
        let h = self.norm1.forward(s, h);
        let h = s.g.relu(h);
        let h = self.conv2.forward(s, h);
        let h = self.norm2.forward(s, h);
        let h = s.g.relu(h);
        let h = self.conv3.forward(s, h);
        let h = self.norm3.forward(s, h);
        let identity = match &self.downsample {
            Some((c, n)) => {
                let d = c.forward(s, x);
                n.forward(s, d)
            }
            None => x,
        };
        let y = s.g.add(h, identity);
        s.g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub stem: Conv2d,
    pub stem_norm: GroupNorm,
    pub stages: Vec<Vec<Bottleneck>>,
    pub out_dim: usize,
}

impl ResNet {
    /// `stage_dims` are block output widths (bottleneck width is a quarter).
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_channels: usize, stage_dims: &[usize], depths: &[usize]) -> Self {
        let stem_width = stage_dims[0] / 4;
        let stem_geom = ConvGeom {
            stride: 2,
            padding: 3,
            ..Default::default()
        };
        let stem = Conv2d::new(&mut b.sub("stem.conv"), in_channels, stem_width, 7, stem_geom, false);
        let stem_norm = GroupNorm::new(&mut b.sub("stem.norm"), stem_width);
        let mut in_ch = stem_width;
        let mut stages = Vec::new();
        for (i, (&out, &depth)) in stage_dims.iter().zip(depths).enumerate() {
            let blocks = (0..depth)
                .map(|j| {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let blk = Bottleneck::new(&mut b.sub(&format!("stages.{i}.{j}")), in_ch, out / 4, out, stride);
                    in_ch = out;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        ResNet {
            stem,
            stem_norm,
            stages,
            out_dim: in_ch,
        }
    }

    /// Global-average-pooled features `(B, out_dim)`.
    pub fn forward(&self, s: &mut Session<'_>, images: Var) -> Var {
        let x = self.stem.forward(s, images);
        let x = self.stem_norm.forward(s, x);
        let x = s.g.relu(x);
        let mut x = s.g.max_pool2d(x, 3, 2, 1);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(s, x);
            }
        }
        let shape = s.g.shape(x).to_vec();
        let x = s.g.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]]);
        s.g.mean_axis(x, 2)
    }
}
