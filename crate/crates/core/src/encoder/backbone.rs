use rand::Rng;

use super::Pyramid;
use crate::error::{Error, Result};
use crate::numerics::layers::{Builder, Conv2d, LayerNorm};
use crate::numerics::{ConvSpec, Graph, ParamId, Var};

/// Input height and width must be multiples of the deepest stride.
pub const MAX_STRIDE: usize = 32;

/// Stride of stage `i` (1-based): 4, 8, 16, 32.
pub fn stage_stride(i: usize) -> usize {
    1 << (i + 1)
}

/// Miniature ConvNeXt block: 7x7 depthwise, norm, 4x pointwise expansion, GELU,
/// pointwise projection, residual.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    dw: Conv2d,
    norm: LayerNorm,
    expand: Conv2d,
    project: Conv2d,
}

impl ConvNextBlock {
    fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize) -> Result<Self> {
        Ok(ConvNextBlock {
            dw: b.conv("dw", c, c, ConvSpec::depthwise(7, c), true)?,
            norm: b.norm("norm", c)?,
            expand: b.conv("expand", c, 4 * c, ConvSpec::pointwise(), true)?,
            project: b.conv("project", 4 * c, c, ConvSpec::pointwise(), true)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.dw.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        let y = self.expand.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.project.forward(g, y)?;
        g.add(y, x)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    /// Norm + 2x2 stride-2 conv; absent on the first stage (the stem handles it).
    down: Option<(LayerNorm, Conv2d)>,
    blocks: Vec<ConvNextBlock>,
}

/// Four-stage convolutional pyramid with strides 4/8/16/32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    params: Vec<ParamId>,
}

impl Backbone {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: [usize; 4], depths: [usize; 4]) -> Result<Self> {
        let first = b.store.len();
        let stem = b.conv("stem", 3, channels[0], ConvSpec::patchify(4), true)?;
        let stem_norm = b.norm("stem_norm", channels[0])?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let mut s = b.scope(format!("stage{}", i + 1));
            let down = if i == 0 {
                None
            } else {
                Some((
                    s.norm("down_norm", channels[i - 1])?,
                    s.conv("down", channels[i - 1], channels[i], ConvSpec::patchify(2), true)?,
                ))
            };
            let blocks = (0..depths[i])
                .map(|j| {
                    let mut bs = s.scope(format!("block{j}"));
                    ConvNextBlock::new(&mut bs, channels[i])
                })
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
        }
        let params = (first..b.store.len()).map(ParamId).collect();
        Ok(Backbone {
            stem,
            stem_norm,
            stages,
            params,
        })
    }

    /// Every parameter owned by this backbone instance.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward(&self, g: &mut Graph<'_>, img: Var) -> Result<Pyramid> {
        let [_, h, w, c] = g.shape(img);
        if c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 input channels, got {c}")));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {MAX_STRIDE}"
            )));
        }
        let mut x = self.stem.forward(g, img)?;
        x = self.stem_norm.forward(g, x)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some((norm, conv)) = &stage.down {
                x = norm.forward(g, x)?;
                x = conv.forward(g, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(g, x)?;
            }
            out.push(x);
        }
        Ok(Pyramid([out[0], out[1], out[2], out[3]]))
    }
}
