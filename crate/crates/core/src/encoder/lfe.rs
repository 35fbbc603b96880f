use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{Builder, Conv2d};
use crate::numerics::{ConvSpec, Graph, Var};

/// Local feature extractor: an inverted residual block,
/// `Conv1x1(ReLU(DWConv3x3(ReLU(Conv1x1(F))))) + F`.
#[derive(Clone, Debug)]
pub struct LocalExtractor {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
}

impl LocalExtractor {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("local extractor expansion must be >= 1".into()));
        }
        let hidden = channels * expansion;
        Ok(LocalExtractor {
            expand: b.conv("expand", channels, hidden, ConvSpec::pointwise(), true)?,
            dw: b.conv("dw", hidden, hidden, ConvSpec::depthwise(3, hidden), true)?,
            project: b.conv("project", hidden, channels, ConvSpec::pointwise(), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let y = self.expand.forward(g, f)?;
        let y = g.relu(y);
        let y = self.dw.forward(g, y)?;
        let y = g.relu(y);
        let y = self.project.forward(g, y)?;
        g.add(y, f)
    }
}
