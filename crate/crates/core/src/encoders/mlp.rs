use rand::Rng;

use super::MlpConfig;
use crate::error::Result;
use crate::impl_module;
use crate::layers::{Init, Linear};
use crate::tensor::{Real, Tape, Var};

/// Flattened series through ReLU dense layers to a single latent token.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub hidden_layers: Vec<Linear<T>>,
    pub output: Linear<T>,
}
impl_module!(Mlp { hidden_layers, output });

impl<T: Real> Mlp<T> {
    pub fn new(cfg: &MlpConfig, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut width = inputs;
        let mut hidden_layers = Vec::with_capacity(cfg.widths.len());
        for &w in &cfg.widths {
            hidden_layers.push(Linear::new(width, w, Init::KaimingUniform, rng));
            width = w;
        }
        Mlp {
            hidden_layers,
            output: Linear::new(width, hidden, Init::KaimingUniform, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let batch = shape[0];
        let mut h = tape.reshape(x, &[batch, shape[1] * shape[2]])?;
        for layer in &self.hidden_layers {
            h = layer.forward(tape, h)?;
            h = tape.relu(h);
        }
        let z = self.output.forward(tape, h)?;
        tape.reshape(z, &[batch, 1, self.output.outputs()])
    }
}
