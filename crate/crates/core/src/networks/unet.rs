//! Miniature encoder-decoder segmenter.
//!
//! Per level: two 3x3 conv-BN-ReLU stages; downsampling by average pooling,
//! upsampling by nearest neighbor with skip concatenation; a 1x1 head with
//! sigmoid gives a per-pixel lung probability map at the input extent.

use crate::error::{Error, Result};
use crate::networks::store::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{BnStats, NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MiniUNetConfig {
    pub input_size: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Channels at the top level; level i carries base_channels << i.
    pub base_channels: usize,
    pub batch_norm: bool,
}

impl Default for MiniUNetConfig {
    fn default() -> Self {
        MiniUNetConfig { input_size: 64, depth: 3, base_channels: 8, batch_norm: true }
    }
}

impl MiniUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("depth and base_channels must be > 0".into()));
        }
        let down = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be divisible by 2^depth = {down}",
                self.input_size
            )));
        }
        if self.input_size / down < 2 {
            return Err(Error::InvalidConfig(format!(
                "bottleneck extent {} too small",
                self.input_size / down
            )));
        }
        Ok(())
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), "unet".into()),
            ("input_size".into(), self.input_size.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("batch_norm".into(), usize::from(self.batch_norm).to_string()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct MiniUNet {
    pub config: MiniUNetConfig,
    pub params: ParamStore,
}

pub struct UNetNodes {
    pub probs: NodeId,
    pub bindings: Vec<(usize, NodeId)>,
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-8;

fn add_bn_params(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.add(&format!("{prefix}.gamma"), vec![channels], vec![1.0; channels], true);
    store.add(&format!("{prefix}.beta"), vec![channels], vec![0.0; channels], true);
    store.add(&format!("{prefix}.running_mean"), vec![channels], vec![0.0; channels], false);
    store.add(&format!("{prefix}.running_var"), vec![channels], vec![1.0; channels], false);
}

fn add_conv_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    with_bias: bool,
) {
    let fan_in = cin * kernel * kernel;
    let w = ParamStore::he_init(rng, &[cout, cin, kernel, kernel], fan_in);
    store.add(&format!("{prefix}.w"), vec![cout, cin, kernel, kernel], w, true);
    if with_bias {
        store.add(&format!("{prefix}.b"), vec![cout], vec![0.0; cout], true);
    }
}

impl MiniUNet {
    pub fn init(config: MiniUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(seed, 0x5E6));
        let mut store = ParamStore::new();
        let base = config.base_channels;
        let bn = config.batch_norm;
        let conv_bias = !bn;

        let mut cin = 1usize;
        for level in 0..config.depth {
            let c = base << level;
            let prefix = format!("enc{level}");
            add_conv_params(&mut store, &mut rng, &format!("{prefix}.conv0"), cin, c, 3, conv_bias);
            if bn {
                add_bn_params(&mut store, &format!("{prefix}.bn0"), c);
            }
            add_conv_params(&mut store, &mut rng, &format!("{prefix}.conv1"), c, c, 3, conv_bias);
            if bn {
                add_bn_params(&mut store, &format!("{prefix}.bn1"), c);
            }
            cin = c;
        }
        let cb = base << config.depth;
        add_conv_params(&mut store, &mut rng, "bottleneck.conv0", cin, cb, 3, conv_bias);
        if bn {
            add_bn_params(&mut store, "bottleneck.bn0", cb);
        }
        add_conv_params(&mut store, &mut rng, "bottleneck.conv1", cb, cb, 3, conv_bias);
        if bn {
            add_bn_params(&mut store, "bottleneck.bn1", cb);
        }
        for level in (0..config.depth).rev() {
            let c = base << level;
            let from_below = base << (level + 1);
            let prefix = format!("dec{level}");
            add_conv_params(&mut store, &mut rng, &format!("{prefix}.conv0"), from_below + c, c, 3, conv_bias);
            if bn {
                add_bn_params(&mut store, &format!("{prefix}.bn0"), c);
            }
            add_conv_params(&mut store, &mut rng, &format!("{prefix}.conv1"), c, c, 3, conv_bias);
            if bn {
                add_bn_params(&mut store, &format!("{prefix}.bn1"), c);
            }
        }
        add_conv_params(&mut store, &mut rng, "head.conv", base, 1, 1, true);

        Ok(MiniUNet { config, params: store })
    }

    fn bind(&self, tape: &mut Tape, name: &str, training: bool) -> (usize, NodeId) {
        let id = self.params.id_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let entry = self.params.entry(id);
        let mut tensor = Tensor::new(entry.shape.clone(), entry.data.clone()).unwrap();
        tensor.requires_grad = training && entry.trainable;
        (id, tape.leaf(tensor))
    }

    fn conv_block(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        stage: usize,
        x: NodeId,
        training: bool,
        bindings: &mut Vec<(usize, NodeId)>,
    ) -> Result<NodeId> {
        let (wid, w) = self.bind(tape, &format!("{prefix}.conv{stage}.w"), training);
        if training {
            bindings.push((wid, w));
        }
        let b = match self.params.id_of(&format!("{prefix}.conv{stage}.b")) {
            Some(_) => {
                let (bid, b) = self.bind(tape, &format!("{prefix}.conv{stage}.b"), training);
                if training {
                    bindings.push((bid, b));
                }
                b
            }
            None => {
                let cout = tape.shape(w)[0];
                tape.constant(vec![cout], vec![0.0; cout])?
            }
        };
        let mut h = tape.conv2d(x, w, b, 1, 1)?;
        if self.config.batch_norm {
            let bn_prefix = format!("{prefix}.bn{stage}");
            let (gid, gamma) = self.bind(tape, &format!("{bn_prefix}.gamma"), training);
            let (bid2, beta) = self.bind(tape, &format!("{bn_prefix}.beta"), training);
            if training {
                bindings.push((gid, gamma));
                bindings.push((bid2, beta));
            }
            let mean_id = self.params.id_of(&format!("{bn_prefix}.running_mean")).unwrap();
            let var_id = self.params.id_of(&format!("{bn_prefix}.running_var")).unwrap();
            let mut stats = BnStats {
                mean: self.params.entry(mean_id).data.clone(),
                var: self.params.entry(var_id).data.clone(),
            };
            h = tape.batch_norm(h, gamma, beta, &mut stats, training, BN_MOMENTUM, BN_EPS)?;
            if training {
                self.params.entry_mut(mean_id).data = stats.mean;
                self.params.entry_mut(var_id).data = stats.var;
            }
        }
        Ok(tape.relu(h))
    }

    /// Forward pass over [N,1,S,S]; output is a same-extent probability map.
    pub fn forward(&mut self, tape: &mut Tape, input: NodeId, training: bool) -> Result<UNetNodes> {
        let shape = tape.shape(input).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch(format!(
                "segmenter expects [N,1,{s},{s}], got {shape:?}"
            )));
        }
        let mut bindings = Vec::new();
        let mut h = input;
        let mut skips = Vec::new();
        for level in 0..self.config.depth {
            let prefix = format!("enc{level}");
            h = self.conv_block(tape, &prefix, 0, h, training, &mut bindings)?;
            h = self.conv_block(tape, &prefix, 1, h, training, &mut bindings)?;
            skips.push(h);
            h = tape.avg_pool2d(h, 2, 2)?;
        }
        h = self.conv_block(tape, "bottleneck", 0, h, training, &mut bindings)?;
        h = self.conv_block(tape, "bottleneck", 1, h, training, &mut bindings)?;
        for level in (0..self.config.depth).rev() {
            let prefix = format!("dec{level}");
            h = tape.upsample_nearest(h, 2)?;
            h = tape.concat_channels(&[h, skips[level]])?;
            h = self.conv_block(tape, &prefix, 0, h, training, &mut bindings)?;
            h = self.conv_block(tape, &prefix, 1, h, training, &mut bindings)?;
        }
        let (wid, w) = self.bind(tape, "head.conv.w", training);
        let (bid, b) = self.bind(tape, "head.conv.b", training);
        if training {
            bindings.push((wid, w));
            bindings.push((bid, b));
        }
        let logits = tape.conv2d(h, w, b, 1, 0)?;
        let probs = tape.sigmoid(logits);
        Ok(UNetNodes { probs, bindings })
    }

    /// Inference: per-pixel probabilities for a batch [N,1,S,S].
    pub fn predict(&mut self, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch);
        let nodes = self.forward(&mut tape, input, false)?;
        Ok(tape.tensor(nodes.probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::networks::batch_from_images;

    fn tiny() -> MiniUNetConfig {
        MiniUNetConfig { input_size: 32, depth: 2, base_channels: 4, batch_norm: true }
    }

    #[test]
    fn config_validation() {
        assert!(MiniUNetConfig::default().validate().is_ok());
        assert!(MiniUNetConfig { input_size: 30, ..tiny() }.validate().is_err());
        assert!(MiniUNetConfig { depth: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn output_shape_equals_input_shape_and_is_probabilistic() {
        let mut net = MiniUNet::init(tiny(), 5).unwrap();
        let imgs: Vec<GrayImage> = (0..2)
            .map(|i| {
                GrayImage::from_data(
                    32,
                    32,
                    (0..1024).map(|p| ((p + i * 13) % 101) as f64 / 100.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let out = net.predict(batch_from_images(&imgs).unwrap()).unwrap();
        assert_eq!(out.shape, vec![2, 1, 32, 32]);
        assert!(out.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let mut net = MiniUNet::init(tiny(), 5).unwrap();
        assert!(net.predict(Tensor::zeros(vec![1, 1, 64, 64])).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = MiniUNet::init(tiny(), 9).unwrap();
        let b = MiniUNet::init(tiny(), 9).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
    }
}
