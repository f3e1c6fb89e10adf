//! Miniature densely-connected classifier.
//!
//! Stem (stride-2 conv + pool), dense blocks with pre-activation composite
//! layers (BN -> ReLU -> 3x3 conv), halving transitions, a final BN-ReLU,
//! global average pooling, and a 14-way fully-connected head with sigmoid
//! outputs. The same arithmetic scales from the 64-pixel desk configuration
//! up to the full-scale one (224-pixel input, 7x7x1024 features).

use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::networks::store::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{BnStats, NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MiniDenseNetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    /// Channels added by every dense layer.
    pub growth_rate: usize,
    /// Dense layers per block.
    pub blocks: Vec<usize>,
    /// Channels produced by the stem convolution.
    pub stem_channels: usize,
    /// Channels of the final feature maps; must match the block arithmetic.
    pub feature_dim: usize,
    /// Output classes; the pipeline is built around 14.
    pub num_classes: usize,
    /// Batch-normalization toggle (off isolates convolutions for checks).
    pub batch_norm: bool,
}

impl Default for MiniDenseNetConfig {
    fn default() -> Self {
        MiniDenseNetConfig {
            input_size: 64,
            growth_rate: 8,
            blocks: vec![2, 2, 2],
            stem_channels: 16,
            feature_dim: 32,
            num_classes: NUM_CLASSES,
            batch_norm: true,
        }
    }
}

impl MiniDenseNetConfig {
    /// Full-scale configuration: 224-pixel input, four blocks, growth 32.
    /// Final feature maps come out 7x7x1024.
    pub fn paper_scale() -> Self {
        MiniDenseNetConfig {
            input_size: 224,
            growth_rate: 32,
            blocks: vec![6, 12, 24, 16],
            stem_channels: 64,
            feature_dim: 1024,
            num_classes: NUM_CLASSES,
            batch_norm: true,
        }
    }

    /// Channel count after the last block, from the block arithmetic
    /// (halving transitions between blocks).
    pub fn derived_feature_dim(&self) -> usize {
        let mut c = self.stem_channels;
        for (i, &layers) in self.blocks.iter().enumerate() {
            c += layers * self.growth_rate;
            if i + 1 < self.blocks.len() {
                c /= 2;
            }
        }
        c
    }

    /// Spatial extent of the final feature maps: the stem halves twice and
    /// each transition halves once.
    pub fn feature_map_extent(&self) -> usize {
        self.input_size >> (1 + self.blocks.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "classifier is {NUM_CLASSES}-way, got num_classes {}",
                self.num_classes
            )));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig("blocks must be non-empty counts".into()));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 {
            return Err(Error::InvalidConfig("growth_rate and stem_channels must be > 0".into()));
        }
        let down = 1usize << (1 + self.blocks.len());
        if self.input_size % down != 0 || self.feature_map_extent() == 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of {down}",
                self.input_size
            )));
        }
        let derived = self.derived_feature_dim();
        if self.feature_dim != derived {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} does not match block arithmetic ({derived})",
                self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        let blocks: Vec<String> = self.blocks.iter().map(ToString::to_string).collect();
        vec![
            ("kind".into(), "densenet".into()),
            ("input_size".into(), self.input_size.to_string()),
            ("growth_rate".into(), self.growth_rate.to_string()),
            ("blocks".into(), blocks.join("+")),
            ("stem_channels".into(), self.stem_channels.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("batch_norm".into(), usize::from(self.batch_norm).to_string()),
        ]
    }
}

/// Classifier with its parameters.
#[derive(Clone, Debug)]
pub struct MiniDenseNet {
    pub config: MiniDenseNetConfig,
    pub params: ParamStore,
}

/// Tape handles produced by one forward pass.
pub struct DenseNetNodes {
    pub feature_maps: NodeId,
    pub gap: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    /// (store entry id, tape leaf) for every trainable parameter, in
    /// declaration order.
    pub bindings: Vec<(usize, NodeId)>,
}

/// Plain tensors from an inference pass.
pub struct DenseNetOutput {
    pub feature_maps: Tensor,
    pub gap: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-8;

fn add_bn_params(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.add(&format!("{prefix}.gamma"), vec![channels], vec![1.0; channels], true);
    store.add(&format!("{prefix}.beta"), vec![channels], vec![0.0; channels], true);
    store.add(&format!("{prefix}.running_mean"), vec![channels], vec![0.0; channels], false);
    store.add(&format!("{prefix}.running_var"), vec![channels], vec![1.0; channels], false);
}

impl MiniDenseNet {
    /// Fresh network with He-initialized convolutions. With batch
    /// normalization on, convolutions carry no bias: the subsequent
    /// normalization cancels any channel shift, so the parameter would be
    /// inert.
    pub fn init(config: MiniDenseNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(seed, 0xD3));
        let mut store = ParamStore::new();
        let g = config.growth_rate;
        let conv_bias = !config.batch_norm;

        let add_conv = |store: &mut ParamStore, rng: &mut Rng, name: &str, shape: Vec<usize>, fan_in: usize| {
            let w = ParamStore::he_init(rng, &shape, fan_in);
            let cout = shape[0];
            store.add(&format!("{name}.w"), shape, w, true);
            if conv_bias {
                store.add(&format!("{name}.b"), vec![cout], vec![0.0; cout], true);
            }
        };

        let c0 = config.stem_channels;
        add_conv(&mut store, &mut rng, "stem.conv", vec![c0, 1, 3, 3], 9);
        if config.batch_norm {
            add_bn_params(&mut store, "stem.bn", c0);
        }

        let mut c = c0;
        for (b, &layers) in config.blocks.iter().enumerate() {
            for l in 0..layers {
                let prefix = format!("block{b}.layer{l}");
                if config.batch_norm {
                    add_bn_params(&mut store, &format!("{prefix}.bn"), c);
                }
                add_conv(&mut store, &mut rng, &format!("{prefix}.conv"), vec![g, c, 3, 3], c * 9);
                c += g;
            }
            if b + 1 < config.blocks.len() {
                let prefix = format!("trans{b}");
                if config.batch_norm {
                    add_bn_params(&mut store, &format!("{prefix}.bn"), c);
                }
                let half = c / 2;
                add_conv(&mut store, &mut rng, &format!("{prefix}.conv"), vec![half, c, 1, 1], c);
                c = half;
            }
        }
        if config.batch_norm {
            add_bn_params(&mut store, "final.bn", c);
        }
        let w = ParamStore::he_init(&mut rng, &[config.num_classes, c], c);
        store.add("fc.w", vec![config.num_classes, c], w, true);
        store.add("fc.b", vec![config.num_classes], vec![0.0; config.num_classes], true);

        Ok(MiniDenseNet { config, params: store })
    }

    fn bind(&self, tape: &mut Tape, name: &str, training: bool) -> (usize, NodeId) {
        let id = self.params.id_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let entry = self.params.entry(id);
        let mut tensor = Tensor::new(entry.shape.clone(), entry.data.clone()).unwrap();
        tensor.requires_grad = training && entry.trainable;
        (id, tape.leaf(tensor))
    }

    /// Run batch-norm with statistics from the store; in training mode the
    /// updated running statistics are written back.
    fn bn(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        x: NodeId,
        training: bool,
        bindings: &mut Vec<(usize, NodeId)>,
    ) -> Result<NodeId> {
        let (gid, gamma) = self.bind(tape, &format!("{prefix}.gamma"), training);
        let (bid, beta) = self.bind(tape, &format!("{prefix}.beta"), training);
        if training {
            bindings.push((gid, gamma));
            bindings.push((bid, beta));
        }
        let mean_id = self.params.id_of(&format!("{prefix}.running_mean")).unwrap();
        let var_id = self.params.id_of(&format!("{prefix}.running_var")).unwrap();
        let mut stats = BnStats {
            mean: self.params.entry(mean_id).data.clone(),
            var: self.params.entry(var_id).data.clone(),
        };
        let out = tape.batch_norm(x, gamma, beta, &mut stats, training, BN_MOMENTUM, BN_EPS)?;
        if training {
            self.params.entry_mut(mean_id).data = stats.mean;
            self.params.entry_mut(var_id).data = stats.var;
        }
        Ok(out)
    }

    fn conv(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: NodeId,
        stride: usize,
        pad: usize,
        training: bool,
        bindings: &mut Vec<(usize, NodeId)>,
    ) -> Result<NodeId> {
        let (wid, w) = self.bind(tape, &format!("{prefix}.w"), training);
        let b = match self.params.id_of(&format!("{prefix}.b")) {
            Some(_) => {
                let (bid, b) = self.bind(tape, &format!("{prefix}.b"), training);
                if training {
                    bindings.push((wid, w));
                    bindings.push((bid, b));
                }
                b
            }
            None => {
                if training {
                    bindings.push((wid, w));
                }
                let cout = tape.shape(w)[0];
                tape.constant(vec![cout], vec![0.0; cout])?
            }
        };
        tape.conv2d(x, w, b, stride, pad)
    }

    /// Forward pass over a batch [N,1,S,S] already on the tape.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: NodeId,
        training: bool,
    ) -> Result<DenseNetNodes> {
        let shape = tape.shape(input).to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects [N,1,{s},{s}], got {shape:?}"
            )));
        }
        let use_bn = self.config.batch_norm;
        let mut bindings = Vec::new();

        let mut h = self.conv(tape, "stem.conv", input, 2, 1, training, &mut bindings)?;
        if use_bn {
            h = self.bn(tape, "stem.bn", h, training, &mut bindings)?;
        }
        h = tape.relu(h);
        h = tape.avg_pool2d(h, 2, 2)?;

        let block_count = self.config.blocks.len();
        for b in 0..block_count {
            for l in 0..self.config.blocks[b] {
                let prefix = format!("block{b}.layer{l}");
                let mut t = h;
                if use_bn {
                    t = self.bn(tape, &format!("{prefix}.bn"), t, training, &mut bindings)?;
                }
                t = tape.relu(t);
                t = self.conv(tape, &format!("{prefix}.conv"), t, 1, 1, training, &mut bindings)?;
                h = tape.concat_channels(&[h, t])?;
            }
            if b + 1 < block_count {
                let prefix = format!("trans{b}");
                if use_bn {
                    h = self.bn(tape, &format!("{prefix}.bn"), h, training, &mut bindings)?;
                }
                h = tape.relu(h);
                h = self.conv(tape, &format!("{prefix}.conv"), h, 1, 0, training, &mut bindings)?;
                h = tape.avg_pool2d(h, 2, 2)?;
            }
        }
        if use_bn {
            h = self.bn(tape, "final.bn", h, training, &mut bindings)?;
        }
        let feature_maps = tape.relu(h);
        let gap = tape.global_avg_pool(feature_maps)?;
        let (wid, fw) = self.bind(tape, "fc.w", training);
        let (bid, fb) = self.bind(tape, "fc.b", training);
        if training {
            bindings.push((wid, fw));
            bindings.push((bid, fb));
        }
        let logits = tape.fully_connected(gap, fw, fb)?;
        let probs = tape.sigmoid(logits);
        Ok(DenseNetNodes { feature_maps, gap, logits, probs, bindings })
    }

    /// Inference on a batch of images packed as [N,1,S,S].
    pub fn predict(&mut self, batch: Tensor) -> Result<DenseNetOutput> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch);
        let nodes = self.forward(&mut tape, input, false)?;
        Ok(DenseNetOutput {
            feature_maps: tape.tensor(nodes.feature_maps).clone(),
            gap: tape.tensor(nodes.gap).clone(),
            logits: tape.tensor(nodes.logits).clone(),
            probs: tape.tensor(nodes.probs).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::networks::batch_from_images;

    fn tiny_config() -> MiniDenseNetConfig {
        MiniDenseNetConfig {
            input_size: 32,
            growth_rate: 4,
            blocks: vec![2, 2],
            stem_channels: 8,
            feature_dim: 16,
            num_classes: NUM_CLASSES,
            batch_norm: true,
        }
    }

    #[test]
    fn default_and_paper_scale_configs_validate() {
        assert!(MiniDenseNetConfig::default().validate().is_ok());
        assert!(MiniDenseNetConfig::paper_scale().validate().is_ok());
        // default: stem 16, +16 -> 32, /2 = 16, +16 = 32, /2 = 16, +16 = 32
        assert_eq!(MiniDenseNetConfig::default().derived_feature_dim(), 32);
        assert_eq!(MiniDenseNetConfig::default().feature_map_extent(), 4);
    }

    #[test]
    fn paper_scale_arithmetic_gives_7x7x1024() {
        let cfg = MiniDenseNetConfig::paper_scale();
        assert_eq!(cfg.derived_feature_dim(), 1024);
        assert_eq!(cfg.feature_map_extent(), 7);
    }

    #[test]
    fn bad_feature_dim_is_rejected() {
        let cfg = MiniDenseNetConfig { feature_dim: 33, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = MiniDenseNetConfig { input_size: 60, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let cfg = tiny_config();
        let mut net = MiniDenseNet::init(cfg.clone(), 7).unwrap();
        let imgs: Vec<GrayImage> = (0..3)
            .map(|i| {
                GrayImage::from_data(
                    32,
                    32,
                    (0..1024).map(|p| ((p * (i + 2)) % 97) as f64 / 96.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let batch = batch_from_images(&imgs).unwrap();
        let out = net.predict(batch).unwrap();
        let ext = cfg.feature_map_extent();
        assert_eq!(out.feature_maps.shape, vec![3, cfg.feature_dim, ext, ext]);
        assert_eq!(out.gap.shape, vec![3, cfg.feature_dim]);
        assert_eq!(out.logits.shape, vec![3, NUM_CLASSES]);
        assert!(out.probs.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn identical_images_in_a_batch_give_identical_rows() {
        let mut net = MiniDenseNet::init(tiny_config(), 3).unwrap();
        let img = GrayImage::from_data(
            32,
            32,
            (0..1024).map(|p| (p % 89) as f64 / 88.0).collect(),
        )
        .unwrap();
        let batch = batch_from_images(&[img.clone(), img]).unwrap();
        let out = net.predict(batch).unwrap();
        let row: Vec<f64> = out.probs.data[..NUM_CLASSES].to_vec();
        assert_eq!(&out.probs.data[NUM_CLASSES..], &row[..]);
        let gap_row: Vec<f64> = out.gap.data[..out.gap.shape[1]].to_vec();
        assert_eq!(&out.gap.data[out.gap.shape[1]..], &gap_row[..]);
    }

    #[test]
    fn dense_connectivity_channel_counts() {
        // Input to layer l of a block carries c0 + l * growth channels.
        let cfg = tiny_config();
        let mut c = cfg.stem_channels;
        for (b, &layers) in cfg.blocks.iter().enumerate() {
            for l in 0..layers {
                let net = MiniDenseNet::init(cfg.clone(), 1).unwrap();
                let w = net.params.get(&format!("block{b}.layer{l}.conv.w"));
                assert_eq!(w.shape[1], c, "block {b} layer {l}");
                c += cfg.growth_rate;
            }
            if b + 1 < cfg.blocks.len() {
                c /= 2;
            }
        }
    }

    #[test]
    fn wrong_input_extent_is_rejected() {
        let mut net = MiniDenseNet::init(tiny_config(), 3).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 64, 64]);
        assert!(net.predict(batch).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MiniDenseNet::init(tiny_config(), 42).unwrap();
        let b = MiniDenseNet::init(tiny_config(), 42).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = MiniDenseNet::init(tiny_config(), 43).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn paper_scale_forward_produces_7x7x1024_features() {
        let cfg = MiniDenseNetConfig::paper_scale();
        let mut net = MiniDenseNet::init(cfg, 1).unwrap();
        let img = GrayImage::from_data(
            224,
            224,
            (0..224 * 224).map(|p| (p % 251) as f64 / 250.0).collect(),
        )
        .unwrap();
        let out = net.predict(batch_from_images(&[img]).unwrap()).unwrap();
        assert_eq!(out.feature_maps.shape, vec![1, 1024, 7, 7]);
        assert_eq!(out.probs.shape, vec![1, NUM_CLASSES]);
    }
}
