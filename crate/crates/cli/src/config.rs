//! Pipeline configuration: one plain-text key=value file drives every
//! command. Unknown keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sdfn_core::labels::{CLASS_NAMES, NUM_CLASSES, OUT_OF_LUNG_CLASS, SMALL_LESION_CLASS};
use sdfn_core::networks::{MiniDenseNetConfig, MiniUNetConfig, TrainConfig};
use sdfn_core::synth::{AugmentParams, PhantomSpec};
use sdfn_core::{Error, Result};

/// Everything a pipeline run needs: directories, the phantom generator
/// spec, three network configs, three training configs, the test split
/// arrangement, and the global seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    pub weights_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub seed: u64,
    /// Patient-grouped folds; fold 0 is the held-out test split.
    pub test_folds: usize,
    pub phantom: PhantomSpec,
    pub segmenter: MiniUNetConfig,
    pub global_extractor: MiniDenseNetConfig,
    pub local_extractor: MiniDenseNetConfig,
    pub seg_train: TrainConfig,
    pub extractor_train: TrainConfig,
    pub fusion_train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 42;
        PipelineConfig {
            corpus_dir: PathBuf::from("data/corpus"),
            weights_dir: PathBuf::from("data/weights"),
            reports_dir: PathBuf::from("data/reports"),
            seed,
            test_folds: 5,
            phantom: PhantomSpec {
                extent: 256,
                patient_count: 125,
                images_per_patient: 4,
                ..Default::default()
            },
            segmenter: MiniUNetConfig::default(),
            global_extractor: MiniDenseNetConfig::default(),
            local_extractor: MiniDenseNetConfig::default(),
            seg_train: TrainConfig { max_epochs: 20, ..TrainConfig::segmenter_default(seed) },
            extractor_train: TrainConfig {
                max_epochs: 10,
                ..TrainConfig::classifier_default(seed)
            },
            fusion_train: TrainConfig { max_epochs: 30, ..TrainConfig::classifier_default(seed) },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.segmenter.validate()?;
        self.global_extractor.validate()?;
        self.local_extractor.validate()?;
        self.seg_train.validate()?;
        self.extractor_train.validate()?;
        self.fusion_train.validate()?;
        if self.test_folds < 2 {
            return Err(Error::InvalidConfig("eval.test_folds must be >= 2".into()));
        }
        Ok(())
    }

    /// Re-seed every stage from one global seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seg_train.seed = seed;
        self.extractor_train.seed = seed;
        self.fusion_train.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = PipelineConfig::default();
        let mut seen_seed: Option<u64> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                offset: lineno as u64,
                message: format!("line {}: expected key = value, got `{raw}`", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            apply_key(&mut config, key, value).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                offset: lineno as u64,
                message: format!("line {}: {e}", lineno + 1),
            })?;
            if key == "seed" {
                seen_seed = Some(config.seed);
            }
        }
        if let Some(seed) = seen_seed {
            config = config.with_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` as {what}")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::InvalidConfig(format!("cannot parse `{other}` as bool"))),
    }
}

fn parse_blocks(value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse::<usize>(p.trim(), "block size")).collect()
}

fn class_index(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown class `{name}`")))
}

fn apply_train_key(tc: &mut TrainConfig, field: &str, value: &str) -> Result<bool> {
    match field {
        "lr" => tc.learning_rate = parse(value, "f64")?,
        "decay" => tc.decay = parse(value, "f64")?,
        "batch_size" => tc.batch_size = parse(value, "usize")?,
        "epochs" => tc.max_epochs = parse(value, "usize")?,
        "patience" => tc.plateau_patience = parse(value, "usize")?,
        "factor" => tc.plateau_factor = parse(value, "f64")?,
        "validation_fraction" => tc.validation_fraction = parse(value, "f64")?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_extractor_key(net: &mut MiniDenseNetConfig, field: &str, value: &str) -> Result<bool> {
    match field {
        "input_size" => net.input_size = parse(value, "usize")?,
        "growth_rate" => net.growth_rate = parse(value, "usize")?,
        "blocks" => net.blocks = parse_blocks(value)?,
        "stem_channels" => net.stem_channels = parse(value, "usize")?,
        "batch_norm" => net.batch_norm = parse_bool(value)?,
        _ => return Ok(false),
    }
    net.feature_dim = net.derived_feature_dim();
    Ok(true)
}

fn apply_key(config: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "corpus_dir" => config.corpus_dir = PathBuf::from(value),
        "weights_dir" => config.weights_dir = PathBuf::from(value),
        "reports_dir" => config.reports_dir = PathBuf::from(value),
        "seed" => config.seed = parse(value, "u64")?,
        "eval.test_folds" => config.test_folds = parse(value, "usize")?,

        "phantom.extent" => config.phantom.extent = parse(value, "usize")?,
        "phantom.patients" => config.phantom.patient_count = parse(value, "usize")?,
        "phantom.images_per_patient" => {
            config.phantom.images_per_patient = parse(value, "usize")?
        }
        "phantom.misalignment_prob" => config.phantom.misalignment_prob = parse(value, "f64")?,
        "phantom.object_prob" => config.phantom.object_prob = parse(value, "f64")?,
        "phantom.noise" => config.phantom.noise_level = parse(value, "f64")?,
        "phantom.prevalence" => {
            let p: f64 = parse(value, "f64")?;
            config.phantom.prevalence = [p; NUM_CLASSES];
        }
        "phantom.small_lesion_min" => {
            config.phantom.lesion_size[SMALL_LESION_CLASS].min_px = parse(value, "usize")?
        }
        "phantom.small_lesion_max" => {
            config.phantom.lesion_size[SMALL_LESION_CLASS].max_px = parse(value, "usize")?
        }
        "phantom.large_lesion_min" => {
            let v: usize = parse(value, "usize")?;
            let hi = sdfn_core::synth::large_lesion_classes()
                .map(|c| config.phantom.lesion_size[c].max_px)
                .max()
                .unwrap();
            config.phantom.spread_large_lesion_bands(v, hi.max(v + 2));
        }
        "phantom.large_lesion_max" => {
            let v: usize = parse(value, "usize")?;
            let lo = sdfn_core::synth::large_lesion_classes()
                .map(|c| config.phantom.lesion_size[c].min_px)
                .min()
                .unwrap();
            config.phantom.spread_large_lesion_bands(lo.min(v.saturating_sub(2)), v);
        }

        "seg.input_size" => config.segmenter.input_size = parse(value, "usize")?,
        "seg.depth" => config.segmenter.depth = parse(value, "usize")?,
        "seg.base_channels" => config.segmenter.base_channels = parse(value, "usize")?,
        "seg.batch_norm" => config.segmenter.batch_norm = parse_bool(value)?,

        other => {
            if let Some(field) = other.strip_prefix("phantom.prevalence.") {
                let c = class_index(field)?;
                config.phantom.prevalence[c] = parse(value, "f64")?;
            } else if let Some(field) = other.strip_prefix("seg.") {
                if !apply_train_key(&mut config.seg_train, field, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                }
            } else if let Some(field) = other.strip_prefix("global.") {
                if !apply_extractor_key(&mut config.global_extractor, field, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                }
            } else if let Some(field) = other.strip_prefix("local.") {
                if !apply_extractor_key(&mut config.local_extractor, field, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                }
            } else if let Some(field) = other.strip_prefix("extractor.") {
                if !apply_train_key(&mut config.extractor_train, field, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                }
            } else if let Some(field) = other.strip_prefix("fusion.") {
                if !apply_train_key(&mut config.fusion_train, field, value)? {
                    return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
                }
            } else {
                return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
            }
        }
    }
    Ok(())
}

/// The augmentation switches live in code: flips for classification,
/// affine for segmentation; expose them for tests.
pub fn default_augments() -> (AugmentParams, AugmentParams) {
    (AugmentParams::flip_default(), AugmentParams::affine_default())
}

/// Write a fully-populated example configuration.
pub fn example_config_text() -> String {
    let d = PipelineConfig::default();
    let blocks: Vec<String> = d.global_extractor.blocks.iter().map(ToString::to_string).collect();
    format!(
        "# Pipeline configuration (key = value; # starts a comment)\n\
         corpus_dir = {}\n\
         weights_dir = {}\n\
         reports_dir = {}\n\
         seed = {}\n\
         eval.test_folds = {}\n\
         \n\
         phantom.extent = {}\n\
         phantom.patients = {}\n\
         phantom.images_per_patient = {}\n\
         phantom.prevalence = 0.2\n\
         phantom.misalignment_prob = {}\n\
         phantom.object_prob = {}\n\
         phantom.noise = {}\n\
         phantom.small_lesion_min = 2\n\
         phantom.small_lesion_max = 5\n\
         phantom.large_lesion_min = 20\n\
         phantom.large_lesion_max = 60\n\
         \n\
         seg.input_size = {}\n\
         seg.depth = {}\n\
         seg.base_channels = {}\n\
         seg.batch_norm = 1\n\
         seg.lr = {}\n\
         seg.decay = {}\n\
         seg.batch_size = {}\n\
         seg.epochs = {}\n\
         seg.patience = {}\n\
         seg.factor = {}\n\
         \n\
         global.input_size = {}\n\
         global.growth_rate = {}\n\
         global.blocks = {}\n\
         global.stem_channels = {}\n\
         global.batch_norm = 1\n\
         local.input_size = {}\n\
         local.growth_rate = {}\n\
         local.blocks = {}\n\
         local.stem_channels = {}\n\
         local.batch_norm = 1\n\
         \n\
         extractor.lr = {}\n\
         extractor.decay = {}\n\
         extractor.batch_size = {}\n\
         extractor.epochs = {}\n\
         extractor.patience = {}\n\
         extractor.factor = {}\n\
         \n\
         fusion.lr = {}\n\
         fusion.decay = {}\n\
         fusion.batch_size = {}\n\
         fusion.epochs = {}\n\
         fusion.patience = {}\n\
         fusion.factor = {}\n",
        d.corpus_dir.display(),
        d.weights_dir.display(),
        d.reports_dir.display(),
        d.seed,
        d.test_folds,
        d.phantom.extent,
        d.phantom.patient_count,
        d.phantom.images_per_patient,
        d.phantom.misalignment_prob,
        d.phantom.object_prob,
        d.phantom.noise_level,
        d.segmenter.input_size,
        d.segmenter.depth,
        d.segmenter.base_channels,
        d.seg_train.learning_rate,
        d.seg_train.decay,
        d.seg_train.batch_size,
        d.seg_train.max_epochs,
        d.seg_train.plateau_patience,
        d.seg_train.plateau_factor,
        d.global_extractor.input_size,
        d.global_extractor.growth_rate,
        blocks.join(","),
        d.global_extractor.stem_channels,
        d.local_extractor.input_size,
        d.local_extractor.growth_rate,
        blocks.join(","),
        d.local_extractor.stem_channels,
        d.extractor_train.learning_rate,
        d.extractor_train.decay,
        d.extractor_train.batch_size,
        d.extractor_train.max_epochs,
        d.extractor_train.plateau_patience,
        d.extractor_train.plateau_factor,
        d.fusion_train.learning_rate,
        d.fusion_train.decay,
        d.fusion_train.batch_size,
        d.fusion_train.max_epochs,
        d.fusion_train.plateau_patience,
        d.fusion_train.plateau_factor,
    )
}

/// Ordered map of artifact paths derived from a config.
pub fn artifact_paths(config: &PipelineConfig) -> BTreeMap<&'static str, PathBuf> {
    let mut m = BTreeMap::new();
    m.insert("manifest", config.corpus_dir.join("manifest.csv"));
    m.insert("images_dir", config.corpus_dir.join("images"));
    m.insert("masks_dir", config.corpus_dir.join("masks"));
    m.insert("crops_dir", config.corpus_dir.join("crops"));
    m.insert("boxes", config.corpus_dir.join("boxes.csv"));
    m.insert("segmenter", config.weights_dir.join("segmenter.wts"));
    m.insert("extractor_global", config.weights_dir.join("extractor_global.wts"));
    m.insert("extractor_local", config.weights_dir.join("extractor_local.wts"));
    m.insert("fusion", config.weights_dir.join("fusion.wts"));
    m.insert("eval_csv", config.reports_dir.join("eval.csv"));
    m.insert("eval_json", config.reports_dir.join("eval.json"));
    m.insert("roc_dir", config.reports_dir.join("roc"));
    m.insert("cam_dir", config.reports_dir.join("cam"));
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_round_trips_through_the_parser() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("example.conf");
        std::fs::write(&path, example_config_text()).unwrap();
        let parsed = PipelineConfig::load(&path).unwrap();
        assert_eq!(parsed, PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.conf");
        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        assert!(PipelineConfig::load(&path).is_err());
        std::fs::write(&path, "seg.no_such = 1\n").unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }

    #[test]
    fn seed_propagates_to_all_training_configs() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("seeded.conf");
        std::fs::write(&path, "seed = 777\n").unwrap();
        let parsed = PipelineConfig::load(&path).unwrap();
        assert_eq!(parsed.seed, 777);
        assert_eq!(parsed.seg_train.seed, 777);
        assert_eq!(parsed.extractor_train.seed, 777);
        assert_eq!(parsed.fusion_train.seed, 777);
    }

    #[test]
    fn blocks_update_recomputes_feature_dim() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("blocks.conf");
        std::fs::write(&path, "global.blocks = 2,2\nglobal.input_size = 64\n").unwrap();
        let parsed = PipelineConfig::load(&path).unwrap();
        // stem 16 +16 = 32 -> /2 = 16 -> +16 = 32
        assert_eq!(parsed.global_extractor.feature_dim, 32);
        assert_eq!(parsed.global_extractor.blocks, vec![2, 2]);
    }

    #[test]
    fn per_class_prevalence_override() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prev.conf");
        std::fs::write(&path, "phantom.prevalence = 0.1\nphantom.prevalence.nodule = 0.5\n")
            .unwrap();
        let parsed = PipelineConfig::load(&path).unwrap();
        assert_eq!(parsed.phantom.prevalence[SMALL_LESION_CLASS], 0.5);
        assert_eq!(parsed.phantom.prevalence[0], 0.1);
    }

    #[test]
    fn invalid_values_name_the_line() {
        let dir = std::env::temp_dir().join("sdfn-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badline.conf");
        std::fs::write(&path, "seed = 1\nseg.depth = potato\n").unwrap();
        match PipelineConfig::load(&path) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("line 2")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
