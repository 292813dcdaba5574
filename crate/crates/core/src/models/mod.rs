//! The three transfer-learning classifiers behind one interface.
//!
//! Every model is a backbone ending in a named convolutional stage
//! (used by Grad-CAM) followed by global average pooling and a dense
//! softmax head.

mod checkpoint;
pub mod densenet;
pub mod inception;
pub mod mobilenet;
pub mod tiny;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::layers::Dense;
use crate::nn::{softmax, Graph, Mode, NodeId, ParamStore, Tensor};
use crate::preprocess::{batch_tensor, ImageTensor, PreprocessConfig};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CODE_VERSION};
pub use tiny::TinyConvNet;

/// Environment variable naming a directory of `<architecture>.ckpt` files
/// whose backbone weights seed `pretrained` models.
pub const WEIGHTS_DIR_ENV: &str = "TEALEAF_WEIGHTS_DIR";

/// Prefix of every head parameter; everything else is backbone.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    Densenet201,
    MobilenetV2,
    InceptionV3,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 3] = [
        ArchitectureId::Densenet201,
        ArchitectureId::MobilenetV2,
        ArchitectureId::InceptionV3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::Densenet201 => "densenet201",
            ArchitectureId::MobilenetV2 => "mobilenet_v2",
            ArchitectureId::InceptionV3 => "inception_v3",
        }
    }

    /// Canonical name of the final convolutional stage.
    pub fn feature_layer(self) -> &'static str {
        match self {
            ArchitectureId::Densenet201 => densenet::FEATURE_LAYER,
            ArchitectureId::MobilenetV2 => mobilenet::FEATURE_LAYER,
            ArchitectureId::InceptionV3 => inception::FEATURE_LAYER,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

/// `Full` is the published topology; `Compact` keeps the same block types
/// with fewer, narrower layers and less downsampling, for CPU-scale runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    #[default]
    Full,
    Compact,
}

impl ModelScale {
    fn min_input(self, arch: ArchitectureId) -> usize {
        match (self, arch) {
            (ModelScale::Full, ArchitectureId::InceptionV3) => 75,
            (ModelScale::Full, _) => 32,
            (ModelScale::Compact, _) => 8,
        }
    }
}

/// Output of a network's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// Pre-softmax class scores, `[n, classes, 1, 1]`.
    pub logits: NodeId,
    /// Last convolutional stage, when the network has one.
    pub features: Option<NodeId>,
}

/// Anything that maps an NCHW batch to class logits through a [`Graph`].
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn forward(&self, g: &mut Graph, x: NodeId) -> NetOutput;

    /// Whether inputs are standardised with ImageNet statistics.
    fn backbone_normalization(&self) -> bool {
        false
    }

    fn feature_layer(&self) -> Option<&str> {
        None
    }

    fn to_input(&self, images: &[&ImageTensor]) -> Tensor {
        batch_tensor(images, self.backbone_normalization())
    }

    fn logits(&self, batch: &Tensor) -> Tensor {
        let mut g = Graph::new(self.params(), Mode::Eval, false);
        let x = g.input(batch.clone(), false);
        let out = self.forward(&mut g, x);
        g.value(out.logits).clone()
    }

    fn predict_proba(&self, batch: &Tensor) -> Tensor {
        softmax(&self.logits(batch))
    }

    /// Class probabilities for a single image.
    fn predict_image(&self, image: &ImageTensor) -> Vec<f32> {
        self.predict_proba(&self.to_input(&[image])).into_vec()
    }
}

/// A classifier whose weights an optimiser may update.
pub trait TrainableClassifier: Classifier + Send {
    fn params_mut(&mut self) -> &mut ParamStore;
}

enum Backbone {
    DenseNet(densenet::DenseNet),
    MobileNetV2(mobilenet::MobileNetV2),
    InceptionV3(inception::InceptionV3),
}

impl Backbone {
    fn features(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Backbone::DenseNet(n) => n.features(g, x),
            Backbone::MobileNetV2(n) => n.features(g, x),
            Backbone::InceptionV3(n) => n.features(g, x),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Backbone::DenseNet(n) => n.out_channels(),
            Backbone::MobileNetV2(n) => n.out_channels(),
            Backbone::InceptionV3(n) => n.out_channels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: ArchitectureId,
    pub scale: ModelScale,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub scale: ModelScale,
    pub preprocess: PreprocessConfig,
    /// Seeds the random initialisation.
    pub seed: u64,
    pub pretrained: bool,
    /// Directory holding pretrained backbones; falls back to [`WEIGHTS_DIR_ENV`].
    pub weights_dir: Option<PathBuf>,
    /// Train only the head.
    pub freeze_backbone: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            scale: ModelScale::Full,
            preprocess: PreprocessConfig::default(),
            seed: 0,
            pretrained: false,
            weights_dir: None,
            freeze_backbone: false,
        }
    }
}

pub struct ClassifierModel {
    spec: ModelSpec,
    preprocess: PreprocessConfig,
    params: ParamStore,
    backbone: Backbone,
    head: Dense,
}

/// Builds a classifier at the published scale and 224-pixel input.
pub fn build_model(arch: ArchitectureId, num_classes: usize, pretrained: bool) -> Result<ClassifierModel> {
    build_model_with(
        arch,
        num_classes,
        &BuildOptions {
            pretrained,
            ..BuildOptions::default()
        },
    )
}

pub fn build_model_with(arch: ArchitectureId, num_classes: usize, opts: &BuildOptions) -> Result<ClassifierModel> {
    if num_classes < 2 {
        return Err(Error::InvalidModel(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    opts.preprocess.validate()?;
    let side = opts.preprocess.height.min(opts.preprocess.width);
    let min = opts.scale.min_input(arch);
    if side < min {
        return Err(Error::InvalidModel(format!(
            "{arch} ({:?}) needs inputs of at least {min} pixels, got {side}",
            opts.scale
        )));
    }
    let mut model = ClassifierModel::init(
        ModelSpec {
            architecture: arch,
            scale: opts.scale,
            num_classes,
        },
        opts.preprocess.clone(),
        opts.seed,
    );
    if opts.pretrained {
        let dir = opts
            .weights_dir
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::WeightsUnavailable {
                arch: arch.to_string(),
                reason: format!("no weights directory given and {WEIGHTS_DIR_ENV} is unset"),
            })?;
        model.load_backbone_from(&dir.join(format!("{arch}.ckpt")))?;
    }
    if opts.freeze_backbone {
        model.params.freeze_except(&[HEAD_PREFIX]);
    }
    Ok(model)
}

impl ClassifierModel {
    fn init(spec: ModelSpec, preprocess: PreprocessConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = match spec.architecture {
            ArchitectureId::Densenet201 => {
                Backbone::DenseNet(densenet::DenseNet::new(&mut params, &mut rng, spec.scale))
            }
            ArchitectureId::MobilenetV2 => {
                Backbone::MobileNetV2(mobilenet::MobileNetV2::new(&mut params, &mut rng, spec.scale))
            }
            ArchitectureId::InceptionV3 => {
                Backbone::InceptionV3(inception::InceptionV3::new(&mut params, &mut rng, spec.scale))
            }
        };
        let head = Dense::new(
            &mut params,
            &mut rng,
            &format!("{HEAD_PREFIX}dense"),
            backbone.out_channels(),
            spec.num_classes,
        );
        ClassifierModel {
            spec,
            preprocess,
            params,
            backbone,
            head,
        }
    }

    fn load_backbone_from(&mut self, path: &Path) -> Result<()> {
        let unavailable = |reason: String| Error::WeightsUnavailable {
            arch: self.spec.architecture.to_string(),
            reason,
        };
        if !path.is_file() {
            return Err(unavailable(format!("{} not found", path.display())));
        }
        let (source, _) = load_checkpoint(path).map_err(|e| unavailable(e.to_string()))?;
        if source.spec.architecture != self.spec.architecture || source.spec.scale != self.spec.scale {
            return Err(unavailable(format!(
                "{} holds {} ({:?})",
                path.display(),
                source.spec.architecture,
                source.spec.scale
            )));
        }
        let ids: Vec<_> = self.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if name.starts_with(HEAD_PREFIX) {
                continue;
            }
            let src = source
                .params
                .id(&name)
                .ok_or_else(|| unavailable(format!("missing {name}")))?;
            *self.params.get_mut(id) = source.params.get(src).clone();
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn architecture(&self) -> ArchitectureId {
        self.spec.architecture
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.preprocess.height, self.preprocess.width)
    }

    /// Short digest of every weight and buffer, stable across save/load.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.params.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn version(&self) -> String {
        format!("{}-{}", self.spec.architecture, self.fingerprint())
    }
}

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NetOutput {
        let features = self.backbone.features(g, x);
        let pooled = g.global_avg_pool(features);
        let logits = self.head.apply(g, pooled);
        NetOutput {
            logits,
            features: Some(features),
        }
    }

    fn backbone_normalization(&self) -> bool {
        self.preprocess.backbone_normalization
    }

    fn feature_layer(&self) -> Option<&str> {
        Some(self.spec.architecture.feature_layer())
    }
}

impl TrainableClassifier for ClassifierModel {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}
