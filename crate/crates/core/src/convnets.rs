//! LeNet, VGG and ResNet builders in classifier and reader form, plus the two
//! ways of turning a word image into a feature sequence (sliding patches or
//! columns of the final feature maps).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::GrayImage;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::train::glorot_normal;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("input {h}x{w} is too small: {reason}")]
    InputTooSmall { h: usize, w: usize, reason: String },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid patch spec: {0}")]
    InvalidPatch(String),
    #[error("image width {width} is narrower than the patch width {patch}")]
    ImageTooNarrow { width: usize, patch: usize },
    #[error("patches must all have the same size")]
    RaggedPatches,
    #[error("expected input of {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    LeNet,
    Vgg,
    ResNet,
}

impl std::str::FromStr for Family {
    type Err = ConvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lenet" => Ok(Family::LeNet),
            "vgg" => Ok(Family::Vgg),
            "resnet" => Ok(Family::ResNet),
            other => Err(ConvError::InvalidArch(format!("unknown family {other:?}"))),
        }
    }
}

/// Architecture description; `classes: None` builds a reader (no dense head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvArchSpec {
    pub family: Family,
    pub input_h: usize,
    pub input_w: usize,
    /// Number of convolution blocks (VGG) or residual modules after the
    /// downsampling entry module (ResNet). Ignored for LeNet.
    pub blocks: usize,
    pub dense: Vec<usize>,
    pub classes: Option<usize>,
    /// Dropout rate after each hidden dense layer.
    #[serde(default)]
    pub dropout: f64,
}

impl ConvArchSpec {
    pub fn lenet_classifier(
        h: usize,
        w: usize,
        dense1: usize,
        dense2: usize,
        classes: usize,
    ) -> Self {
        Self {
            family: Family::LeNet,
            input_h: h,
            input_w: w,
            blocks: 2,
            dense: vec![dense1, dense2],
            classes: Some(classes),
            dropout: 0.0,
        }
    }

    pub fn lenet_reader(h: usize, w: usize) -> Self {
        Self {
            family: Family::LeNet,
            input_h: h,
            input_w: w,
            blocks: 2,
            dense: vec![],
            classes: None,
            dropout: 0.0,
        }
    }

    pub fn vgg(blocks: usize, h: usize, w: usize, classes: Option<usize>) -> Self {
        Self {
            family: Family::Vgg,
            input_h: h,
            input_w: w,
            blocks,
            dense: if classes.is_some() {
                default_dense(classes)
            } else {
                vec![]
            },
            classes,
            dropout: 0.0,
        }
    }

    pub fn resnet(blocks: usize, h: usize, w: usize, classes: Option<usize>) -> Self {
        Self {
            family: Family::ResNet,
            input_h: h,
            input_w: w,
            blocks,
            dense: if classes.is_some() {
                vec![512, 256]
            } else {
                vec![]
            },
            classes,
            dropout: 0.0,
        }
    }

    /// Default dense sizes for a classifier family: 256/128 up to 27
    /// classes, 512/256 beyond.
    pub fn with_default_dense(mut self) -> Self {
        self.dense = default_dense(self.classes);
        self
    }
}

fn default_dense(classes: Option<usize>) -> Vec<usize> {
    match classes {
        Some(c) if c >= 28 => vec![512, 256],
        Some(_) => vec![256, 128],
        None => vec![],
    }
}

/// One line of a layer summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

impl LayerRow {
    pub fn shape_string(&self) -> String {
        let parts: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!("({})", parts.join(", "))
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        k: ParamId,
        b: Option<ParamId>,
        stride: usize,
        relu: bool,
    },
    Pool,
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
        relu: bool,
    },
    Residual {
        body: Vec<Layer>,
        stride: usize,
        channels: usize,
    },
    Flatten,
    Dense {
        w: ParamId,
        b: ParamId,
        relu: bool,
    },
    Dropout(f64),
}

/// A built network. Parameters live in the [`ParamStore`] passed to the builder.
#[derive(Debug, Clone)]
pub struct ConvNet {
    arch: ConvArchSpec,
    layers: Vec<Layer>,
    rows: Vec<LayerRow>,
    params: Vec<ParamId>,
    out_shape: Vec<usize>,
}

struct Builder<'s, R: Rng + ?Sized> {
    store: &'s mut ParamStore,
    rng: &'s mut R,
    prefix: String,
    params: Vec<ParamId>,
    rows: Vec<LayerRow>,
    shape: Vec<usize>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn name(&self, layer: &str, part: &str) -> String {
        if self.prefix.is_empty() {
            format!("{layer}.{part}")
        } else {
            format!("{}.{layer}.{part}", self.prefix)
        }
    }

    fn add(&mut self, name: String, t: Tensor, trainable: bool) -> Result<ParamId, ConvError> {
        let id = if trainable {
            self.store.add(&name, t)?
        } else {
            self.store.add_buffer(&name, t)?
        };
        self.params.push(id);
        Ok(id)
    }

    fn row(&mut self, name: &str, kind: &str, params: usize) {
        self.rows.push(LayerRow {
            name: name.to_string(),
            kind: kind.to_string(),
            shape: self.shape.clone(),
            params,
        });
    }

    fn conv(
        &mut self,
        name: &str,
        k: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        relu: bool,
    ) -> Result<Layer, ConvError> {
        let cin = self.shape[2];
        let kernel = glorot_normal(&[k, k, cin, cout], k * k * cin, k * k * cout, self.rng);
        let kid = self.add(self.name(name, "kernel"), kernel, true)?;
        let b = if bias {
            Some(self.add(self.name(name, "bias"), Tensor::zeros(&[cout]), true)?)
        } else {
            None
        };
        self.shape = vec![
            self.shape[0].div_ceil(stride),
            self.shape[1].div_ceil(stride),
            cout,
        ];
        let params = k * k * cin * cout + if bias { cout } else { 0 };
        self.row(
            name,
            if relu {
                "Convolution2D(ReLU)"
            } else {
                "Convolution2D"
            },
            params,
        );
        Ok(Layer::Conv {
            k: kid,
            b,
            stride,
            relu,
        })
    }

    fn pool(&mut self, name: &str) -> Layer {
        self.shape = vec![
            self.shape[0].div_ceil(2),
            self.shape[1].div_ceil(2),
            self.shape[2],
        ];
        self.row(name, "MaxPooling2D", 0);
        Layer::Pool
    }

    fn batchnorm(&mut self, name: &str, relu: bool) -> Result<Layer, ConvError> {
        let c = *self.shape.last().expect("shape");
        let gamma = self.add(self.name(name, "gamma"), Tensor::full(&[c], 1.0), true)?;
        let beta = self.add(self.name(name, "beta"), Tensor::zeros(&[c]), true)?;
        let mean = self.add(self.name(name, "running_mean"), Tensor::zeros(&[c]), false)?;
        let var = self.add(
            self.name(name, "running_var"),
            Tensor::full(&[c], 1.0),
            false,
        )?;
        self.row(name, "BatchNormalization", 4 * c);
        Ok(Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            relu,
        })
    }

    fn flatten(&mut self, emit_row: bool) -> Layer {
        self.shape = vec![self.shape.iter().product()];
        if emit_row {
            self.row("flatten", "Flatten", 0);
        }
        Layer::Flatten
    }

    fn dense(
        &mut self,
        name: &str,
        units: usize,
        relu: bool,
        kind: &str,
    ) -> Result<Layer, ConvError> {
        let n: usize = self.shape.iter().product();
        let init = glorot_normal(&[n, units], n, units, self.rng);
        let w = self.add(self.name(name, "weight"), init, true)?;
        let b = self.add(self.name(name, "bias"), Tensor::zeros(&[units]), true)?;
        self.shape = vec![units];
        self.row(name, kind, n * units + units);
        Ok(Layer::Dense { w, b, relu })
    }

    fn head(
        &mut self,
        arch: &ConvArchSpec,
        layers: &mut Vec<Layer>,
        flatten_row: bool,
    ) -> Result<(), ConvError> {
        let Some(classes) = arch.classes else {
            return Ok(());
        };
        layers.push(self.flatten(flatten_row));
        for (i, &units) in arch.dense.iter().enumerate() {
            layers.push(self.dense(&format!("dense{}", i + 1), units, true, "Dense(ReLU)")?);
            if arch.dropout > 0.0 {
                layers.push(Layer::Dropout(arch.dropout));
            }
        }
        layers.push(self.dense("output", classes, false, "Dense(Softmax)")?);
        Ok(())
    }
}

impl ConvNet {
    /// Builds `arch` into `store`, naming parameters `prefix.layer.part`.
    pub fn build<R: Rng + ?Sized>(
        arch: &ConvArchSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<ConvNet, ConvError> {
        validate(arch)?;
        let mut b = Builder {
            store,
            rng,
            prefix: prefix.to_string(),
            params: Vec::new(),
            rows: Vec::new(),
            shape: vec![arch.input_h, arch.input_w, 1],
        };
        b.row("input", "input", 0);
        let mut layers = Vec::new();
        match arch.family {
            Family::LeNet => {
                layers.push(b.conv("conv1", 5, 20, 1, false, true)?);
                layers.push(b.pool("pool1"));
                layers.push(b.conv("conv2", 5, 50, 1, false, true)?);
                layers.push(b.pool("pool2"));
                b.head(arch, &mut layers, true)?;
            }
            Family::Vgg => {
                for i in 0..arch.blocks {
                    let maps = 32 << i;
                    layers.push(b.conv(
                        &format!("block{}_conv1", i + 1),
                        3,
                        maps,
                        1,
                        false,
                        true,
                    )?);
                    layers.push(b.conv(
                        &format!("block{}_conv2", i + 1),
                        3,
                        maps,
                        1,
                        false,
                        true,
                    )?);
                    layers.push(b.pool(&format!("block{}_pool", i + 1)));
                }
                b.head(arch, &mut layers, false)?;
            }
            Family::ResNet => {
                layers.push(b.conv("conv0", 3, 16, 1, false, true)?);
                for m in 1..=arch.blocks + 1 {
                    let stride = if m == 1 { 2 } else { 1 };
                    let channels = b.shape[2];
                    let body = vec![
                        b.batchnorm(&format!("bn{m}a"), true)?,
                        b.conv(&format!("conv{m}a"), 1, 8, stride, false, false)?,
                        b.batchnorm(&format!("bn{m}b"), true)?,
                        b.conv(&format!("conv{m}b"), 3, 8, 1, false, false)?,
                        b.batchnorm(&format!("bn{m}c"), true)?,
                        b.conv(&format!("conv{m}c"), 1, channels, 1, true, false)?,
                    ];
                    b.row(&format!("add{m}"), "Add", 0);
                    layers.push(Layer::Residual {
                        body,
                        stride,
                        channels,
                    });
                }
                layers.push(b.batchnorm("bnF", true)?);
                b.head(arch, &mut layers, true)?;
            }
        }
        let out_shape = b.shape.clone();
        Ok(ConvNet {
            arch: arch.clone(),
            layers,
            rows: b.rows,
            params: b.params,
            out_shape,
        })
    }

    pub fn arch(&self) -> &ConvArchSpec {
        &self.arch
    }

    pub fn summary(&self) -> &[LayerRow] {
        &self.rows
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Parameter count as reported in summary tables (batch-norm running
    /// statistics included).
    pub fn param_count(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Output shape for one input image (without the batch axis).
    pub fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn is_reader(&self) -> bool {
        self.arch.classes.is_none()
    }

    /// Runs the network on `[h, w, 1]` or a batch `[n, h, w, 1]`. Classifiers
    /// return logits; readers return the final feature maps and accept any width.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ConvError> {
        let s = g.shape(x).to_vec();
        let spatial = &s[s.len().saturating_sub(3)..];
        let (h, w) = (self.arch.input_h, self.arch.input_w);
        // readers have no dense layer, so any width works
        let width_ok = spatial
            .get(1)
            .is_some_and(|&sw| sw == w || (self.is_reader() && sw >= 1));
        if !(s.len() == 3 || s.len() == 4) || spatial[0] != h || spatial[2] != 1 || !width_ok {
            return Err(ConvError::InputShape {
                expected: vec![h, w, 1],
                got: s,
            });
        }
        run_layers(g, &self.layers, x, s.len() == 4)
    }

    /// Softmax class probabilities.
    pub fn classify(&self, g: &mut Graph, x: Var) -> Result<Var, ConvError> {
        let logits = self.forward(g, x)?;
        Ok(g.softmax(logits))
    }
}

fn run_layers(
    g: &mut Graph,
    layers: &[Layer],
    mut x: Var,
    batched: bool,
) -> Result<Var, ConvError> {
    for layer in layers {
        x = match layer {
            Layer::Conv { k, b, stride, relu } => {
                let kv = g.param(*k);
                let bv = b.map(|b| g.param(b));
                let y = g.conv2d(x, kv, bv, *stride)?;
                if *relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            Layer::Pool => g.maxpool2(x)?,
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                relu,
            } => {
                let (gv, bv) = (g.param(*gamma), g.param(*beta));
                let y = g.batchnorm(x, gv, bv, *mean, *var)?;
                if *relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            Layer::Residual {
                body,
                stride,
                channels,
            } => {
                let y = run_layers(g, body, x, batched)?;
                let skip = if *stride == 1 {
                    x
                } else {
                    let c = *channels;
                    let mut eye = vec![0.0; c * c];
                    for i in 0..c {
                        eye[i * c + i] = 1.0;
                    }
                    let eye = g.input(Tensor::new(vec![1, 1, c, c], eye)?);
                    g.conv2d(x, eye, None, *stride)?
                };
                g.add(y, skip)?
            }
            Layer::Flatten => {
                if batched {
                    g.flatten_rows(x)?
                } else {
                    let n = g.value(x).len();
                    g.reshape(x, &[n])?
                }
            }
            Layer::Dense { w, b, relu } => {
                let (wv, bv) = (g.param(*w), g.param(*b));
                let y = g.dense(x, wv, Some(bv))?;
                if *relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            Layer::Dropout(rate) => g.dropout(x, *rate)?,
        };
    }
    Ok(x)
}

fn validate(arch: &ConvArchSpec) -> Result<(), ConvError> {
    let (h, w) = (arch.input_h, arch.input_w);
    let small = |reason: &str| ConvError::InputTooSmall {
        h,
        w,
        reason: reason.to_string(),
    };
    if arch.classes == Some(0) {
        return Err(ConvError::InvalidArch(
            "classifier needs at least one class".into(),
        ));
    }
    if arch.dense.contains(&0) {
        return Err(ConvError::InvalidArch(
            "dense layers need at least one unit".into(),
        ));
    }
    if !(0.0..1.0).contains(&arch.dropout) {
        return Err(ConvError::InvalidArch(format!(
            "dropout {} outside [0, 1)",
            arch.dropout
        )));
    }
    match arch.family {
        Family::LeNet => {
            if arch.classes.is_some() && (h < 8 || w < 8) {
                return Err(small("LeNet classifier needs at least 8x8 for two pools"));
            }
            if h < 5 || w < 5 {
                return Err(small("LeNet needs at least 5x5 for its 5x5 kernels"));
            }
        }
        Family::Vgg => {
            if !(2..=4).contains(&arch.blocks) {
                return Err(ConvError::InvalidArch(format!(
                    "VGG blocks must be 2, 3 or 4, got {}",
                    arch.blocks
                )));
            }
            let min = 1 << arch.blocks;
            if h < min || w < min {
                return Err(small(&format!(
                    "{} pools need at least {min}x{min}",
                    arch.blocks
                )));
            }
        }
        Family::ResNet => {
            if arch.blocks == 0 {
                return Err(ConvError::InvalidArch(
                    "ResNet needs at least one block".into(),
                ));
            }
            if h < 2 || w < 2 {
                return Err(small("ResNet entry module halves the input"));
            }
        }
    }
    Ok(())
}

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub width: usize,
    pub step: usize,
}

impl PatchSpec {
    pub fn new(width: usize, step: usize) -> Result<Self, ConvError> {
        let s = Self { width, step };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConvError> {
        if self.width < 5 {
            return Err(ConvError::InvalidPatch(format!(
                "width {} below the minimum of 5",
                self.width
            )));
        }
        if self.step == 0 || self.step > self.width {
            return Err(ConvError::InvalidPatch(format!(
                "step {} must be in 1..={}",
                self.step, self.width
            )));
        }
        Ok(())
    }

    /// `⌊(W − width) / step⌋ + 1`, or 0 when the image is narrower than a patch.
    pub fn count(&self, image_width: usize) -> usize {
        if image_width < self.width {
            0
        } else {
            (image_width - self.width) / self.step + 1
        }
    }
}

/// Full-height patches at offsets `0, step, 2·step, …` that fit in the image.
pub fn extract_patches(img: &GrayImage, spec: PatchSpec) -> Result<Vec<GrayImage>, ConvError> {
    spec.validate()?;
    if img.width() < spec.width {
        return Err(ConvError::ImageTooNarrow {
            width: img.width(),
            patch: spec.width,
        });
    }
    Ok((0..spec.count(img.width()))
        .map(|i| img.crop((i * spec.step) as isize, 0, spec.width, img.height(), 0.0))
        .collect())
}

/// `[h, w, 1]` tensor of an image's intensities.
pub fn image_tensor(img: &GrayImage) -> Tensor {
    Tensor::new(vec![img.height(), img.width(), 1], img.pixels().to_vec())
        .expect("sized from image")
}

/// Applies `reader` to every patch with shared parameters; returns a
/// `[n_patches, features]` matrix, one row per patch in order.
pub fn read_patches(
    reader: &ConvNet,
    g: &mut Graph,
    patches: &[GrayImage],
) -> Result<Var, ConvError> {
    let first = patches.first().ok_or(ConvError::RaggedPatches)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(patches.len() * h * w);
    for p in patches {
        if p.height() != h || p.width() != w {
            return Err(ConvError::RaggedPatches);
        }
        data.extend_from_slice(p.pixels());
    }
    let x = g.input(Tensor::new(vec![patches.len(), h, w, 1], data)?);
    let maps = reader.forward(g, x)?;
    Ok(g.flatten_rows(maps)?)
}

/// Runs `reader` on the whole image and returns its final feature maps as
/// `[w', h'·c]`, one row per column left to right.
pub fn read_fullimage(reader: &ConvNet, g: &mut Graph, img: &GrayImage) -> Result<Var, ConvError> {
    let x = g.input(image_tensor(img));
    let maps = reader.forward(g, x)?;
    Ok(g.columns_to_sequence(maps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(arch: &ConvArchSpec) -> (ParamStore, ConvNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ConvNet::build(arch, &mut store, "m", &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn lenet_counts_and_probabilities() {
        let (store, net) = build(&ConvArchSpec::lenet_classifier(28, 28, 256, 128, 10));
        assert_eq!(net.param_count(), 687_142);
        assert_eq!(store.count(), 687_142);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros(&[28, 28, 1]));
        let p = net.classify(&mut g, x).unwrap();
        let total: f64 = g.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reader_has_no_dense_layers() {
        let (_, net) = build(&ConvArchSpec::lenet_reader(48, 10));
        assert!(net.summary().iter().all(|r| !r.kind.starts_with("Dense")));
        assert_eq!(net.output_shape(), &[12, 3, 50]);
    }

    #[test]
    fn too_small_inputs_fail() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ConvNet::build(
            &ConvArchSpec::lenet_classifier(6, 6, 4, 4, 2),
            &mut store,
            "a",
            &mut rng
        )
        .is_err());
        assert!(ConvNet::build(
            &ConvArchSpec::vgg(5, 64, 64, Some(3)),
            &mut store,
            "b",
            &mut rng
        )
        .is_err());
        assert!(ConvNet::build(
            &ConvArchSpec::resnet(0, 64, 64, Some(3)),
            &mut store,
            "c",
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn patch_counts() {
        let img = GrayImage::blank(192, 48);
        assert_eq!(
            extract_patches(&img, PatchSpec::new(10, 2).unwrap())
                .unwrap()
                .len(),
            92
        );
        assert_eq!(
            extract_patches(&img, PatchSpec::new(192, 1).unwrap())
                .unwrap()
                .len(),
            1
        );
        assert!(extract_patches(&GrayImage::blank(8, 48), PatchSpec::new(10, 2).unwrap()).is_err());
        assert!(PatchSpec::new(4, 2).is_err());
        assert!(PatchSpec::new(10, 11).is_err());
        assert!(PatchSpec::new(10, 0).is_err());
    }
}
