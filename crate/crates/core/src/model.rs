//! The trainable graph: low-level branch (encoder or raw map), high-level
//! reduction conv, concatenation and the fully-connected head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{DEFAULT_CHANNELS, FEATURE_CELLS};
use crate::eldmap::{CELLS, CHANNELS, LOCATION_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{softmax_ce_batch, softmax_probability, Affine, Layer, LayerSpec, Scalar, Sequential};
use crate::tensor::{self, NamedTensors, Tensor};

/// Which branches the graph contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Encoded distance map + high-level features.
    EldHf,
    /// Raw 54-channel distance map + high-level features.
    LdHf,
    /// Encoded distance map only.
    Eld,
    /// Location-only map + high-level features.
    Hf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::EldHf, Mode::LdHf, Mode::Eld, Mode::Hf];

    pub fn has_encoder(self) -> bool {
        matches!(self, Mode::EldHf | Mode::Eld)
    }

    pub fn uses_backbone(self) -> bool {
        !matches!(self, Mode::Eld)
    }

    pub fn location_only(self) -> bool {
        matches!(self, Mode::Hf)
    }

    /// Channels per grid cell of the low-level input.
    pub fn low_channels(self) -> usize {
        if self.location_only() {
            LOCATION_CHANNELS
        } else {
            CHANNELS
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::EldHf => "eld-hf",
            Mode::LdHf => "ld-hf",
            Mode::Eld => "eld",
            Mode::Hf => "hf",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eld-hf" => Ok(Mode::EldHf),
            "ld-hf" => Ok(Mode::LdHf),
            "eld" => Ok(Mode::Eld),
            "hf" => Ok(Mode::Hf),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected eld-hf, ld-hf, eld or hf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Channel widths of the 1x1 encoder, starting at 54.
    pub encoder_widths: Vec<usize>,
    pub reduction_channels: usize,
    pub fc_width: usize,
    pub backbone_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::EldHf,
            encoder_widths: vec![CHANNELS, 32, 16, 3],
            reduction_channels: 64,
            fc_width: 1024,
            backbone_channels: DEFAULT_CHANNELS,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.has_encoder() {
            if self.encoder_widths.len() < 2 || self.encoder_widths[0] != CHANNELS {
                return Err(Error::Config(format!(
                    "encoder widths must start at {CHANNELS} and have at least one layer, got {:?}",
                    self.encoder_widths
                )));
            }
            if self.encoder_widths.contains(&0) {
                return Err(Error::Config("zero encoder width".into()));
            }
        }
        if self.fc_width == 0 {
            return Err(Error::Config("fc width must be positive".into()));
        }
        if self.mode.uses_backbone() && (self.reduction_channels == 0 || self.backbone_channels == 0) {
            return Err(Error::Config("reduction and backbone channels must be positive".into()));
        }
        Ok(())
    }

    /// Flattened width of the low-level branch output.
    pub fn low_output_width(&self) -> usize {
        if self.mode.has_encoder() {
            CELLS * self.encoder_widths.last().copied().unwrap_or(0)
        } else {
            CELLS * self.mode.low_channels()
        }
    }

    pub fn head_input_width(&self) -> usize {
        let high = if self.mode.uses_backbone() {
            FEATURE_CELLS * self.reduction_channels
        } else {
            0
        };
        self.low_output_width() + high
    }
}

/// Fixed per-channel multipliers applied to the low-level map before it
/// enters the graph. LAB quantities span ~100 units and are brought to unit
/// range; chi-square distances (at most 2) are halved.
pub fn low_level_scale(mode: Mode) -> Vec<f64> {
    if mode.location_only() {
        return vec![1.0; LOCATION_CHANNELS];
    }
    let mut scale = vec![1.0; CHANNELS];
    for c in [3, 4, 5, 48, 49, 50] {
        scale[c] = 0.01;
    }
    for s in &mut scale[36..45] {
        *s = 0.5;
    }
    scale
}

/// A mini-batch of graph inputs.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[batch, 529 * low_channels]` unscaled low-level maps.
    pub low: Array2<T>,
    /// `[batch, 196 * D]` feature maps when the mode uses the backbone.
    pub high: Option<Array2<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.low.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.low.nrows() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
        Batch {
            low: c(&self.low),
            high: self.high.as_ref().map(c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    low_scale: Array1<T>,
    encoder: Option<Sequential<T>>,
    reduction: Option<Sequential<T>>,
    head: Sequential<T>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config.mode == other.config.mode
            && self.low_scale == other.low_scale
            && self.encoder == other.encoder
            && self.reduction == other.reduction
            && self.head == other.head
    }
}

fn encoder_specs(widths: &[usize]) -> Vec<LayerSpec> {
    widths
        .windows(2)
        .flat_map(|w| {
            [
                LayerSpec::Conv1x1 {
                    in_channels: w[0],
                    out_channels: w[1],
                },
                LayerSpec::Relu,
            ]
        })
        .collect()
}

fn reduction_specs(backbone: usize, reduced: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1x1 {
            in_channels: backbone,
            out_channels: reduced,
        },
        LayerSpec::Relu,
    ]
}

fn head_specs(input: usize, fc: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            in_units: input,
            out_units: fc,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_units: fc,
            out_units: fc,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_units: fc,
            out_units: 2,
        },
    ]
}

impl<T: Scalar> Model<T> {
    /// Xavier-initialized weights and zero biases, drawn in the order
    /// encoder, reduction, head from a generator seeded with `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mode = config.mode;
        let encoder = if mode.has_encoder() {
            Some(Sequential::from_specs(CELLS, CHANNELS, &encoder_specs(&config.encoder_widths), &mut rng)?)
        } else {
            None
        };
        let reduction = if mode.uses_backbone() {
            Some(Sequential::from_specs(
                FEATURE_CELLS,
                config.backbone_channels,
                &reduction_specs(config.backbone_channels, config.reduction_channels),
                &mut rng,
            )?)
        } else {
            None
        };
        let head_in = config.head_input_width();
        let head = Sequential::from_specs(1, head_in, &head_specs(head_in, config.fc_width), &mut rng)?;
        Ok(Model {
            low_scale: low_level_scale(mode).into_iter().map(T::from_f64_lossy).collect(),
            config,
            encoder,
            reduction,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn head(&self) -> &Sequential<T> {
        &self.head
    }

    pub fn head_input_width(&self) -> usize {
        self.head.input_width()
    }

    pub fn low_input_width(&self) -> usize {
        CELLS * self.config.mode.low_channels()
    }

    pub fn high_input_width(&self) -> Option<usize> {
        self.reduction.as_ref().map(Sequential::input_width)
    }

    /// Sets the final 2-unit layer to zero so every score pair ties.
    pub fn zero_output_layer(&mut self) {
        if let Some(a) = self.head.layers_mut().last_mut().and_then(Layer::affine_mut) {
            a.weight.fill(T::zero());
            a.bias.fill(T::zero());
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        if batch.low.ncols() != self.low_input_width() {
            return Err(Error::Config(format!(
                "{} mode expects {} low-level values per sample, got {}",
                self.mode(),
                self.low_input_width(),
                batch.low.ncols()
            )));
        }
        match (&self.reduction, &batch.high) {
            (Some(r), Some(h)) => {
                if h.ncols() != r.input_width() {
                    return Err(Error::Config(format!(
                        "expected {} high-level values per sample, got {}",
                        r.input_width(),
                        h.ncols()
                    )));
                }
                if h.nrows() != batch.low.nrows() {
                    return Err(Error::Config("branch batch sizes differ".into()));
                }
            }
            (Some(_), None) => {
                return Err(Error::Config(format!("{} mode needs a high-level feature map", self.mode())))
            }
            (None, Some(_)) => {
                return Err(Error::Config(format!("{} mode takes no high-level feature map", self.mode())))
            }
            (None, None) => {}
        }
        Ok(())
    }

    fn scaled_low(&self, low: &Array2<T>) -> Array2<T> {
        let channels = self.low_scale.len();
        let mut x = low.clone();
        for mut row in x.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v *= self.low_scale[i % channels];
            }
        }
        x
    }

    fn concat(low: Array2<T>, high: Option<Array2<T>>) -> Array2<T> {
        match high {
            Some(h) => concatenate(Axis(1), &[low.view(), h.view()]).expect("equal batch sizes"),
            None => low,
        }
    }

    /// Scores `[batch, 2]` without caching activations.
    pub fn logits(&self, batch: &Batch<T>) -> Result<Array2<T>> {
        self.check_batch(batch)?;
        let low = self.scaled_low(&batch.low);
        let low = match &self.encoder {
            Some(e) => e.infer(low.view())?,
            None => low,
        };
        let high = match (&self.reduction, &batch.high) {
            (Some(r), Some(h)) => Some(r.infer(h.view())?),
            _ => None,
        };
        self.head.infer(Self::concat(low, high).view())
    }

    /// Signs of every ReLU input in the graph for `batch`. Two parameter
    /// settings with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self, batch: &Batch<T>) -> Result<Vec<bool>> {
        self.check_batch(batch)?;
        let mut pattern = Vec::new();
        let low = self.scaled_low(&batch.low);
        let low = match &self.encoder {
            Some(e) => e.infer_with_pattern(low.view(), &mut pattern)?,
            None => low,
        };
        let high = match (&self.reduction, &batch.high) {
            (Some(r), Some(h)) => Some(r.infer_with_pattern(h.view(), &mut pattern)?),
            _ => None,
        };
        self.head.infer_with_pattern(Self::concat(low, high).view(), &mut pattern)?;
        Ok(pattern)
    }

    /// Probability of the salient class for every sample.
    pub fn score(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let z = self.logits(batch)?;
        Ok(z.rows().into_iter().map(|r| softmax_probability([r[0], r[1]])).collect())
    }

    /// Mean cross-entropy of the batch and its gradient for every
    /// parameter tensor, in [`Model::params_mut`] order.
    pub fn loss_and_grads(&mut self, batch: &Batch<T>, labels: &[u8]) -> Result<(T, Vec<ArrayD<T>>)> {
        self.check_batch(batch)?;
        if labels.len() != batch.len() {
            return Err(Error::Config(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.len()
            )));
        }
        let low = self.scaled_low(&batch.low);
        let low = match &mut self.encoder {
            Some(e) => e.forward(low.view())?,
            None => low,
        };
        let low_width = low.ncols();
        let high = match (&mut self.reduction, &batch.high) {
            (Some(r), Some(h)) => Some(r.forward(h.view())?),
            _ => None,
        };
        let logits = self.head.forward(Self::concat(low, high).view())?;
        let (loss, dlogits) = softmax_ce_batch(logits.view(), labels);
        let head_grads = self.head.backward(dlogits)?;
        let dconcat = head_grads.input;
        let mut grads = Vec::new();
        if let Some(e) = &mut self.encoder {
            let d = dconcat.slice(s![.., ..low_width]).to_owned();
            grads.extend(e.backward(d)?.params);
        }
        if let Some(r) = &mut self.reduction {
            let d = dconcat.slice(s![.., low_width..]).to_owned();
            grads.extend(r.backward(d)?.params);
        }
        grads.extend(head_grads.params);
        Ok((loss, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch<T>, labels: &[u8]) -> Result<T> {
        let z = self.logits(batch)?;
        Ok(softmax_ce_batch(z.view(), labels).0)
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.extend(e.params_mut());
        }
        if let Some(r) = &mut self.reduction {
            out.extend(r.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }

    /// Parameter tensors named `<branch>.<layer>.<weight|bias>`.
    pub fn named_params(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, net: &Sequential<T>| {
            for (name, v) in net.named_params() {
                out.push((format!("{prefix}.{name}"), v.to_owned()));
            }
        };
        if let Some(e) = &self.encoder {
            push("encoder", e);
        }
        if let Some(r) = &self.reduction {
            push("reduction", r);
        }
        push("head", &self.head);
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            low_scale: self.low_scale.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
            encoder: self.encoder.as_ref().map(Sequential::cast),
            reduction: self.reduction.as_ref().map(Sequential::cast),
            head: self.head.cast(),
        }
    }
}

impl Model<f32> {
    pub fn to_tensors(&self) -> Result<NamedTensors> {
        self.named_params()
            .into_iter()
            .map(|(name, v)| {
                let dims = v.shape().to_vec();
                let data = v.as_standard_layout().iter().copied().collect();
                Ok((name, Tensor::new(dims, data)?))
            })
            .collect()
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        tensor::encode_checkpoint(&self.to_tensors()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor::save_checkpoint(path, &self.to_tensors()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_tensors(&tensor::load_checkpoint(path)?)
    }

    /// Rebuilds a model from checkpoint tensors, inferring the mode and
    /// every width from the tensor names and shapes.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let encoder = branch_layers(tensors, "encoder", true)?;
        let reduction = branch_layers(tensors, "reduction", true)?;
        let head = branch_layers(tensors, "head", false)?;
        if head.is_empty() {
            return Err(Error::Format("checkpoint has no head layers".into()));
        }
        let head_in = head[0].affine().map(Affine::in_dim).unwrap_or(0);
        let reduced = reduction
            .iter()
            .rev()
            .find_map(Layer::affine)
            .map(|a| a.out_dim() * FEATURE_CELLS)
            .unwrap_or(0);
        let low_width = head_in
            .checked_sub(reduced)
            .ok_or_else(|| Error::Format("head narrower than the high-level branch".into()))?;
        let mode = match (encoder.is_empty(), reduction.is_empty()) {
            (false, false) => Mode::EldHf,
            (false, true) => Mode::Eld,
            (true, false) if low_width == CELLS * CHANNELS => Mode::LdHf,
            (true, false) if low_width == CELLS * LOCATION_CHANNELS => Mode::Hf,
            _ => return Err(Error::Format("cannot infer the model mode from the checkpoint".into())),
        };
        let mut encoder_widths = Vec::new();
        for a in encoder.iter().filter_map(Layer::affine) {
            if encoder_widths.is_empty() {
                encoder_widths.push(a.in_dim());
            }
            encoder_widths.push(a.out_dim());
        }
        let (backbone_channels, reduction_channels) = reduction
            .iter()
            .filter_map(Layer::affine)
            .next()
            .map(|a| (a.in_dim(), a.out_dim()))
            .unwrap_or((0, 0));
        let config = ModelConfig {
            mode,
            encoder_widths,
            reduction_channels,
            fc_width: head[0].affine().map(Affine::out_dim).unwrap_or(0),
            backbone_channels,
            seed: 0,
        };
        let seq = |layers: Vec<Layer<f32>>, cells, channels| -> Result<Option<Sequential<f32>>> {
            if layers.is_empty() {
                Ok(None)
            } else {
                Sequential::new(cells, channels, layers).map(Some)
            }
        };
        let model = Model {
            low_scale: low_level_scale(mode).into_iter().map(|v| v as f32).collect(),
            encoder: seq(encoder, CELLS, CHANNELS)?,
            reduction: seq(reduction, FEATURE_CELLS, backbone_channels.max(1))?,
            head: Sequential::new(1, head_in, head)?,
            config,
        };
        if model.head.output_width() != 2 {
            return Err(Error::Format("head must end in two scores".into()));
        }
        let expected = model.config.head_input_width();
        if expected != head_in {
            return Err(Error::Format(format!(
                "head input {head_in} does not match branches ({expected})"
            )));
        }
        Ok(model)
    }
}

/// Rebuilds one branch. Conv branches put a ReLU after every layer; the head
/// puts one after every dense layer except the last.
fn branch_layers(tensors: &[(String, Tensor)], prefix: &str, conv: bool) -> Result<Vec<Layer<f32>>> {
    let mut indices: Vec<usize> = Vec::new();
    for (name, _) in tensors {
        let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) else {
            continue;
        };
        let (idx, kind) = rest
            .split_once('.')
            .ok_or_else(|| Error::Format(format!("bad tensor name {name:?}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::Format(format!("bad layer index in {name:?}")))?;
        if kind != "weight" && kind != "bias" {
            return Err(Error::Format(format!("bad tensor kind in {name:?}")));
        }
        if !indices.contains(&idx) {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    let find = |name: String| {
        tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let mut layers = Vec::new();
    for (k, &idx) in indices.iter().enumerate() {
        let w = find(format!("{prefix}.{idx}.weight"))?;
        let b = find(format!("{prefix}.{idx}.bias"))?;
        let (out, inp) = match w.dims() {
            [o, i] => (*o, *i),
            d => return Err(Error::Format(format!("{prefix}.{idx}.weight has dims {d:?}"))),
        };
        if b.dims() != [out] {
            return Err(Error::Format(format!("{prefix}.{idx}.bias has dims {:?}", b.dims())));
        }
        let affine = Affine {
            weight: Array2::from_shape_vec((out, inp), w.data().to_vec()).expect("dims checked"),
            bias: Array1::from_vec(b.data().to_vec()),
        };
        layers.push(if conv { Layer::Conv1x1(affine) } else { Layer::Dense(affine) });
        if conv || k + 1 < indices.len() {
            layers.push(Layer::Relu);
        }
    }
    Ok(layers)
}
