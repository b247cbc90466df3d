use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Scalar};

/// Shape-level description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv1x1 {
        in_channels: usize,
        out_channels: usize,
    },
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Relu,
}

/// Weight `(out, in)` and bias `(out)` of a 1x1 convolution or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Affine {
            weight: xavier_uniform((out_dim, in_dim), rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns `(d weight, d bias, d input)` for rows `x` with upstream `dy`.
    fn grads(&self, x: ArrayView2<T>, dy: ArrayView2<T>) -> (Array2<T>, Array1<T>, Array2<T>) {
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        (dw, db, dx)
    }

    pub fn cast<U: Scalar>(&self) -> Affine<U> {
        Affine {
            weight: self.weight.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
            bias: self.bias.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv1x1(Affine<T>),
    Dense(Affine<T>),
    Relu,
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv1x1(a) => LayerSpec::Conv1x1 {
                in_channels: a.in_dim(),
                out_channels: a.out_dim(),
            },
            Layer::Dense(a) => LayerSpec::Dense {
                in_units: a.in_dim(),
                out_units: a.out_dim(),
            },
            Layer::Relu => LayerSpec::Relu,
        }
    }

    pub fn from_spec(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        match spec {
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
            } => Layer::Conv1x1(Affine::xavier(in_channels, out_channels, rng)),
            LayerSpec::Dense {
                in_units,
                out_units,
            } => Layer::Dense(Affine::xavier(in_units, out_units, rng)),
            LayerSpec::Relu => Layer::Relu,
        }
    }

    pub fn affine(&self) -> Option<&Affine<T>> {
        match self {
            Layer::Conv1x1(a) | Layer::Dense(a) => Some(a),
            Layer::Relu => None,
        }
    }

    pub fn affine_mut(&mut self) -> Option<&mut Affine<T>> {
        match self {
            Layer::Conv1x1(a) | Layer::Dense(a) => Some(a),
            Layer::Relu => None,
        }
    }

    fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        match self {
            Layer::Dense(a) => {
                if x.ncols() != a.in_dim() {
                    return Err(Error::Config(format!(
                        "dense layer expects {} inputs, got {}",
                        a.in_dim(),
                        x.ncols()
                    )));
                }
                Ok(a.apply(x))
            }
            Layer::Conv1x1(a) => {
                let (rows, cells) = conv_rows(x.ncols(), a.in_dim())?;
                let batch = x.nrows();
                let flat = as_cell_rows(x, batch * cells, rows);
                let y = a.apply(flat.view());
                Ok(y
                    .into_shape_with_order((batch, cells * a.out_dim()))
                    .expect("contiguous conv output"))
            }
            Layer::Relu => Ok(x.mapv(|v| v.max(T::zero()))),
        }
    }
}

fn conv_rows(width: usize, in_channels: usize) -> Result<(usize, usize)> {
    if width == 0 || !width.is_multiple_of(in_channels) {
        return Err(Error::Config(format!(
            "1x1 conv with {in_channels} input channels cannot take {width} features"
        )));
    }
    Ok((in_channels, width / in_channels))
}

fn as_cell_rows<T: Scalar>(x: ArrayView2<T>, rows: usize, cols: usize) -> Array2<T> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("standard layout reshape")
}

/// Gradients of one [`Sequential`] backward pass.
#[derive(Debug, Clone)]
pub struct SequentialGrads<T> {
    /// One entry per parameter tensor, in [`Sequential::params`] order.
    pub params: Vec<ArrayD<T>>,
    pub input: Array2<T>,
}

/// An ordered chain of layers over a flattened `cells x channels` input.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    layers: Vec<Layer<T>>,
    input_cells: usize,
    input_channels: usize,
    cache: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> PartialEq for Sequential<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_cells == other.input_cells
            && self.input_channels == other.input_channels
    }
}

impl<T: Scalar> Sequential<T> {
    /// Validates that each layer accepts the previous layer's output.
    pub fn new(input_cells: usize, input_channels: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        if input_cells == 0 || input_channels == 0 {
            return Err(Error::Config("empty input shape".into()));
        }
        // Spatial layout survives until the first dense layer flattens it.
        let mut cells = input_cells;
        let mut channels = input_channels;
        for (i, layer) in layers.iter().enumerate() {
            match layer.spec() {
                LayerSpec::Conv1x1 {
                    in_channels,
                    out_channels,
                } => {
                    if in_channels != channels {
                        return Err(Error::Config(format!(
                            "layer {i}: conv expects {in_channels} channels, previous yields {channels}"
                        )));
                    }
                    channels = out_channels;
                }
                LayerSpec::Dense {
                    in_units,
                    out_units,
                } => {
                    if in_units != cells * channels {
                        return Err(Error::Config(format!(
                            "layer {i}: dense expects {in_units} inputs, previous yields {}",
                            cells * channels
                        )));
                    }
                    cells = 1;
                    channels = out_units;
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(Sequential {
            layers,
            input_cells,
            input_channels,
            cache: None,
        })
    }

    pub fn from_specs(
        input_cells: usize,
        input_channels: usize,
        specs: &[LayerSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = specs.iter().map(|&s| Layer::from_spec(s, rng)).collect();
        Sequential::new(input_cells, input_channels, layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input_cells * self.input_channels
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_cells, self.input_channels)
    }

    pub fn output_width(&self) -> usize {
        let mut width = self.input_width();
        for layer in &self.layers {
            match layer.spec() {
                LayerSpec::Conv1x1 {
                    in_channels,
                    out_channels,
                } => width = width / in_channels * out_channels,
                LayerSpec::Dense { out_units, .. } => width = out_units,
                LayerSpec::Relu => {}
            }
        }
        width
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Config(format!(
                "network expects {} input features, got {}",
                self.input_width(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    /// Forward pass that also records, for every ReLU input, whether it is
    /// strictly positive.
    pub fn infer_with_pattern(&self, x: ArrayView2<T>, pattern: &mut Vec<bool>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            if let Layer::Relu = layer {
                pattern.extend(h.iter().map(|v| *v > T::zero()));
            }
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    /// Forward pass that caches every layer input for [`Sequential::backward`].
    pub fn forward(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let next = layer.forward(h.view())?;
            cache.push(h);
            h = next;
        }
        self.cache = Some(cache);
        Ok(h)
    }

    /// Backpropagates `dy` through the cached forward pass. The cache is
    /// consumed; a second call without a new forward is a state error.
    pub fn backward(&mut self, dy: Array2<T>) -> Result<SequentialGrads<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let mut grad = dy;
        let mut param_grads: Vec<ArrayD<T>> = Vec::new();
        for (layer, input) in self.layers.iter().zip(&cache).rev() {
            grad = match layer {
                Layer::Relu => {
                    let mut g = grad;
                    Zip::from(&mut g).and(input).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    g
                }
                Layer::Dense(a) => {
                    let (dw, db, dx) = a.grads(input.view(), grad.view());
                    param_grads.push(db.into_dyn());
                    param_grads.push(dw.into_dyn());
                    dx
                }
                Layer::Conv1x1(a) => {
                    let batch = input.nrows();
                    let cells = input.ncols() / a.in_dim();
                    let x = as_cell_rows(input.view(), batch * cells, a.in_dim());
                    let g = as_cell_rows(grad.view(), batch * cells, a.out_dim());
                    let (dw, db, dx) = a.grads(x.view(), g.view());
                    param_grads.push(db.into_dyn());
                    param_grads.push(dw.into_dyn());
                    dx.into_shape_with_order((batch, cells * a.in_dim()))
                        .expect("contiguous conv gradient")
                }
            };
        }
        param_grads.reverse();
        Ok(SequentialGrads {
            params: param_grads,
            input: grad,
        })
    }

    /// Parameter tensors in order: for each affine layer, weight then bias.
    pub fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut out = Vec::new();
        for a in self.layers.iter().filter_map(Layer::affine) {
            out.push(a.weight.view().into_dyn());
            out.push(a.bias.view().into_dyn());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = Vec::new();
        for a in self.layers.iter_mut().filter_map(Layer::affine_mut) {
            out.push(a.weight.view_mut().into_dyn());
            out.push(a.bias.view_mut().into_dyn());
        }
        out
    }

    /// `(suffix, tensor)` pairs named `<layer index>.weight` / `<layer index>.bias`.
    pub fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(a) = layer.affine() {
                out.push((format!("{i}.weight"), a.weight.view().into_dyn()));
                out.push((format!("{i}.bias"), a.bias.view().into_dyn()));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv1x1(a) => Layer::Conv1x1(a.cast()),
                    Layer::Dense(a) => Layer::Dense(a.cast()),
                    Layer::Relu => Layer::Relu,
                })
                .collect(),
            input_cells: self.input_cells,
            input_channels: self.input_channels,
            cache: None,
        }
    }
}
