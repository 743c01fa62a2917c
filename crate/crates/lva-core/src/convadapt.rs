//! Convolution layers, their fully connected unfolding, and closed-form
//! adaptation of a convolutional last layer.
//!
//! A convolution that slides a kernel over image patches computes the same
//! numbers as one weight matrix applied to rows of flattened patches.
//! [`im2col`] extracts those rows, [`kernel_as_matrix`] lays the kernel out as
//! that matrix, and [`fold`] puts per-position outputs back into an image, so
//! the least-squares machinery built for fully connected layers carries over
//! to convolutional ones unchanged.

use serde::{Deserialize, Serialize};

use crate::align::{Alignment, PairedDataset};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, matvec, Matrix};
use crate::net::Activation;

/// A convolution kernel with its bias, stride, and symmetric zero padding.
///
/// Weights form a 4-index array over kernel row `i`, kernel column `j`, input
/// channel `alpha`, and output channel `beta`, stored flat with `beta`
/// fastest. [`kernel_as_matrix`] exposes the same numbers as an
/// `out_channels x (kernel_h * kernel_w * in_channels)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Vec<f64>,
    bias: Vec<f64>,
    kernel_h: usize,
    kernel_w: usize,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    padding: usize,
}

impl ConvKernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<ConvKernel> {
        if kernel_h == 0 || kernel_w == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::argument("ConvKernel", "every dimension must be at least one"));
        }
        if stride == 0 {
            return Err(Error::argument("ConvKernel", "stride must be at least one"));
        }
        let expected = kernel_h * kernel_w * in_channels * out_channels;
        if weights.len() != expected {
            return Err(Error::shape(
                "ConvKernel",
                format!("{} weights cannot fill a {kernel_h}x{kernel_w}x{in_channels}x{out_channels} kernel", weights.len()),
            ));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(
                "ConvKernel",
                format!("bias length {} does not match {out_channels} output channels", bias.len()),
            ));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::data("ConvKernel", "weights and bias must be finite"));
        }
        Ok(ConvKernel { weights, bias, kernel_h, kernel_w, in_channels, out_channels, stride, padding })
    }

    /// All-zero kernel of the given shape.
    pub fn zeros(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvKernel> {
        let weights = vec![0.0; kernel_h * kernel_w * in_channels * out_channels];
        ConvKernel::new(kernel_h, kernel_w, in_channels, out_channels, stride, padding, weights, vec![0.0; out_channels])
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Flattened patch length, `kernel_h * kernel_w * in_channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn weight(&self, i: usize, j: usize, alpha: usize, beta: usize) -> f64 {
        self.weights[self.flat_index(i, j, alpha, beta)]
    }

    pub fn set_weight(&mut self, i: usize, j: usize, alpha: usize, beta: usize, value: f64) {
        let idx = self.flat_index(i, j, alpha, beta);
        self.weights[idx] = value;
    }

    /// Weights flat in `(i, j, alpha, beta)` order, `beta` fastest.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn flat_index(&self, i: usize, j: usize, alpha: usize, beta: usize) -> usize {
        debug_assert!(i < self.kernel_h && j < self.kernel_w && alpha < self.in_channels && beta < self.out_channels);
        ((i * self.kernel_w + j) * self.in_channels + alpha) * self.out_channels + beta
    }
}

/// A single image held channel-major: entry `(c, y, x)` lives at
/// `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<ImageTensor> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::argument("ImageTensor", "every dimension must be at least one"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageTensor",
                format!("{} values cannot fill a {height}x{width}x{channels} image", data.len()),
            ));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> ImageTensor {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Flattened receptive fields of one image, one row per output position.
#[derive(Clone, Debug)]
pub struct PatchMatrix {
    /// One row per output position, columns ordered by kernel row `i`, then
    /// kernel column `j`, then input channel `alpha` (`alpha` fastest).
    pub matrix: Matrix,
    /// Output position `(k, l)` of each row; rows run over positions with `l`
    /// fastest.
    pub position_index: Vec<(usize, usize)>,
}

pub(crate) fn conv_output_dims(
    op: &'static str,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let padded_h = height + 2 * padding;
    let padded_w = width + 2 * padding;
    if kernel_h > padded_h || kernel_w > padded_w {
        return Err(Error::shape(
            op,
            format!("kernel {kernel_h}x{kernel_w} exceeds padded image {padded_h}x{padded_w}"),
        ));
    }
    Ok(((padded_h - kernel_h) / stride + 1, (padded_w - kernel_w) / stride + 1))
}

/// Applies `kernel` to `image` by direct cross-correlation.
///
/// Output height is `(height + 2 * padding - kernel_h) / stride + 1` with
/// integer division, likewise for width; taps that fall into the padding read
/// zero.
pub fn conv_forward(kernel: &ConvKernel, image: &ImageTensor) -> Result<ImageTensor> {
    if image.channels != kernel.in_channels {
        return Err(Error::shape(
            "conv_forward",
            format!("image has {} channels, kernel expects {}", image.channels, kernel.in_channels),
        ));
    }
    let (out_h, out_w) = conv_output_dims(
        "conv_forward",
        image.height,
        image.width,
        kernel.kernel_h,
        kernel.kernel_w,
        kernel.stride,
        kernel.padding,
    )?;
    let mut out = ImageTensor::zeros(out_h, out_w, kernel.out_channels);
    for beta in 0..kernel.out_channels {
        for k in 0..out_h {
            for l in 0..out_w {
                let mut acc = kernel.bias[beta];
                for i in 0..kernel.kernel_h {
                    let y = (k * kernel.stride + i) as isize - kernel.padding as isize;
                    if y < 0 || y >= image.height as isize {
                        continue;
                    }
                    for j in 0..kernel.kernel_w {
                        let x = (l * kernel.stride + j) as isize - kernel.padding as isize;
                        if x < 0 || x >= image.width as isize {
                            continue;
                        }
                        for alpha in 0..kernel.in_channels {
                            acc = kernel
                                .weight(i, j, alpha, beta)
                                .mul_add(image.get(alpha, y as usize, x as usize), acc);
                        }
                    }
                }
                out.set(beta, k, l, acc);
            }
        }
    }
    Ok(out)
}

/// Extracts the receptive field of every output position as a matrix row.
///
/// Columns are ordered by kernel row `i`, then kernel column `j`, then input
/// channel `alpha`, so column `(i * kernel_w + j) * channels + alpha` holds
/// the tap at kernel offset `(i, j)` in channel `alpha`. Taps that fall into
/// the padding are literal zeros.
pub fn im2col(
    image: &ImageTensor,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<PatchMatrix> {
    if kernel_h == 0 || kernel_w == 0 {
        return Err(Error::argument("im2col", "kernel dimensions must be at least one"));
    }
    if stride == 0 {
        return Err(Error::argument("im2col", "stride must be at least one"));
    }
    let (out_h, out_w) = conv_output_dims("im2col", image.height, image.width, kernel_h, kernel_w, stride, padding)?;
    let channels = image.channels;
    let mut matrix = Matrix::zeros(out_h * out_w, kernel_h * kernel_w * channels);
    let mut position_index = Vec::with_capacity(out_h * out_w);
    for k in 0..out_h {
        for l in 0..out_w {
            let row = matrix.row_mut(k * out_w + l);
            for i in 0..kernel_h {
                let y = (k * stride + i) as isize - padding as isize;
                if y < 0 || y >= image.height as isize {
                    continue;
                }
                for j in 0..kernel_w {
                    let x = (l * stride + j) as isize - padding as isize;
                    if x < 0 || x >= image.width as isize {
                        continue;
                    }
                    for alpha in 0..channels {
                        row[(i * kernel_w + j) * channels + alpha] = image.get(alpha, y as usize, x as usize);
                    }
                }
            }
            position_index.push((k, l));
        }
    }
    Ok(PatchMatrix { matrix, position_index })
}

/// Lays the kernel out as the matrix acting on [`im2col`] rows.
///
/// Row `beta` holds output channel `beta`'s weights in the same column order
/// `im2col` uses, so convolution becomes
/// `patches * kernel_as_matrix(kernel).transpose() + bias`.
pub fn kernel_as_matrix(kernel: &ConvKernel) -> Matrix {
    Matrix::from_fn(kernel.out_channels, kernel.patch_len(), |beta, col| {
        kernel.weights[col * kernel.out_channels + beta]
    })
}

/// Rebuilds a [`ConvKernel`] from its [`kernel_as_matrix`] form.
pub fn kernel_from_matrix(
    matrix: &Matrix,
    kernel_h: usize,
    kernel_w: usize,
    in_channels: usize,
    stride: usize,
    padding: usize,
    bias: Vec<f64>,
) -> Result<ConvKernel> {
    let out_channels = matrix.rows();
    if matrix.cols() != kernel_h * kernel_w * in_channels {
        return Err(Error::shape(
            "kernel_from_matrix",
            format!(
                "matrix has {} columns, a {kernel_h}x{kernel_w}x{in_channels} kernel needs {}",
                matrix.cols(),
                kernel_h * kernel_w * in_channels
            ),
        ));
    }
    let mut weights = vec![0.0; matrix.cols() * out_channels];
    for beta in 0..out_channels {
        for col in 0..matrix.cols() {
            weights[col * out_channels + beta] = matrix.get(beta, col);
        }
    }
    ConvKernel::new(kernel_h, kernel_w, in_channels, out_channels, stride, padding, weights, bias)
}

/// Reassembles per-position channel values into an image.
///
/// `values` must hold one row per output position in the row order [`im2col`]
/// produces (`l` fastest) and one column per channel.
pub fn fold(values: &Matrix, height: usize, width: usize) -> Result<ImageTensor> {
    if values.rows() != height * width {
        return Err(Error::shape(
            "fold",
            format!("{} rows cannot fill a {height}x{width} position grid", values.rows()),
        ));
    }
    if values.cols() == 0 {
        return Err(Error::shape("fold", "need at least one channel column"));
    }
    let channels = values.cols();
    let mut out = ImageTensor::zeros(height, width, channels);
    for k in 0..height {
        for l in 0..width {
            for c in 0..channels {
                out.set(c, k, l, values.get(k * width + l, c));
            }
        }
    }
    Ok(out)
}

/// Scatters per-patch gradients back onto an image, summing overlapping taps.
/// Adjoint of [`im2col`] with the same kernel geometry.
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_accumulate(
    patch_grads: &Matrix,
    height: usize,
    width: usize,
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Result<ImageTensor> {
    let (out_h, out_w) = conv_output_dims("col2im", height, width, kernel_h, kernel_w, stride, padding)?;
    if patch_grads.rows() != out_h * out_w || patch_grads.cols() != kernel_h * kernel_w * channels {
        return Err(Error::shape(
            "col2im",
            format!(
                "gradient is {}x{}, geometry calls for {}x{}",
                patch_grads.rows(),
                patch_grads.cols(),
                out_h * out_w,
                kernel_h * kernel_w * channels
            ),
        ));
    }
    let mut out = ImageTensor::zeros(height, width, channels);
    for k in 0..out_h {
        for l in 0..out_w {
            let row = patch_grads.row(k * out_w + l);
            for i in 0..kernel_h {
                let y = (k * stride + i) as isize - padding as isize;
                if y < 0 || y >= height as isize {
                    continue;
                }
                for j in 0..kernel_w {
                    let x = (l * stride + j) as isize - padding as isize;
                    if x < 0 || x >= width as isize {
                        continue;
                    }
                    for alpha in 0..channels {
                        let v = out.get(alpha, y as usize, x as usize) + row[(i * kernel_w + j) * channels + alpha];
                        out.set(alpha, y as usize, x as usize, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One convolutional layer: a kernel followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: ConvKernel,
    pub activation: Activation,
}

/// A convolutional network applied layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Cnn {
    pub layers: Vec<ConvLayer>,
}

impl Cnn {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Cnn> {
        let net = Cnn { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::data("Cnn", "a network needs at least one layer"));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.activation.validate()?;
            if idx + 1 < self.layers.len() && self.layers[idx + 1].kernel.in_channels != layer.kernel.out_channels {
                return Err(Error::shape(
                    "Cnn",
                    format!(
                        "layer {idx} emits {} channels, layer {} expects {}",
                        layer.kernel.out_channels,
                        idx + 1,
                        self.layers[idx + 1].kernel.in_channels
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].kernel.in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].kernel.out_channels
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ImageTensor> {
        self.latent(image, self.layers.len())
    }

    /// Feature map entering layer `layer_index`; `0` returns the input itself
    /// and `n_layers` the network output.
    pub fn latent(&self, image: &ImageTensor, layer_index: usize) -> Result<ImageTensor> {
        if layer_index > self.layers.len() {
            return Err(Error::argument(
                "Cnn::latent",
                format!("layer index {layer_index} exceeds depth {}", self.layers.len()),
            ));
        }
        let mut h = image.clone();
        for layer in &self.layers[..layer_index] {
            let mut z = conv_forward(&layer.kernel, &h)?;
            for v in z.data_mut() {
                *v = layer.activation.apply(*v);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn to_json(&self) -> String {
        let dto = CnnDto {
            conv_layers: self
                .layers
                .iter()
                .map(|l| {
                    let k = &l.kernel;
                    let weights = (0..k.kernel_h)
                        .map(|i| {
                            (0..k.kernel_w)
                                .map(|j| {
                                    (0..k.in_channels)
                                        .map(|a| (0..k.out_channels).map(|b| k.weight(i, j, a, b)).collect())
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                    ConvLayerDto {
                        weights,
                        bias: k.bias.clone(),
                        stride: k.stride,
                        padding: k.padding,
                        activation: l.activation,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Cnn> {
        let dto: CnnDto = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: "network json".into(),
            details: e.to_string(),
        })?;
        let mut layers = Vec::with_capacity(dto.conv_layers.len());
        for (idx, l) in dto.conv_layers.into_iter().enumerate() {
            let kernel_h = l.weights.len();
            let kernel_w = l.weights.first().map_or(0, |r| r.len());
            let in_channels = l.weights.first().and_then(|r| r.first()).map_or(0, |c| c.len());
            let out_channels = l
                .weights
                .first()
                .and_then(|r| r.first())
                .and_then(|c| c.first())
                .map_or(0, |b| b.len());
            let mut flat = Vec::with_capacity(kernel_h * kernel_w * in_channels * out_channels);
            for plane in &l.weights {
                if plane.len() != kernel_w {
                    return Err(ragged("kernel rows", idx));
                }
                for cell in plane {
                    if cell.len() != in_channels {
                        return Err(ragged("input channels", idx));
                    }
                    for chan in cell {
                        if chan.len() != out_channels {
                            return Err(ragged("output channels", idx));
                        }
                        flat.extend_from_slice(chan);
                    }
                }
            }
            let kernel =
                ConvKernel::new(kernel_h, kernel_w, in_channels, out_channels, l.stride, l.padding, flat, l.bias)?;
            layers.push(ConvLayer { kernel, activation: l.activation });
        }
        Cnn::new(layers)
    }
}

fn ragged(what: &str, layer: usize) -> Error {
    Error::Parse {
        source_name: "network json".into(),
        details: format!("layer {layer}: ragged {what}"),
    }
}

#[derive(Serialize, Deserialize)]
struct CnnDto {
    conv_layers: Vec<ConvLayerDto>,
}

#[derive(Serialize, Deserialize)]
struct ConvLayerDto {
    weights: Vec<Vec<Vec<Vec<f64>>>>,
    bias: Vec<f64>,
    stride: usize,
    padding: usize,
    activation: Activation,
}

/// A set of input images paired with label images of uniform shapes.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    inputs: Vec<ImageTensor>,
    labels: Vec<ImageTensor>,
    pub name: String,
}

impl ImageDataset {
    pub fn new(inputs: Vec<ImageTensor>, labels: Vec<ImageTensor>, name: impl Into<String>) -> Result<ImageDataset> {
        let name = name.into();
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::data(
                "ImageDataset",
                format!("{} inputs against {} labels", inputs.len(), labels.len()),
            ));
        }
        for set in [&inputs, &labels] {
            let first = &set[0];
            for img in set.iter() {
                if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
                    return Err(Error::shape("ImageDataset", "images must share one shape"));
                }
                if !img.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::data("ImageDataset", "image values must be finite"));
                }
            }
        }
        Ok(ImageDataset { inputs, labels, name })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &ImageTensor {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> &ImageTensor {
        &self.labels[i]
    }

    /// `(height, width, channels)` of every input image.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        let img = &self.inputs[0];
        (img.height, img.width, img.channels)
    }

    /// `(height, width, channels)` of every label image.
    pub fn label_dims(&self) -> (usize, usize, usize) {
        let img = &self.labels[0];
        (img.height, img.width, img.channels)
    }

    /// Flattens each image pair into one row, channel-major, so alignment and
    /// CSV storage can treat images as plain vectors.
    pub fn to_paired(&self) -> Result<PairedDataset> {
        let (h, w, c) = self.input_dims();
        let inputs = Matrix::from_fn(self.len(), h * w * c, |i, j| self.inputs[i].data[j]);
        let (lh, lw, lc) = self.label_dims();
        let labels = Matrix::from_fn(self.len(), lh * lw * lc, |i, j| self.labels[i].data[j]);
        PairedDataset::new(inputs, labels, self.name.clone())
    }

    /// Inverse of [`ImageDataset::to_paired`] given the image shapes.
    pub fn from_paired(
        data: &PairedDataset,
        input_dims: (usize, usize, usize),
        label_dims: (usize, usize, usize),
    ) -> Result<ImageDataset> {
        let (h, w, c) = input_dims;
        if data.input_dim() != h * w * c {
            return Err(Error::shape(
                "ImageDataset",
                format!("row length {} does not match a {h}x{w}x{c} image", data.input_dim()),
            ));
        }
        let (lh, lw, lc) = label_dims;
        if data.label_dim() != lh * lw * lc {
            return Err(Error::shape(
                "ImageDataset",
                format!("label length {} does not match a {lh}x{lw}x{lc} image", data.label_dim()),
            ));
        }
        let inputs = (0..data.len())
            .map(|i| ImageTensor::new(h, w, c, data.inputs.row(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..data.len())
            .map(|i| ImageTensor::new(lh, lw, lc, data.labels.row(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        ImageDataset::new(inputs, labels, data.name.clone())
    }
}

/// Closed-form correction of the last convolutional layer.
///
/// Every output position of every target image contributes one regression
/// row: the flattened receptive field of the penultimate feature map, plus a
/// constant-one bias column, against that position's residue. The residue
/// takes the same first-order form as [`crate::lva::transferal_residue`]'s
/// latent variant, with the penultimate feature map as the latent and
/// [`kernel_as_matrix`] of the last kernel as its jacobian. One least-squares
/// solve then corrects all positions at once, so the weights stay shared
/// across the image.
pub fn lva_conv_last_layer(
    cnn: &Cnn,
    alignment: &Alignment,
    source: &ImageDataset,
    target: &ImageDataset,
    ridge: f64,
) -> Result<ConvKernel> {
    cnn.validate()?;
    let n = cnn.n_layers();
    let last_layer = &cnn.layers[n - 1];
    if last_layer.activation != Activation::Identity {
        return Err(Error::UnsupportedModel(format!(
            "closed-form adaptation needs an affine last layer, found {:?}",
            last_layer.activation
        )));
    }
    let last = &last_layer.kernel;
    if source.input_dims() != target.input_dims() || source.label_dims() != target.label_dims() {
        return Err(Error::shape("lva_conv", "source and target image shapes must match"));
    }
    let (in_h, in_w, in_c) = target.input_dims();
    if in_c != cnn.input_channels() {
        return Err(Error::shape(
            "lva_conv",
            format!("images carry {in_c} channels, network expects {}", cnn.input_channels()),
        ));
    }
    let (mut h, mut w) = (in_h, in_w);
    for layer in &cnn.layers {
        let k = &layer.kernel;
        let dims = conv_output_dims("lva_conv", h, w, k.kernel_h, k.kernel_w, k.stride, k.padding)?;
        h = dims.0;
        w = dims.1;
    }
    if target.label_dims() != (h, w, cnn.output_channels()) {
        return Err(Error::shape(
            "lva_conv",
            format!(
                "labels are {:?}, network outputs ({h}, {w}, {})",
                target.label_dims(),
                cnn.output_channels()
            ),
        ));
    }
    if alignment.source_index.len() != target.len() {
        return Err(Error::data(
            "lva_conv",
            format!("alignment covers {} pairs, target holds {}", alignment.source_index.len(), target.len()),
        ));
    }
    if let Some(&j) = alignment.source_index.iter().find(|&&j| j >= source.len()) {
        return Err(Error::data("lva_conv", format!("alignment points at source image {j} of {}", source.len())));
    }

    let w_unf = kernel_as_matrix(last);
    let kdim = last.patch_len();
    let out_c = last.out_channels;
    let positions = h * w;
    let nt = target.len();

    let mut design = Matrix::zeros(nt * positions, kdim + 1);
    let mut q = Matrix::zeros(nt * positions, out_c);
    for i in 0..nt {
        let j = alignment.source_index[i];
        let z_tgt = cnn.latent(target.input(i), n - 1)?;
        let z_src = cnn.latent(source.input(j), n - 1)?;
        let patches_tgt = im2col(&z_tgt, last.kernel_h, last.kernel_w, last.stride, last.padding)?;
        let patches_src = im2col(&z_src, last.kernel_h, last.kernel_w, last.stride, last.padding)?;
        let y_tgt = target.label(i);
        let y_src = source.label(j);
        for r in 0..positions {
            let row = i * positions + r;
            let (k, l) = patches_tgt.position_index[r];
            design.row_mut(row)[..kdim].copy_from_slice(patches_tgt.matrix.row(r));
            design.set(row, kdim, 1.0);
            let dz: Vec<f64> = patches_tgt
                .matrix
                .row(r)
                .iter()
                .zip(patches_src.matrix.row(r))
                .map(|(&t, &s)| t - s)
                .collect();
            let correction = matvec(&w_unf, &dz);
            let pred_src = matvec(&w_unf, patches_src.matrix.row(r));
            for beta in 0..out_c {
                let label_shift = y_tgt.get(beta, k, l) - y_src.get(beta, k, l);
                let pretrain_error = y_src.get(beta, k, l) - (pred_src[beta] + last.bias[beta]);
                q.set(row, beta, label_shift - correction[beta] + pretrain_error);
            }
        }
    }

    let sol = least_squares(&design, &q, ridge)?;
    let new_mat = Matrix::from_fn(out_c, kdim, |beta, col| w_unf.get(beta, col) + sol.coefficients.get(col, beta));
    let new_bias: Vec<f64> = last
        .bias
        .iter()
        .enumerate()
        .map(|(beta, &b)| b + sol.coefficients.get(kdim, beta))
        .collect();
    kernel_from_matrix(&new_mat, last.kernel_h, last.kernel_w, last.in_channels, last.stride, last.padding, new_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{align_nearest, JointMetric};
    use crate::lva::{lva_one_layer, ResidueVariant};
    use crate::net::{Layer, Mlp};
    use crate::rng::{normal, uniform_in, Stream};

    fn random_kernel(seed: u64, kh: usize, kw: usize, in_c: usize, out_c: usize, stride: usize, padding: usize) -> ConvKernel {
        let len = kh * kw * in_c * out_c;
        let weights: Vec<f64> = (0..len).map(|t| uniform_in(seed, Stream::WeightInit, t as u64, -1.0, 1.0)).collect();
        let bias: Vec<f64> = (0..out_c)
            .map(|t| uniform_in(seed, Stream::WeightInit, (len + t) as u64, -0.5, 0.5))
            .collect();
        ConvKernel::new(kh, kw, in_c, out_c, stride, padding, weights, bias).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
        let data: Vec<f64> = (0..h * w * c).map(|t| uniform_in(seed, Stream::ImageField, t as u64, -1.0, 1.0)).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    /// Materializes the zero-padded image, then sums taps one at a time.
    /// Independent of `conv_forward`'s bounds arithmetic.
    fn conv_oracle(kernel: &ConvKernel, image: &ImageTensor) -> ImageTensor {
        let (h, w, c) = (image.height(), image.width(), image.channels());
        let (p, s) = (kernel.padding(), kernel.stride());
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![0.0; c * ph * pw];
        for a in 0..c {
            for y in 0..h {
                for x in 0..w {
                    padded[(a * ph + y + p) * pw + x + p] = image.get(a, y, x);
                }
            }
        }
        let out_h = (ph - kernel.kernel_h()) / s + 1;
        let out_w = (pw - kernel.kernel_w()) / s + 1;
        let mut out = ImageTensor::zeros(out_h, out_w, kernel.out_channels());
        for beta in 0..kernel.out_channels() {
            for k in 0..out_h {
                for l in 0..out_w {
                    let mut acc = kernel.bias()[beta];
                    for i in 0..kernel.kernel_h() {
                        for j in 0..kernel.kernel_w() {
                            for alpha in 0..kernel.in_channels() {
                                acc += kernel.weight(i, j, alpha, beta) * padded[(alpha * ph + k * s + i) * pw + l * s + j];
                            }
                        }
                    }
                    out.set(beta, k, l, acc);
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
        assert_eq!((a.height(), a.width(), a.channels()), (b.height(), b.width(), b.channels()));
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_by_one_identity_kernel_passes_image_through() {
        let c = 3;
        let mut kernel = ConvKernel::zeros(1, 1, c, c, 1, 0).unwrap();
        for a in 0..c {
            kernel.set_weight(0, 0, a, a, 1.0);
        }
        let image = random_image(1, 4, 5, c);
        let out = conv_forward(&kernel, &image).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn all_ones_kernel_sums_constant_image() {
        let weights = vec![1.0; 9];
        let kernel = ConvKernel::new(3, 3, 1, 1, 1, 1, weights, vec![0.0]).unwrap();
        let image = ImageTensor::new(5, 5, 1, vec![1.0; 25]).unwrap();
        let out = conv_forward(&kernel, &image).unwrap();
        assert_eq!(out.get(0, 2, 2), 9.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 2), 6.0);
    }

    #[test]
    fn conv_matches_padded_loop_oracle() {
        let kernel = random_kernel(7, 3, 3, 2, 4, 1, 1);
        let image = random_image(8, 8, 8, 2);
        let out = conv_forward(&kernel, &image).unwrap();
        let expect = conv_oracle(&kernel, &image);
        assert!(max_abs_diff(&out, &expect) < 1e-13);

        let strided = random_kernel(9, 2, 3, 3, 2, 2, 0);
        let image = random_image(10, 7, 9, 3);
        let out = conv_forward(&strided, &image).unwrap();
        let expect = conv_oracle(&strided, &image);
        assert!(max_abs_diff(&out, &expect) < 1e-13);
    }

    #[test]
    fn im2col_one_by_one_kernel_lists_pixels() {
        let image = random_image(11, 2, 3, 2);
        let patches = im2col(&image, 1, 1, 1, 0).unwrap();
        assert_eq!(patches.matrix.rows(), 6);
        assert_eq!(patches.matrix.cols(), 2);
        for (r, &(k, l)) in patches.position_index.iter().enumerate() {
            assert_eq!((k, l), (r / 3, r % 3));
            assert_eq!(patches.matrix.row(r), &[image.get(0, k, l), image.get(1, k, l)]);
        }
    }

    #[test]
    fn im2col_full_cover_kernel_gives_single_documented_row() {
        let image = ImageTensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let patches = im2col(&image, 2, 2, 1, 0).unwrap();
        assert_eq!(patches.matrix.rows(), 1);
        assert_eq!(patches.position_index, vec![(0, 0)]);
        assert_eq!(patches.matrix.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_padding_entries_are_zero() {
        let image = ImageTensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let patches = im2col(&image, 3, 3, 1, 1).unwrap();
        assert_eq!(patches.matrix.rows(), 4);
        let row = patches.matrix.row(0);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i >= 1 && j >= 1 { image.get(0, i - 1, j - 1) } else { 0.0 };
                assert_eq!(row[i * 3 + j], expected);
            }
        }
    }

    #[test]
    fn kernel_as_matrix_smallest_case() {
        let kernel = ConvKernel::new(1, 1, 1, 1, 1, 0, vec![0.75], vec![0.0]).unwrap();
        let m = kernel_as_matrix(&kernel);
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert_eq!(m.get(0, 0), 0.75);
    }

    #[test]
    fn kernel_as_matrix_column_order_enumeration() {
        let mut kernel = ConvKernel::zeros(2, 2, 1, 1, 1, 0).unwrap();
        kernel.set_weight(0, 0, 0, 0, 1.0);
        kernel.set_weight(0, 1, 0, 0, 2.0);
        kernel.set_weight(1, 0, 0, 0, 3.0);
        kernel.set_weight(1, 1, 0, 0, 4.0);
        let m = kernel_as_matrix(&kernel);
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfolding_reproduces_convolution_on_random_shapes() {
        for trial in 0..12u64 {
            let pick = |slot: u64, lo: usize, hi: usize| {
                uniform_in(trial, Stream::Trial, slot, lo as f64, hi as f64 + 1.0).floor() as usize
            };
            let (h, w) = (pick(0, 3, 8), pick(1, 3, 8));
            let (in_c, out_c) = (pick(2, 1, 3), pick(3, 1, 3));
            let (kh, kw) = (pick(4, 1, 3), pick(5, 1, 3));
            let stride = pick(6, 1, 2);
            let padding = pick(7, 0, 2);
            let kernel = random_kernel(trial + 100, kh, kw, in_c, out_c, stride, padding);
            let image = random_image(trial + 200, h, w, in_c);

            let direct = conv_forward(&kernel, &image).unwrap();
            let patches = im2col(&image, kh, kw, stride, padding).unwrap();
            let mut product = crate::linalg::matmul(&patches.matrix, &kernel_as_matrix(&kernel).transpose()).unwrap();
            for r in 0..product.rows() {
                for c in 0..product.cols() {
                    let v = product.get(r, c) + kernel.bias()[c];
                    product.set(r, c, v);
                }
            }
            let unfolded = fold(&product, direct.height(), direct.width()).unwrap();
            assert!(
                max_abs_diff(&direct, &unfolded) < 1e-12,
                "trial {trial}: direct and unfolded paths disagree"
            );
            assert!(max_abs_diff(&direct, &conv_oracle(&kernel, &image)) < 1e-13);
        }
    }

    #[test]
    fn kernel_matrix_round_trip_is_identity() {
        let kernel = random_kernel(5, 3, 2, 2, 3, 2, 1);
        let m = kernel_as_matrix(&kernel);
        let back = kernel_from_matrix(&m, 3, 2, 2, 2, 1, kernel.bias().to_vec()).unwrap();
        assert_eq!(back, kernel);
        let again = kernel_as_matrix(&back);
        assert_eq!(again.data(), m.data());
    }

    #[test]
    fn fold_places_rows_at_their_positions() {
        let values = Matrix::from_rows(vec![
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 30.0],
            vec![4.0, 40.0],
        ])
        .unwrap();
        let img = fold(&values, 2, 2).unwrap();
        for k in 0..2 {
            for l in 0..2 {
                assert_eq!(img.get(0, k, l), values.get(k * 2 + l, 0));
                assert_eq!(img.get(1, k, l), values.get(k * 2 + l, 1));
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let image = random_image(13, 6, 5, 2);
        let (kh, kw, stride, padding) = (3, 2, 2, 1);
        let patches = im2col(&image, kh, kw, stride, padding).unwrap();
        let grads = Matrix::from_fn(patches.matrix.rows(), patches.matrix.cols(), |r, c| {
            normal(14, Stream::Trial, (r * patches.matrix.cols() + c) as u64)
        });
        let scattered = col2im_accumulate(&grads, 6, 5, 2, kh, kw, stride, padding).unwrap();

        let lhs: f64 = grads.data().iter().zip(patches.matrix.data()).map(|(&g, &p)| g * p).sum();
        let rhs: f64 = scattered.data().iter().zip(image.data()).map(|(&s, &x)| s * x).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let image = ImageTensor::new(3, 3, 1, vec![0.0; 9]).unwrap();
        assert!(matches!(im2col(&image, 5, 5, 1, 0), Err(Error::Shape { .. })));
        assert!(matches!(im2col(&image, 3, 3, 0, 0), Err(Error::Argument { .. })));
        let kernel = random_kernel(1, 2, 2, 3, 1, 1, 0);
        assert!(matches!(conv_forward(&kernel, &image), Err(Error::Shape { .. })));
        assert!(matches!(ImageTensor::new(2, 2, 1, vec![0.0; 3]), Err(Error::Shape { .. })));
        assert!(ConvKernel::new(2, 2, 1, 1, 1, 0, vec![0.0; 3], vec![0.0]).is_err());
        let values = Matrix::zeros(5, 1);
        assert!(fold(&values, 2, 2).is_err());
    }

    fn two_layer_cnn(seed: u64) -> Cnn {
        Cnn::new(vec![
            ConvLayer { kernel: random_kernel(seed, 3, 3, 1, 3, 1, 1), activation: Activation::ReLU },
            ConvLayer { kernel: random_kernel(seed + 1, 3, 3, 3, 1, 1, 1), activation: Activation::Identity },
        ])
        .unwrap()
    }

    fn image_set_for(cnn: &Cnn, seed: u64, count: usize, h: usize, w: usize) -> ImageDataset {
        let inputs: Vec<ImageTensor> = (0..count).map(|i| random_image(seed + i as u64, h, w, cnn.input_channels())).collect();
        let labels: Vec<ImageTensor> = inputs.iter().map(|x| cnn.forward(x).unwrap()).collect();
        ImageDataset::new(inputs, labels, "set").unwrap()
    }

    #[test]
    fn cnn_latent_and_forward_compose() {
        let cnn = two_layer_cnn(21);
        let image = random_image(22, 6, 6, 1);
        assert_eq!(cnn.latent(&image, 0).unwrap(), image);
        let z = cnn.latent(&image, 1).unwrap();
        let manual = {
            let mut z = conv_forward(&cnn.layers[0].kernel, &image).unwrap();
            for v in z.data_mut() {
                *v = cnn.layers[0].activation.apply(*v);
            }
            z
        };
        assert_eq!(z, manual);
        assert_eq!(cnn.latent(&image, 2).unwrap(), cnn.forward(&image).unwrap());
        assert!(cnn.latent(&image, 3).is_err());
    }

    #[test]
    fn cnn_rejects_channel_mismatch() {
        let err = Cnn::new(vec![
            ConvLayer { kernel: random_kernel(1, 3, 3, 1, 4, 1, 1), activation: Activation::ReLU },
            ConvLayer { kernel: random_kernel(2, 3, 3, 3, 1, 1, 1), activation: Activation::Identity },
        ]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn cnn_json_round_trip_is_bit_exact() {
        let cnn = Cnn::new(vec![
            ConvLayer { kernel: random_kernel(31, 2, 3, 2, 3, 2, 1), activation: Activation::LeakyReLU { slope: 0.05 } },
            ConvLayer { kernel: random_kernel(32, 1, 1, 3, 1, 1, 0), activation: Activation::Identity },
        ])
        .unwrap();
        let text = cnn.to_json();
        let back = Cnn::from_json(&text).unwrap();
        assert_eq!(back, cnn);
        assert!(text.contains("conv_layers"));
    }

    #[test]
    fn cnn_json_rejects_malformed_input() {
        assert!(matches!(Cnn::from_json("{\"layers\": []}"), Err(Error::Parse { .. })));
        let cnn = two_layer_cnn(33);
        let ragged = cnn.to_json().replacen("[\n          -0.", "[\n          99.0, -0.", 1);
        if ragged != cnn.to_json() {
            assert!(Cnn::from_json(&ragged).is_err());
        }
        assert!(Cnn::from_json("not json").is_err());
    }

    #[test]
    fn image_dataset_round_trips_through_rows() {
        let cnn = two_layer_cnn(41);
        let set = image_set_for(&cnn, 42, 3, 5, 4);
        let paired = set.to_paired().unwrap();
        assert_eq!(paired.input_dim(), 20);
        let back = ImageDataset::from_paired(&paired, set.input_dims(), set.label_dims()).unwrap();
        for i in 0..set.len() {
            assert_eq!(back.input(i), set.input(i));
            assert_eq!(back.label(i), set.label(i));
        }
        assert!(ImageDataset::from_paired(&paired, (5, 4, 2), set.label_dims()).is_err());
    }

    #[test]
    fn zero_residue_leaves_kernel_unchanged() {
        let cnn = two_layer_cnn(51);
        // Labels computed through the unfolded path, the same arithmetic the
        // solver uses for its predictions, so the residue is exactly zero.
        let last = cnn.layers[1].kernel.clone();
        let w_unf = kernel_as_matrix(&last);
        let inputs: Vec<ImageTensor> = (0..5).map(|i| random_image(60 + i as u64, 6, 6, 1)).collect();
        let labels: Vec<ImageTensor> = inputs
            .iter()
            .map(|x| {
                let z = cnn.latent(x, 1).unwrap();
                let patches = im2col(&z, last.kernel_h(), last.kernel_w(), last.stride(), last.padding()).unwrap();
                let rows = Matrix::from_fn(patches.matrix.rows(), 1, |r, _| {
                    matvec(&w_unf, patches.matrix.row(r))[0] + last.bias()[0]
                });
                fold(&rows, 6, 6).unwrap()
            })
            .collect();
        let source = ImageDataset::new(inputs.clone(), labels.clone(), "source").unwrap();
        let target = ImageDataset::new(inputs, labels, "target").unwrap();
        let alignment =
            align_nearest(&source.to_paired().unwrap(), &target.to_paired().unwrap(), &JointMetric::default()).unwrap();
        let updated = lva_conv_last_layer(&cnn, &alignment, &source, &target, 0.0).unwrap();
        assert_eq!(updated, cnn.layers[1].kernel);
    }

    #[test]
    fn non_affine_last_layer_is_rejected() {
        let mut cnn = two_layer_cnn(52);
        cnn.layers[1].activation = Activation::ReLU;
        let source = image_set_for(&cnn, 70, 3, 6, 6);
        let alignment =
            align_nearest(&source.to_paired().unwrap(), &source.to_paired().unwrap(), &JointMetric::default()).unwrap();
        assert!(matches!(
            lva_conv_last_layer(&cnn, &alignment, &source, &source, 0.0),
            Err(Error::UnsupportedModel(_))
        ));
    }

    /// On single-pixel images a 1x1 convolution is an affine map of the
    /// channel vector, so the conv solver and the dense solver must agree.
    #[test]
    fn single_pixel_network_matches_dense_solver() {
        let cnn = Cnn::new(vec![
            ConvLayer { kernel: random_kernel(81, 1, 1, 2, 3, 1, 0), activation: Activation::ReLU },
            ConvLayer { kernel: random_kernel(82, 1, 1, 3, 1, 1, 0), activation: Activation::Identity },
        ])
        .unwrap();
        let dense_layers: Vec<Layer> = cnn
            .layers
            .iter()
            .map(|l| {
                let k = &l.kernel;
                let w = Matrix::from_fn(k.out_channels(), k.in_channels(), |b, a| k.weight(0, 0, a, b));
                Layer::new(w, k.bias().to_vec(), l.activation).unwrap()
            })
            .collect();
        let mlp = Mlp::new(dense_layers).unwrap();

        let make_set = |seed: u64, count: usize| {
            let inputs: Vec<ImageTensor> = (0..count).map(|i| random_image(seed + i as u64, 1, 1, 2)).collect();
            let labels: Vec<ImageTensor> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut y = cnn.forward(x).unwrap();
                    for (t, v) in y.data_mut().iter_mut().enumerate() {
                        *v += 0.3 * normal(seed + 900, Stream::Trial, (i * 4 + t) as u64);
                    }
                    y
                })
                .collect();
            ImageDataset::new(inputs, labels, "pixels").unwrap()
        };
        let source = make_set(1000, 9);
        let target = make_set(2000, 7);
        let src_rows = source.to_paired().unwrap();
        let tgt_rows = target.to_paired().unwrap();
        let alignment = align_nearest(&src_rows, &tgt_rows, &JointMetric::default()).unwrap();

        let kernel = lva_conv_last_layer(&cnn, &alignment, &source, &target, 0.0).unwrap();
        let (adapted, _) =
            lva_one_layer(&mlp, &alignment, &src_rows, &tgt_rows, ResidueVariant::LatentJacobian, 0.0, true).unwrap();
        let dense_last = &adapted.layers[1];
        for a in 0..3 {
            assert!((kernel.weight(0, 0, a, 0) - dense_last.weight.get(0, a)).abs() < 1e-12);
        }
        assert!((kernel.bias()[0] - dense_last.bias[0]).abs() < 1e-12);
    }

    /// The stacked objective the solver minimizes, rebuilt from public pieces.
    fn stacked_objective(
        cnn: &Cnn,
        alignment: &Alignment,
        source: &ImageDataset,
        target: &ImageDataset,
        d_mat: &Matrix,
        d_bias: &[f64],
    ) -> f64 {
        let n = cnn.n_layers();
        let last = &cnn.layers[n - 1].kernel;
        let w_unf = kernel_as_matrix(last);
        let mut total = 0.0;
        for i in 0..target.len() {
            let j = alignment.source_index[i];
            let z_tgt = cnn.latent(target.input(i), n - 1).unwrap();
            let z_src = cnn.latent(source.input(j), n - 1).unwrap();
            let pt = im2col(&z_tgt, last.kernel_h(), last.kernel_w(), last.stride(), last.padding()).unwrap();
            let ps = im2col(&z_src, last.kernel_h(), last.kernel_w(), last.stride(), last.padding()).unwrap();
            for r in 0..pt.matrix.rows() {
                let (k, l) = pt.position_index[r];
                let base = matvec(&w_unf, pt.matrix.row(r));
                let base_src = matvec(&w_unf, ps.matrix.row(r));
                let fitted = matvec(d_mat, pt.matrix.row(r));
                for beta in 0..last.out_channels() {
                    let q = target.label(i).get(beta, k, l) - source.label(j).get(beta, k, l)
                        - (base[beta] - base_src[beta])
                        + source.label(j).get(beta, k, l)
                        - (base_src[beta] + last.bias()[beta]);
                    let err = q - (fitted[beta] + d_bias[beta]);
                    total += err * err;
                }
            }
        }
        total
    }

    #[test]
    fn conv_solution_survives_random_perturbations() {
        let cnn = two_layer_cnn(91);
        let source = image_set_for(&cnn, 300, 5, 5, 5);
        let target = {
            let inputs: Vec<ImageTensor> = (0..4).map(|i| random_image(400 + i as u64, 5, 5, 1)).collect();
            let labels: Vec<ImageTensor> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut y = cnn.forward(x).unwrap();
                    for (t, v) in y.data_mut().iter_mut().enumerate() {
                        *v += 0.2 * normal(401, Stream::Trial, (i * 25 + t) as u64);
                    }
                    y
                })
                .collect();
            ImageDataset::new(inputs, labels, "target").unwrap()
        };
        let alignment =
            align_nearest(&source.to_paired().unwrap(), &target.to_paired().unwrap(), &JointMetric::default()).unwrap();
        let updated = lva_conv_last_layer(&cnn, &alignment, &source, &target, 0.0).unwrap();

        let last = &cnn.layers[1].kernel;
        let d_mat = Matrix::from_fn(1, last.patch_len(), |b, c| {
            kernel_as_matrix(&updated).get(b, c) - kernel_as_matrix(last).get(b, c)
        });
        let d_bias = vec![updated.bias()[0] - last.bias()[0]];
        let best = stacked_objective(&cnn, &alignment, &source, &target, &d_mat, &d_bias);

        for trial in 0..100u64 {
            let mut pert = d_mat.clone();
            for c in 0..pert.cols() {
                let v = pert.get(0, c) + 1e-3 * normal(500 + trial, Stream::Trial, c as u64);
                pert.set(0, c, v);
            }
            let pb = vec![d_bias[0] + 1e-3 * normal(500 + trial, Stream::Trial, 1000)];
            let other = stacked_objective(&cnn, &alignment, &source, &target, &pert, &pb);
            assert!(other >= best - 1e-12, "perturbation {trial} beat the solver: {other} < {best}");
        }
    }
}
