//! Dataset generators and end-to-end benchmark runners.
//!
//! Two experiments are provided. The 1-D signal benchmark pretrains a small
//! MLP on a clean waveform and adapts it to a jittered, amplitude-modulated
//! variant, comparing gradient finetuning against the closed-form adapters.
//! The deblurring benchmark does the same for a small CNN that maps blurred
//! images back to sharp ones, with the target domain blurred more strongly
//! than the source domain.
//!
//! Every random quantity is drawn from the counter-based generator in
//! [`crate::rng`], so repeated runs with one seed reproduce bit-for-bit.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::align::{align_nearest, align_sinkhorn, Alignment, JointMetric, PairedDataset};
use crate::convadapt::{
    conv_output_dims, kernel_as_matrix, kernel_from_matrix, lva_conv_last_layer, Cnn, ConvKernel,
    ConvLayer, ImageDataset,
};
use crate::error::{Error, Result};
use crate::linalg::{mul_a_bt_into, mul_at_b_into, mul_into, Matrix};
use crate::lva::{
    lva_one_layer, lva_two_layer, verify_generalization_bound, verify_transfer_bound,
    GeneralizationBoundReport, ResidueVariant, TransferBoundReport,
};
use crate::net::{Activation, Mlp};
use crate::rng::{normal, uniform_in, Stream};
use crate::train::{
    adam_step, derivative_from_output, finetune_gd, init_mlp, mse_loss, pretrain, AdamState,
    Optimizer, TrainConfig, TrainReport,
};

// ---------------------------------------------------------------------------
// 1-D signal generator
// ---------------------------------------------------------------------------

/// Which half of the 1-D transfer pair a [`SignalSpec`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalDomain {
    /// Clean waveform on an exact grid.
    Source,
    /// Jittered inputs and amplitude-modulated, noisy labels.
    Target,
}

/// Recipe for one domain of the 1-D signal benchmark.
#[derive(Clone, Debug)]
pub struct SignalSpec {
    pub n: usize,
    pub noise_seed: u64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub domain: SignalDomain,
}

impl SignalSpec {
    /// Source domain on the default grid `[-1, 1]`.
    pub fn source(n: usize, noise_seed: u64) -> SignalSpec {
        SignalSpec { n, noise_seed, t_lo: -1.0, t_hi: 1.0, domain: SignalDomain::Source }
    }

    /// Target domain on the default grid `[-1, 1]`.
    pub fn target(n: usize, noise_seed: u64) -> SignalSpec {
        SignalSpec { n, noise_seed, t_lo: -1.0, t_hi: 1.0, domain: SignalDomain::Target }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::argument("gen_signal", "need at least two grid points"));
        }
        if !self.t_lo.is_finite() || !self.t_hi.is_finite() || self.t_lo >= self.t_hi {
            return Err(Error::argument(
                "gen_signal",
                format!("invalid grid range [{}, {}]", self.t_lo, self.t_hi),
            ));
        }
        Ok(())
    }
}

/// The waveform both domains share, `sin(5 pi t)`.
pub fn base_signal(t: f64) -> f64 {
    (5.0 * std::f64::consts::PI * t).sin()
}

/// Amplitude modulation of the target signal, `0.4 t + 1.3998`.
pub fn target_amplitude(t: f64) -> f64 {
    0.4 * t + 1.3998
}

/// Generates one domain of the 1-D benchmark.
///
/// Source rows are `(t, sin(5 pi t))` on an equispaced grid inclusive of both
/// endpoints. Target rows keep the clean grid for the label shape but perturb
/// the stored input by `0.05 * xi` with `xi ~ N(1.5, 0.8)`, and the label is
/// `target_amplitude(t) * sin(5 pi t) + 0.03 * eta` with `eta ~ U(-1, 1)`.
pub fn gen_signal(spec: &SignalSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let n = spec.n;
    let span = (n - 1) as f64;
    let mut inputs = Matrix::zeros(n, 1);
    let mut labels = Matrix::zeros(n, 1);
    for i in 0..n {
        // Convex form so both endpoints land exactly on t_lo and t_hi.
        let t = (spec.t_lo * (span - i as f64) + spec.t_hi * i as f64) / span;
        match spec.domain {
            SignalDomain::Source => {
                inputs.set(i, 0, t);
                labels.set(i, 0, base_signal(t));
            }
            SignalDomain::Target => {
                let jitter = 1.5 + 0.8f64.sqrt() * normal(spec.noise_seed, Stream::SignalJitter, i as u64);
                let eta = uniform_in(spec.noise_seed, Stream::SignalNoise, i as u64, -1.0, 1.0);
                inputs.set(i, 0, t + 0.05 * jitter);
                labels.set(i, 0, target_amplitude(t) * base_signal(t) + 0.03 * eta);
            }
        }
    }
    let name = match spec.domain {
        SignalDomain::Source => "signal-source",
        SignalDomain::Target => "signal-target",
    };
    PairedDataset::new(inputs, labels, name)
}

// ---------------------------------------------------------------------------
// Deblurring data generator
// ---------------------------------------------------------------------------

/// Recipe for a paired deblurring corpus: smooth grayscale images, blurred at
/// one strength for the source domain and a stronger one for the target.
#[derive(Clone, Debug)]
pub struct BlurSpec {
    /// Images are square `image_size x image_size`, one channel.
    pub image_size: usize,
    pub num_images: usize,
    pub blur_sigma_source: f64,
    pub blur_sigma_target: f64,
    pub seed: u64,
}

impl BlurSpec {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.image_size < 2 {
            return Err(Error::argument("gen_blur_pairs", "image size must be at least two"));
        }
        if self.num_images == 0 {
            return Err(Error::argument("gen_blur_pairs", "need at least one image"));
        }
        for (label, sigma) in
            [("source", self.blur_sigma_source), ("target", self.blur_sigma_target)]
        {
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::argument(
                    "gen_blur_pairs",
                    format!("{label} blur sigma must be positive and finite, got {sigma}"),
                ));
            }
        }
        // Equality is allowed so identical-domain control runs can share one
        // spec; the target may never be sharper than the source.
        if self.blur_sigma_target < self.blur_sigma_source {
            return Err(Error::argument(
                "gen_blur_pairs",
                format!(
                    "target blur sigma {} is weaker than source sigma {}",
                    self.blur_sigma_target, self.blur_sigma_source
                ),
            ));
        }
        Ok(())
    }
}

impl Default for BlurSpec {
    fn default() -> BlurSpec {
        BlurSpec {
            image_size: 16,
            num_images: 256,
            blur_sigma_source: 1.0,
            blur_sigma_target: 2.0,
            seed: 0,
        }
    }
}

/// Smooth random plane: five seeded 2-D cosine components, min-max normalized
/// to `[0, 1]` (all zeros when the range degenerates).
fn smooth_plane(seed: u64, image_index: usize, height: usize, width: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut img = vec![0.0; height * width];
    for comp in 0..5 {
        let base = ((image_index * 5 + comp) * 4) as u64;
        let fx = uniform_in(seed, Stream::ImageField, base, 0.5, 3.0);
        let fy = uniform_in(seed, Stream::ImageField, base + 1, 0.5, 3.0);
        let phase = uniform_in(seed, Stream::ImageField, base + 2, 0.0, 2.0 * PI);
        let amp = uniform_in(seed, Stream::ImageField, base + 3, 0.3, 1.0);
        for y in 0..height {
            for x in 0..width {
                let arg = 2.0 * PI * (fx * x as f64 / width as f64 + fy * y as f64 / height as f64)
                    + phase;
                img[y * width + x] += amp * arg.cos();
            }
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.0; height * width];
    }
    for v in &mut img {
        *v = (*v - lo) / (hi - lo);
    }
    img
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        taps.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (period `2n - 2`).
fn reflect_index(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflective boundary handling.
pub(crate) fn blur_plane(img: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (d, &t) in taps.iter().enumerate() {
                let xx = reflect_index(x as isize + d as isize - radius, width);
                acc = t.mul_add(img[y * width + xx], acc);
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (d, &t) in taps.iter().enumerate() {
                let yy = reflect_index(y as isize + d as isize - radius, height);
                acc = t.mul_add(tmp[yy * width + x], acc);
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Generates aligned deblurring corpora for both domains.
///
/// Row `i` of each dataset flattens image `i`: the input is the sharp image
/// blurred at the domain's sigma, the label is the sharp image itself. The
/// same sharp images underlie both domains, so the datasets differ only in
/// blur strength.
pub fn gen_blur_pairs(spec: &BlurSpec) -> Result<(PairedDataset, PairedDataset)> {
    spec.validate()?;
    blur_pair_block(spec, 0, spec.num_images)
}

/// Corpus rows for sharp images `first .. first + count` of the seeded image
/// stream; `gen_blur_pairs` is the block starting at zero.
fn blur_pair_block(spec: &BlurSpec, first: usize, count: usize) -> Result<(PairedDataset, PairedDataset)> {
    if count == 0 {
        return Err(Error::argument("gen_blur_pairs", "need at least one image"));
    }
    let s = spec.image_size;
    let mut source_inputs = Matrix::zeros(count, s * s);
    let mut target_inputs = Matrix::zeros(count, s * s);
    let mut labels = Matrix::zeros(count, s * s);
    for i in 0..count {
        let sharp = smooth_plane(spec.seed, first + i, s, s);
        let source_blur = blur_plane(&sharp, s, s, spec.blur_sigma_source);
        let target_blur = blur_plane(&sharp, s, s, spec.blur_sigma_target);
        labels.row_mut(i).copy_from_slice(&sharp);
        source_inputs.row_mut(i).copy_from_slice(&source_blur);
        target_inputs.row_mut(i).copy_from_slice(&target_blur);
    }
    let source = PairedDataset::new(source_inputs, labels.clone(), "blur-source")?;
    let target = PairedDataset::new(target_inputs, labels, "blur-target")?;
    Ok((source, target))
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

/// Adaptation method a benchmark row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMethod {
    Pretrained,
    Gd,
    Lva1,
    Lva2,
    LvaOt,
}

impl BenchMethod {
    /// Stable lowercase label used in CSV output.
    pub fn label(self) -> &'static str {
        match self {
            BenchMethod::Pretrained => "pretrained",
            BenchMethod::Gd => "gd",
            BenchMethod::Lva1 => "lva1",
            BenchMethod::Lva2 => "lva2",
            BenchMethod::LvaOt => "lva-ot",
        }
    }
}

/// One benchmark measurement.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub method: BenchMethod,
    /// Signal benchmark: number of adapted layers. Deblurring benchmark:
    /// number of target images the method saw.
    pub budget: usize,
    pub target_loss: f64,
    pub runtime_ms: u64,
    pub seed: u64,
    /// Named auxiliary values (PSNR, correction norms, solver diagnostics).
    pub extra_metrics: BTreeMap<String, f64>,
}

impl BenchResult {
    /// Peak signal-to-noise ratio when the row carries one.
    pub fn psnr(&self) -> Option<f64> {
        self.extra_metrics.get("psnr").copied()
    }
}

fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn ms_since(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

// ---------------------------------------------------------------------------
// 1-D signal benchmark
// ---------------------------------------------------------------------------

/// Knobs for [`run_benchmark_1d_with`]; [`Default`] reproduces the full-size
/// experiment.
#[derive(Clone, Debug)]
pub struct Benchmark1dConfig {
    pub n: usize,
    pub pretrain_epochs: usize,
    pub gd_epochs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub two_layer_sweeps: usize,
    /// Also finetune the last two layers by gradient descent.
    pub include_gd_two_layer: bool,
    /// Also run the optimal-transport-aligned adapter.
    pub include_sinkhorn: bool,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub seed: u64,
}

impl Default for Benchmark1dConfig {
    fn default() -> Benchmark1dConfig {
        Benchmark1dConfig {
            n: 2000,
            pretrain_epochs: 8000,
            gd_epochs: 12000,
            learning_rate: 1e-3,
            ridge: 0.0,
            two_layer_sweeps: 3,
            include_gd_two_layer: true,
            include_sinkhorn: true,
            sinkhorn_max_iter: 2000,
            sinkhorn_tol: 1e-7,
            seed: 0,
        }
    }
}

/// Everything the 1-D benchmark produces: per-method rows plus the two bound
/// reports evaluated on the run's own networks.
#[derive(Clone, Debug)]
pub struct Benchmark1d {
    pub results: Vec<BenchResult>,
    pub transfer: TransferBoundReport,
    pub generalization: GeneralizationBoundReport,
}

/// Full-size 1-D benchmark at the given seed.
pub fn run_benchmark_1d(seed: u64) -> Result<Benchmark1d> {
    run_benchmark_1d_with(&Benchmark1dConfig { seed, ..Benchmark1dConfig::default() })
}

/// Runs the 1-D signal benchmark: pretrain on the source domain, adapt to the
/// target domain with every configured method, and measure the target loss of
/// each result.
///
/// Row order is pretrained, gradient finetuning (one layer, then two if
/// enabled), then the closed-form adapters. `budget` counts adapted layers.
pub fn run_benchmark_1d_with(config: &Benchmark1dConfig) -> Result<Benchmark1d> {
    if config.n < 8 {
        return Err(Error::argument(
            "run_benchmark_1d",
            "need at least eight samples to hold out a test split",
        ));
    }
    if config.pretrain_epochs == 0 || config.gd_epochs == 0 {
        return Err(Error::argument("run_benchmark_1d", "epoch counts must be positive"));
    }

    let source = gen_signal(&SignalSpec::source(config.n, config.seed))?;
    let target = gen_signal(&SignalSpec::target(config.n, config.seed))?;
    let metric = JointMetric::default();

    let start = Instant::now();
    let fresh = init_mlp(&[1, 64, 64, 1], Activation::ReLU, config.seed)?;
    let train_cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        learning_rate: config.learning_rate,
        epochs: config.pretrain_epochs,
        batch_size: None,
        seed: config.seed,
    };
    let (pretrained, _) = pretrain(&fresh, &source.inputs, &source.labels, &train_cfg)?;
    let pretrain_ms = ms_since(start);

    let target_loss_of =
        |net: &Mlp| -> Result<f64> { mse_loss(&net.forward(&target.inputs)?, &target.labels) };
    let n_layers = pretrained.n_layers();
    let mut results = Vec::new();

    let source_loss = mse_loss(&pretrained.forward(&source.inputs)?, &source.labels)?;
    results.push(BenchResult {
        method: BenchMethod::Pretrained,
        budget: 0,
        target_loss: target_loss_of(&pretrained)?,
        runtime_ms: pretrain_ms,
        seed: config.seed,
        extra_metrics: metrics(&[("source_loss", source_loss)]),
    });

    let gd_cfg = TrainConfig { epochs: config.gd_epochs, ..train_cfg };
    let start = Instant::now();
    let (gd_one, _) = finetune_gd(&pretrained, &target.inputs, &target.labels, &gd_cfg, n_layers - 1)?;
    results.push(BenchResult {
        method: BenchMethod::Gd,
        budget: 1,
        target_loss: target_loss_of(&gd_one)?,
        runtime_ms: ms_since(start),
        seed: config.seed,
        extra_metrics: BTreeMap::new(),
    });

    if config.include_gd_two_layer {
        let start = Instant::now();
        let (gd_two, _) =
            finetune_gd(&pretrained, &target.inputs, &target.labels, &gd_cfg, n_layers - 2)?;
        results.push(BenchResult {
            method: BenchMethod::Gd,
            budget: 2,
            target_loss: target_loss_of(&gd_two)?,
            runtime_ms: ms_since(start),
            seed: config.seed,
            extra_metrics: BTreeMap::new(),
        });
    }

    let align_start = Instant::now();
    let alignment = align_nearest(&source, &target, &metric)?;
    let align_ms = ms_since(align_start);

    let start = Instant::now();
    let (lva_one, delta) = lva_one_layer(
        &pretrained,
        &alignment,
        &source,
        &target,
        ResidueVariant::LatentJacobian,
        config.ridge,
        true,
    )?;
    let lva_one_ms = align_ms + ms_since(start);
    let (lva_input, _) = lva_one_layer(
        &pretrained,
        &alignment,
        &source,
        &target,
        ResidueVariant::InputJacobian,
        config.ridge,
        true,
    )?;
    let delta_bias_norm = delta.d_bias.iter().map(|v| v * v).sum::<f64>().sqrt();
    results.push(BenchResult {
        method: BenchMethod::Lva1,
        budget: 1,
        target_loss: target_loss_of(&lva_one)?,
        runtime_ms: lva_one_ms,
        seed: config.seed,
        extra_metrics: metrics(&[
            ("input_variant_loss", target_loss_of(&lva_input)?),
            ("delta_weight_norm", delta.d_weight.frobenius_norm()),
            ("delta_bias_norm", delta_bias_norm),
        ]),
    });

    let start = Instant::now();
    let two = lva_two_layer(
        &pretrained,
        &alignment,
        &source,
        &target,
        config.two_layer_sweeps,
        config.ridge,
    )?;
    let lva_two_ms = align_ms + ms_since(start);
    let final_objective = *two.linearized_objective.last().unwrap_or(&f64::NAN);
    results.push(BenchResult {
        method: BenchMethod::Lva2,
        budget: 2,
        target_loss: target_loss_of(&two.net)?,
        runtime_ms: lva_two_ms,
        seed: config.seed,
        extra_metrics: metrics(&[
            ("fold_scale", two.fold_scale),
            ("linearized_objective", final_objective),
        ]),
    });

    if config.include_sinkhorn {
        let start = Instant::now();
        let median = median_squared_cost(&source, &target, &metric);
        let reg = if median > 0.0 { 0.05 * median } else { 1e-3 };
        let sk = align_sinkhorn(
            &source,
            &target,
            &metric,
            reg,
            config.sinkhorn_max_iter,
            config.sinkhorn_tol,
        )?;
        let (lva_ot, _) = lva_one_layer(
            &pretrained,
            &sk.alignment,
            &source,
            &target,
            ResidueVariant::LatentJacobian,
            config.ridge,
            true,
        )?;
        results.push(BenchResult {
            method: BenchMethod::LvaOt,
            budget: 1,
            target_loss: target_loss_of(&lva_ot)?,
            runtime_ms: ms_since(start),
            seed: config.seed,
            extra_metrics: metrics(&[
                ("sinkhorn_iterations", sk.iterations as f64),
                ("sinkhorn_marginal_error", sk.marginal_error),
                ("sinkhorn_reg", reg),
                ("sinkhorn_converged", if sk.converged { 1.0 } else { 0.0 }),
            ]),
        });
    }

    let transfer = verify_transfer_bound(&pretrained, &lva_one, 1, &alignment, &source, &target)?;

    // Hold out every fourth target row, re-solve on the rest, and check how
    // the solution generalizes to the held-out rows.
    let mut adapt_rows = Vec::new();
    let mut test_rows = Vec::new();
    for i in 0..target.len() {
        if i % 4 == 3 {
            test_rows.push(i);
        } else {
            adapt_rows.push(i);
        }
    }
    let adapt_set = subset_rows(&target, &adapt_rows, "signal-target-adapt")?;
    let test_set = subset_rows(&target, &test_rows, "signal-target-test")?;
    let adapt_alignment = align_nearest(&source, &adapt_set, &metric)?;
    let (split_net, _) = lva_one_layer(
        &pretrained,
        &adapt_alignment,
        &source,
        &adapt_set,
        ResidueVariant::LatentJacobian,
        config.ridge,
        true,
    )?;
    let generalization = verify_generalization_bound(&split_net, &adapt_set, &test_set)?;

    Ok(Benchmark1d { results, transfer, generalization })
}

/// Median squared joint distance over all dataset pairs; the entropic
/// regularizer is set to a fixed fraction of it.
fn median_squared_cost(source: &PairedDataset, target: &PairedDataset, metric: &JointMetric) -> f64 {
    let mut costs = Vec::with_capacity(source.len() * target.len());
    for i in 0..target.len() {
        for j in 0..source.len() {
            costs.push(metric.squared_distance(
                target.inputs.row(i),
                target.labels.row(i),
                source.inputs.row(j),
                source.labels.row(j),
            ));
        }
    }
    let mid = costs.len() / 2;
    *costs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

fn subset_rows(data: &PairedDataset, rows: &[usize], name: &str) -> Result<PairedDataset> {
    let inputs = Matrix::from_fn(rows.len(), data.input_dim(), |i, j| data.inputs.get(rows[i], j));
    let labels = Matrix::from_fn(rows.len(), data.label_dim(), |i, j| data.labels.get(rows[i], j));
    PairedDataset::new(inputs, labels, name)
}

// ---------------------------------------------------------------------------
// CNN initialization, loss, and training
// ---------------------------------------------------------------------------

/// Fresh CNN with the given square kernel sizes and channel progression.
///
/// `channels` has one more entry than `kernel_sizes`. Layer `l` maps
/// `channels[l]` to `channels[l + 1]` channels with a stride-one
/// `kernel_sizes[l]` kernel padded by half its size, so odd kernels preserve
/// the image dimensions. Hidden layers use ReLU, the last layer is affine.
/// Weights and biases draw uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// with `fan_in` the patch length.
pub fn init_cnn(kernel_sizes: &[usize], channels: &[usize], seed: u64) -> Result<Cnn> {
    if kernel_sizes.is_empty() || channels.len() != kernel_sizes.len() + 1 {
        return Err(Error::argument(
            "init_cnn",
            "need one kernel size per layer and one more channel count",
        ));
    }
    let mut layers = Vec::with_capacity(kernel_sizes.len());
    let mut index = 0u64;
    for (ell, &k) in kernel_sizes.iter().enumerate() {
        let (in_c, out_c) = (channels[ell], channels[ell + 1]);
        if k == 0 || in_c == 0 || out_c == 0 {
            return Err(Error::argument("init_cnn", format!("zero dimension at layer {ell}")));
        }
        let fan_in = k * k * in_c;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut weights = vec![0.0; fan_in * out_c];
        for w in &mut weights {
            index += 1;
            *w = uniform_in(seed, Stream::WeightInit, index, -bound, bound);
        }
        let mut bias = vec![0.0; out_c];
        for b in &mut bias {
            index += 1;
            *b = uniform_in(seed, Stream::WeightInit, index, -bound, bound);
        }
        let kernel = ConvKernel::new(k, k, in_c, out_c, 1, k / 2, weights, bias)?;
        let activation =
            if ell + 1 == kernel_sizes.len() { Activation::Identity } else { Activation::ReLU };
        layers.push(ConvLayer { kernel, activation });
    }
    Cnn::new(layers)
}

/// Mean over images of the summed squared pixel error.
///
/// Matches the row convention of [`mse_loss`] on the flattened dataset: each
/// image contributes the full squared error of all its pixels and channels.
pub fn image_loss(net: &Cnn, data: &ImageDataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.len() {
        let pred = net.forward(data.input(i))?;
        let label = data.label(i);
        if pred.height() != label.height()
            || pred.width() != label.width()
            || pred.channels() != label.channels()
        {
            return Err(Error::shape(
                "image_loss",
                format!(
                    "network emits {}x{}x{}, labels are {}x{}x{}",
                    pred.height(),
                    pred.width(),
                    pred.channels(),
                    label.height(),
                    label.width(),
                    label.channels()
                ),
            ));
        }
        for (&p, &y) in pred.data().iter().zip(label.data()) {
            let d = p - y;
            total = d.mul_add(d, total);
        }
    }
    Ok(total / data.len() as f64)
}

/// Peak signal-to-noise ratio over the dataset, `10 log10(1 / mse)` with the
/// mean squared error taken per pixel and a peak value of one. Infinite when
/// the reconstruction is exact.
pub fn cnn_psnr(net: &Cnn, data: &ImageDataset) -> Result<f64> {
    let (lh, lw, lc) = data.label_dims();
    let per_image = image_loss(net, data)?;
    let mse = per_image / (lh * lw * lc) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Geometry of one trainable layer plus the feature-map dimensions around it.
struct SuffixLayer {
    kh: usize,
    kw: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
    padding: usize,
    activation: Activation,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

/// Feature maps as row matrices: row `img * h * w + y * w + x` holds the
/// channels of position `(y, x)` of image `img`.
fn dataset_rows(images: &ImageDataset, labels: bool) -> Matrix {
    let (h, w, c) = if labels { images.label_dims() } else { images.input_dims() };
    let n = images.len();
    let mut rows = Matrix::zeros(n * h * w, c);
    for i in 0..n {
        let img = if labels { images.label(i) } else { images.input(i) };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    rows.set(i * h * w + y * w + x, ch, img.get(ch, y, x));
                }
            }
        }
    }
    rows
}

fn latent_rows(cnn: &Cnn, data: &ImageDataset, layer_index: usize) -> Result<Matrix> {
    if layer_index == 0 {
        return Ok(dataset_rows(data, false));
    }
    let n = data.len();
    let probe = cnn.latent(data.input(0), layer_index)?;
    let (h, w, c) = (probe.height(), probe.width(), probe.channels());
    let mut rows = Matrix::zeros(n * h * w, c);
    for i in 0..n {
        let z = if i == 0 { probe.clone() } else { cnn.latent(data.input(i), layer_index)? };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    rows.set(i * h * w + y * w + x, ch, z.get(ch, y, x));
                }
            }
        }
    }
    Ok(rows)
}

/// Gathers im2col rows for every image of a stacked feature-map matrix.
///
/// `out` must be pre-zeroed on first use; taps that fall into the padding are
/// never written, so their zeros persist across refills.
fn stacked_patches_into(
    out: &mut Matrix,
    src: &Matrix,
    n_images: usize,
    geom: &SuffixLayer,
) {
    let c = geom.in_c;
    let (h, w) = (geom.h_in, geom.w_in);
    for img in 0..n_images {
        for k in 0..geom.h_out {
            for l in 0..geom.w_out {
                let dst = out.row_mut(img * geom.h_out * geom.w_out + k * geom.w_out + l);
                for i in 0..geom.kh {
                    let y = (k * geom.stride + i) as isize - geom.padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..geom.kw {
                        let x = (l * geom.stride + j) as isize - geom.padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let tap = (i * geom.kw + j) * c;
                        let src_row = src.row(img * h * w + y as usize * w + x as usize);
                        dst[tap..tap + c].copy_from_slice(src_row);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`stacked_patches_into`]: accumulates patch-row gradients back
/// onto the feature-map rows. `dst` must be zeroed by the caller.
fn scatter_patches_into(dst: &mut Matrix, patch_grads: &Matrix, n_images: usize, geom: &SuffixLayer) {
    let c = geom.in_c;
    let (h, w) = (geom.h_in, geom.w_in);
    for img in 0..n_images {
        for k in 0..geom.h_out {
            for l in 0..geom.w_out {
                let g = patch_grads.row(img * geom.h_out * geom.w_out + k * geom.w_out + l);
                for i in 0..geom.kh {
                    let y = (k * geom.stride + i) as isize - geom.padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..geom.kw {
                        let x = (l * geom.stride + j) as isize - geom.padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let tap = (i * geom.kw + j) * c;
                        let dst_row = dst.row_mut(img * h * w + y as usize * w + x as usize);
                        for a in 0..c {
                            dst_row[a] += g[tap + a];
                        }
                    }
                }
            }
        }
    }
}

/// Trains every layer of the network by full-batch gradient descent on the
/// per-image squared-error loss.
pub fn train_cnn(net: &Cnn, data: &ImageDataset, config: &TrainConfig) -> Result<(Cnn, TrainReport)> {
    train_cnn_suffix(net, data, config, 0)
}

/// Trains only the last layer; all layers below it are carried over
/// bit-for-bit and their feature maps are computed once up front.
pub fn finetune_cnn_last(
    net: &Cnn,
    data: &ImageDataset,
    config: &TrainConfig,
) -> Result<(Cnn, TrainReport)> {
    train_cnn_suffix(net, data, config, net.n_layers() - 1)
}

fn train_cnn_suffix(
    net: &Cnn,
    data: &ImageDataset,
    config: &TrainConfig,
    first_trainable: usize,
) -> Result<(Cnn, TrainReport)> {
    net.validate()?;
    let op = "train_cnn";
    if config.batch_size.is_some() {
        return Err(Error::argument(op, "convolutional training is full-batch only"));
    }
    if !config.learning_rate.is_finite() || config.learning_rate <= 0.0 {
        return Err(Error::argument(op, "learning rate must be positive and finite"));
    }
    let (ih, iw, ic) = data.input_dims();
    if ic != net.input_channels() {
        return Err(Error::shape(
            op,
            format!("dataset provides {ic} channels, the network expects {}", net.input_channels()),
        ));
    }

    // Dimension chain through the whole network; trainable suffix geometry.
    let n_images = data.len();
    let (mut h, mut w) = (ih, iw);
    let mut geoms = Vec::new();
    for (ell, layer) in net.layers.iter().enumerate() {
        let k = &layer.kernel;
        let (oh, ow) = conv_output_dims(op, h, w, k.kernel_h(), k.kernel_w(), k.stride(), k.padding())?;
        if ell >= first_trainable {
            geoms.push(SuffixLayer {
                kh: k.kernel_h(),
                kw: k.kernel_w(),
                in_c: k.in_channels(),
                out_c: k.out_channels(),
                stride: k.stride(),
                padding: k.padding(),
                activation: layer.activation,
                h_in: h,
                w_in: w,
                h_out: oh,
                w_out: ow,
            });
        }
        h = oh;
        w = ow;
    }
    let (lh, lw, lc) = data.label_dims();
    if (h, w, net.output_channels()) != (lh, lw, lc) {
        return Err(Error::shape(
            op,
            format!(
                "network emits {h}x{w}x{} maps, labels are {lh}x{lw}x{lc}",
                net.output_channels()
            ),
        ));
    }

    let input_rows = latent_rows(net, data, first_trainable)?;
    let label_rows = dataset_rows(data, true);
    let nl = geoms.len();

    let mut wt: Vec<Matrix> = net.layers[first_trainable..]
        .iter()
        .map(|l| kernel_as_matrix(&l.kernel).transpose())
        .collect();
    let mut bias: Vec<Vec<f64>> =
        net.layers[first_trainable..].iter().map(|l| l.kernel.bias().to_vec()).collect();

    let mut patches: Vec<Matrix> = geoms
        .iter()
        .map(|g| Matrix::zeros(n_images * g.h_out * g.w_out, g.kh * g.kw * g.in_c))
        .collect();
    let mut acts: Vec<Matrix> =
        geoms.iter().map(|g| Matrix::zeros(n_images * g.h_out * g.w_out, g.out_c)).collect();
    let mut grads: Vec<Matrix> =
        geoms.iter().map(|g| Matrix::zeros(n_images * g.h_out * g.w_out, g.out_c)).collect();
    // Patch-space gradient staging, needed only above the suffix floor.
    let mut patch_grads: Vec<Matrix> = geoms
        .iter()
        .enumerate()
        .map(|(l, g)| {
            if l == 0 {
                Matrix::zeros(1, 1)
            } else {
                Matrix::zeros(n_images * g.h_out * g.w_out, g.kh * g.kw * g.in_c)
            }
        })
        .collect();
    let mut gwt: Vec<Matrix> = wt.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut gb: Vec<Vec<f64>> = bias.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut adam_w: Vec<AdamState> = wt.iter().map(|m| AdamState::new(m.rows() * m.cols())).collect();
    let mut adam_b: Vec<AdamState> = bias.iter().map(|b| AdamState::new(b.len())).collect();

    // The input to the first trainable layer never changes, so its patches
    // are gathered exactly once.
    stacked_patches_into(&mut patches[0], &input_rows, n_images, &geoms[0]);

    let forward = |patches: &mut [Matrix],
                   acts: &mut [Matrix],
                   wt: &[Matrix],
                   bias: &[Vec<f64>]|
     -> f64 {
        for l in 0..nl {
            if l > 0 {
                stacked_patches_into(&mut patches[l], &acts[l - 1], n_images, &geoms[l]);
            }
            mul_into(&mut acts[l], &patches[l], &wt[l]);
            let act = geoms[l].activation;
            for r in 0..acts[l].rows() {
                let row = acts[l].row_mut(r);
                for (v, &b) in row.iter_mut().zip(&bias[l]) {
                    *v = act.apply(*v + b);
                }
            }
        }
        let mut total = 0.0;
        for (&p, &y) in acts[nl - 1].data().iter().zip(label_rows.data()) {
            let d = p - y;
            total = d.mul_add(d, total);
        }
        total / n_images as f64
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut last_finite = f64::NAN;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let loss = forward(&mut patches, &mut acts, &wt, &bias);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, last_loss: last_finite });
        }
        last_finite = loss;
        history.push(loss);

        // Output-side gradient of the per-image loss, folded through the last
        // activation.
        let scale = 2.0 / n_images as f64;
        for r in 0..grads[nl - 1].rows() {
            let out_row = acts[nl - 1].row(r);
            let y_row = label_rows.row(r);
            let g_row = grads[nl - 1].row_mut(r);
            for c in 0..g_row.len() {
                let out = out_row[c];
                g_row[c] =
                    scale * (out - y_row[c]) * derivative_from_output(geoms[nl - 1].activation, out);
            }
        }
        for l in (0..nl).rev() {
            mul_at_b_into(&mut gwt[l], &patches[l], &grads[l]);
            let gb_l = &mut gb[l];
            gb_l.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..grads[l].rows() {
                for (acc, &g) in gb_l.iter_mut().zip(grads[l].row(r)) {
                    *acc += g;
                }
            }
            if l > 0 {
                mul_a_bt_into(&mut patch_grads[l], &grads[l], &wt[l]);
                let below = &mut grads[l - 1];
                below.data_mut().iter_mut().for_each(|v| *v = 0.0);
                scatter_patches_into(below, &patch_grads[l], n_images, &geoms[l]);
                let act = geoms[l - 1].activation;
                for r in 0..below.rows() {
                    let out_row = acts[l - 1].row(r);
                    for (g, &out) in below.row_mut(r).iter_mut().zip(out_row) {
                        *g *= derivative_from_output(act, out);
                    }
                }
            }
        }

        step += 1;
        apply_cnn_update(&mut wt, &mut bias, &gwt, &gb, config, &mut adam_w, &mut adam_b, step);
    }

    let final_loss = forward(&mut patches, &mut acts, &wt, &bias);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: config.epochs, last_loss: last_finite });
    }

    let mut layers: Vec<ConvLayer> = net.layers[..first_trainable].to_vec();
    for (l, geom) in geoms.iter().enumerate() {
        let kernel = kernel_from_matrix(
            &wt[l].transpose(),
            geom.kh,
            geom.kw,
            geom.in_c,
            geom.stride,
            geom.padding,
            bias[l].clone(),
        )?;
        layers.push(ConvLayer { kernel, activation: geom.activation });
    }
    let trained = Cnn::new(layers)?;
    let report = TrainReport {
        loss_history: history,
        final_loss,
        epsilon_trained: (n_images as f64 * final_loss).sqrt(),
    };
    Ok((trained, report))
}

#[allow(clippy::too_many_arguments)]
fn apply_cnn_update(
    wt: &mut [Matrix],
    bias: &mut [Vec<f64>],
    gwt: &[Matrix],
    gb: &[Vec<f64>],
    config: &TrainConfig,
    adam_w: &mut [AdamState],
    adam_b: &mut [AdamState],
    step: u64,
) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for l in 0..wt.len() {
                for (w, &g) in wt[l].data_mut().iter_mut().zip(gwt[l].data()) {
                    *w -= lr * g;
                }
                for (b, &g) in bias[l].iter_mut().zip(&gb[l]) {
                    *b -= lr * g;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let c1 = 1.0 - beta1.powi(step as i32);
            let c2 = 1.0 - beta2.powi(step as i32);
            for l in 0..wt.len() {
                adam_step(wt[l].data_mut(), gwt[l].data(), &mut adam_w[l], lr, beta1, beta2, epsilon, c1, c2);
                adam_step(&mut bias[l], &gb[l], &mut adam_b[l], lr, beta1, beta2, epsilon, c1, c2);
            }
        }
    }
}

/// Replaces the last kernel by the closed-form least-squares fit of the
/// network to the dataset itself, leaving every other layer untouched.
///
/// Pretraining ends with this step so the pretrained network is exactly
/// optimal in its last layer; re-solving on the same data then returns a
/// near-zero correction.
pub fn polish_cnn_last(net: &Cnn, data: &ImageDataset) -> Result<Cnn> {
    let n = data.len();
    let (h, w, c) = data.input_dims();
    let identity = Alignment {
        source_index: (0..n).collect(),
        pair_distances: vec![0.0; n],
        epsilon_data: 0.0,
        delta_x: Matrix::zeros(n, h * w * c),
        delta_y: Matrix::zeros(n, data.label_dims().0 * data.label_dims().1 * data.label_dims().2),
    };
    let kernel = lva_conv_last_layer(net, &identity, data, data, 0.0)?;
    replace_last_kernel(net, kernel)
}

fn replace_last_kernel(net: &Cnn, kernel: ConvKernel) -> Result<Cnn> {
    let mut layers = net.layers.clone();
    let last = layers.len() - 1;
    layers[last].kernel = kernel;
    Cnn::new(layers)
}

fn kernel_delta_norm(a: &ConvKernel, b: &ConvKernel) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.weights().iter().zip(b.weights()) {
        let d = x - y;
        acc = d.mul_add(d, acc);
    }
    for (&x, &y) in a.bias().iter().zip(b.bias()) {
        let d = x - y;
        acc = d.mul_add(d, acc);
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Deblurring benchmark
// ---------------------------------------------------------------------------

/// Knobs for [`run_benchmark_deblur_with`]; [`Default`] reproduces the
/// full-size experiment.
#[derive(Clone, Debug)]
pub struct DeblurConfig {
    pub spec: BlurSpec,
    /// Target-image counts given to each adaptation method, one pair of rows
    /// per entry.
    pub budgets: Vec<usize>,
    /// Held-out target images used for PSNR, drawn from the same stream after
    /// the training images.
    pub test_images: usize,
    pub pretrain_epochs: usize,
    pub gd_epochs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
}

impl Default for DeblurConfig {
    fn default() -> DeblurConfig {
        DeblurConfig {
            spec: BlurSpec::default(),
            budgets: vec![16, 64, 256],
            test_images: 64,
            pretrain_epochs: 150,
            gd_epochs: 600,
            learning_rate: 1e-3,
            ridge: 0.0,
        }
    }
}

/// Everything the deblurring benchmark produces.
#[derive(Clone, Debug)]
pub struct DeblurBenchmark {
    /// Gradient-descent and closed-form rows, interleaved per budget.
    pub results: Vec<BenchResult>,
    pub pretrained_source_loss: f64,
    pub pretrained_target_loss: f64,
    /// PSNR of the unadapted network on the held-out target images.
    pub pretrained_target_psnr: f64,
    /// Norm of the closed-form kernel correction per budget.
    pub delta_kernel_norms: BTreeMap<usize, f64>,
}

/// Full-size deblurring benchmark at the given seed.
pub fn run_benchmark_deblur(seed: u64) -> Result<DeblurBenchmark> {
    run_benchmark_deblur_with(&DeblurConfig {
        spec: BlurSpec { seed, ..BlurSpec::default() },
        ..DeblurConfig::default()
    })
}

/// Runs the deblurring benchmark.
///
/// A three-layer CNN is pretrained on the lightly blurred source corpus
/// (ending with the closed-form last-layer refit), then adapted to the
/// strongly blurred target corpus once per budget: gradient finetuning of the
/// last kernel against the budget subset, and the closed-form correction from
/// the source-aligned subset. `target_loss` is measured on the adaptation
/// subset each method saw; PSNR is measured on held-out target images.
pub fn run_benchmark_deblur_with(config: &DeblurConfig) -> Result<DeblurBenchmark> {
    config.spec.validate()?;
    if config.budgets.is_empty() {
        return Err(Error::argument("run_benchmark_deblur", "need at least one budget"));
    }
    for &b in &config.budgets {
        if b == 0 || b > config.spec.num_images {
            return Err(Error::argument(
                "run_benchmark_deblur",
                format!("budget {b} outside 1..={}", config.spec.num_images),
            ));
        }
    }
    if config.test_images == 0 {
        return Err(Error::argument("run_benchmark_deblur", "need at least one test image"));
    }
    if config.pretrain_epochs == 0 || config.gd_epochs == 0 {
        return Err(Error::argument("run_benchmark_deblur", "epoch counts must be positive"));
    }

    let dims = (config.spec.image_size, config.spec.image_size, 1);
    let (source_rows, target_rows) = blur_pair_block(&config.spec, 0, config.spec.num_images)?;
    let (_, test_rows) = blur_pair_block(&config.spec, config.spec.num_images, config.test_images)?;
    let source = ImageDataset::from_paired(&source_rows, dims, dims)?;
    let target = ImageDataset::from_paired(&target_rows, dims, dims)?;
    let test = ImageDataset::from_paired(&test_rows, dims, dims)?;

    let fresh = init_cnn(&[9, 5, 5], &[1, 8, 8, 1], config.spec.seed)?;
    let train_cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        learning_rate: config.learning_rate,
        epochs: config.pretrain_epochs,
        batch_size: None,
        seed: config.spec.seed,
    };
    let (coarse, _) = train_cnn(&fresh, &source, &train_cfg)?;
    let pretrained = polish_cnn_last(&coarse, &source)?;

    let pretrained_source_loss = image_loss(&pretrained, &source)?;
    let pretrained_target_loss = image_loss(&pretrained, &target)?;
    let pretrained_target_psnr = cnn_psnr(&pretrained, &test)?;

    let source_paired = source.to_paired()?;
    let metric = JointMetric::default();
    let mut results = Vec::new();
    let mut delta_kernel_norms = BTreeMap::new();

    for &budget in &config.budgets {
        let subset = image_subset(&target, budget)?;

        let start = Instant::now();
        let gd_cfg = TrainConfig { epochs: config.gd_epochs, ..train_cfg };
        let (gd_net, _) = finetune_cnn_last(&pretrained, &subset, &gd_cfg)?;
        let gd_ms = ms_since(start);
        results.push(BenchResult {
            method: BenchMethod::Gd,
            budget,
            target_loss: image_loss(&gd_net, &subset)?,
            runtime_ms: gd_ms,
            seed: config.spec.seed,
            extra_metrics: metrics(&[("psnr", cnn_psnr(&gd_net, &test)?)]),
        });

        let start = Instant::now();
        let alignment = align_nearest(&source_paired, &subset.to_paired()?, &metric)?;
        let kernel = lva_conv_last_layer(&pretrained, &alignment, &source, &subset, config.ridge)?;
        let delta = kernel_delta_norm(&kernel, &pretrained.layers[pretrained.n_layers() - 1].kernel);
        let lva_net = replace_last_kernel(&pretrained, kernel)?;
        let lva_ms = ms_since(start);
        results.push(BenchResult {
            method: BenchMethod::Lva1,
            budget,
            target_loss: image_loss(&lva_net, &subset)?,
            runtime_ms: lva_ms,
            seed: config.spec.seed,
            extra_metrics: metrics(&[
                ("psnr", cnn_psnr(&lva_net, &test)?),
                ("delta_kernel_norm", delta),
            ]),
        });
        delta_kernel_norms.insert(budget, delta);
    }

    Ok(DeblurBenchmark {
        results,
        pretrained_source_loss,
        pretrained_target_loss,
        pretrained_target_psnr,
        delta_kernel_norms,
    })
}

fn image_subset(data: &ImageDataset, count: usize) -> Result<ImageDataset> {
    let inputs = (0..count).map(|i| data.input(i).clone()).collect();
    let labels = (0..count).map(|i| data.label(i).clone()).collect();
    ImageDataset::new(inputs, labels, format!("{}-first-{count}", data.name))
}
