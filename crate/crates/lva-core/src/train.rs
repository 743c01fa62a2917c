//! Gradient training: full-batch or minibatch backpropagation with SGD or
//! Adam, plus suffix-only finetuning that leaves earlier layers untouched.
//!
//! Everything here is deterministic for a fixed seed and configuration. The
//! minibatch order comes from the counter-based generator in [`crate::rng`],
//! and all reductions run in a fixed order, so two runs with the same inputs
//! produce bitwise-identical parameters.

use crate::error::{Error, Result};
use crate::linalg::{mul_a_bt_into, mul_at_b_into, mul_into, Matrix};
use crate::net::{Activation, Layer, Mlp};
use crate::rng::{shuffled_indices, uniform_in, Stream};

/// Mean over samples (rows) of the squared Euclidean distance between a
/// prediction row and its label row.
pub fn mse_loss(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    if predictions.rows() != targets.rows() || predictions.cols() != targets.cols() {
        return Err(Error::shape(
            "mse_loss",
            format!(
                "{}x{} predictions vs {}x{} targets",
                predictions.rows(),
                predictions.cols(),
                targets.rows(),
                targets.cols()
            ),
        ));
    }
    if predictions.rows() == 0 {
        return Err(Error::data("mse_loss", "no samples"));
    }
    let mut acc = 0.0;
    for (&p, &t) in predictions.data().iter().zip(targets.data()) {
        let d = p - t;
        acc = d.mul_add(d, acc);
    }
    Ok(acc / predictions.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Optimizer {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains on the whole dataset every step; `Some(b)` shuffles each
    /// epoch and walks batches of `b` rows (the last batch may be shorter).
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::adam(),
            learning_rate: 1e-3,
            epochs: 1000,
            batch_size: None,
            seed: 0,
        }
    }
}

/// What a training run did.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Dataset loss at the parameters entering each epoch; `epochs` entries.
    pub loss_history: Vec<f64>,
    /// Dataset loss of the returned parameters.
    pub final_loss: f64,
    /// `sqrt(n_samples * final_loss)`: the root of the summed squared errors,
    /// the scale the error-propagation bounds are stated in.
    pub epsilon_trained: f64,
}

/// Fresh network with uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and
/// biases, hidden layers using `hidden` and the output layer affine.
pub fn init_mlp(dims: &[usize], hidden: Activation, seed: u64) -> Result<Mlp> {
    if dims.len() < 2 {
        return Err(Error::argument("init_mlp", "need at least input and output widths"));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    let mut index = 0u64;
    for (ell, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::argument("init_mlp", format!("zero width at layer {ell}")));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_out, fan_in, |_, _| {
            index += 1;
            uniform_in(seed, Stream::WeightInit, index, -bound, bound)
        });
        let bias = (0..fan_out)
            .map(|_| {
                index += 1;
                uniform_in(seed, Stream::WeightInit, index, -bound, bound)
            })
            .collect();
        let act = if ell + 2 == dims.len() { Activation::Identity } else { hidden };
        layers.push(Layer::new(weight, bias, act)?);
    }
    Mlp::new(layers)
}

/// Trains every layer. Equivalent to [`finetune_gd`] with the whole network
/// trainable.
pub fn pretrain(net: &Mlp, inputs: &Matrix, labels: &Matrix, config: &TrainConfig) -> Result<(Mlp, TrainReport)> {
    finetune_gd(net, inputs, labels, config, 0)
}

/// Trains layers `first_trainable..` and returns the updated network; layers
/// below `first_trainable` are carried over bit-for-bit.
///
/// Because the frozen prefix never changes, its outputs are computed once and
/// the gradient loop runs on the suffix alone; the result is identical to
/// running full backpropagation and discarding the prefix updates.
pub fn finetune_gd(
    net: &Mlp,
    inputs: &Matrix,
    labels: &Matrix,
    config: &TrainConfig,
    first_trainable: usize,
) -> Result<(Mlp, TrainReport)> {
    net.validate()?;
    if first_trainable >= net.n_layers() {
        return Err(Error::argument(
            "finetune_gd",
            format!("first_trainable {first_trainable} leaves no layers to train (network has {})", net.n_layers()),
        ));
    }
    if inputs.rows() != labels.rows() {
        return Err(Error::shape(
            "finetune_gd",
            format!("{} input rows vs {} label rows", inputs.rows(), labels.rows()),
        ));
    }
    if inputs.rows() == 0 {
        return Err(Error::data("finetune_gd", "no samples"));
    }
    if labels.cols() != net.output_dim() {
        return Err(Error::shape(
            "finetune_gd",
            format!("labels have {} columns, network produces {}", labels.cols(), net.output_dim()),
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::argument("finetune_gd", "learning rate must be positive and finite"));
    }
    if !inputs.all_finite() || !labels.all_finite() {
        return Err(Error::data("finetune_gd", "non-finite training data"));
    }
    if let Some(b) = config.batch_size {
        if b == 0 {
            return Err(Error::argument("finetune_gd", "batch size must be positive"));
        }
    }

    let latents = net.latent(inputs, first_trainable)?;
    let suffix: Vec<Layer> = net.layers[first_trainable..].to_vec();
    let (trained, report) = train_layers(suffix, &latents, labels, config)?;
    let mut layers = net.layers[..first_trainable].to_vec();
    layers.extend(trained);
    Ok((Mlp::new(layers)?, report))
}

pub(crate) struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub(crate) fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

fn train_layers(
    layers: Vec<Layer>,
    inputs: &Matrix,
    labels: &Matrix,
    config: &TrainConfig,
) -> Result<(Vec<Layer>, TrainReport)> {
    let n_samples = inputs.rows();
    let n_layers = layers.len();
    // Parameters live transposed (`in x out`) during training so the batched
    // forward pass `H * Wt` walks both operands row-major.
    let mut wt: Vec<Matrix> = layers.iter().map(|l| l.weight.transpose()).collect();
    let mut bias: Vec<Vec<f64>> = layers.iter().map(|l| l.bias.clone()).collect();
    let acts: Vec<Activation> = layers.iter().map(|l| l.activation).collect();

    let mut adam_w: Vec<AdamState> = Vec::new();
    let mut adam_b: Vec<AdamState> = Vec::new();
    if matches!(config.optimizer, Optimizer::Adam { .. }) {
        for j in 0..n_layers {
            adam_w.push(AdamState::new(wt[j].data().len()));
            adam_b.push(AdamState::new(bias[j].len()));
        }
    }
    let mut step = 0u64;

    let batch_rows = config.batch_size.map_or(n_samples, |b| b.min(n_samples));
    let full_batch = config.batch_size.is_none() || batch_rows == n_samples;

    let mut ws = Workspace::new(&layers, batch_rows, inputs.cols());
    // Separate full-dataset buffers for the loss sweep in minibatch mode.
    let mut eval = if full_batch { None } else { Some(Workspace::new(&layers, n_samples, inputs.cols())) };

    let mut batch_x = Matrix::zeros(if full_batch { 0 } else { batch_rows }, inputs.cols());
    let mut batch_y = Matrix::zeros(if full_batch { 0 } else { batch_rows }, labels.cols());

    let mut history = Vec::with_capacity(config.epochs);
    let mut last_finite = f64::NAN;

    for epoch in 0..config.epochs {
        if full_batch {
            let loss = forward(&mut ws, inputs, &wt, &bias, &acts, labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, last_loss: last_finite });
            }
            last_finite = loss;
            history.push(loss);
            backward(&mut ws, inputs, &wt, &acts, labels);
            step += 1;
            apply_update(&mut wt, &mut bias, &ws, config, &mut adam_w, &mut adam_b, step);
        } else {
            let order = shuffled_indices(config.seed, epoch as u64, n_samples);
            let eval_ws = eval.as_mut().expect("minibatch mode allocates an eval workspace");
            let loss = forward(eval_ws, inputs, &wt, &bias, &acts, labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, last_loss: last_finite });
            }
            last_finite = loss;
            history.push(loss);
            let mut start = 0;
            while start < n_samples {
                let end = (start + batch_rows).min(n_samples);
                let rows = end - start;
                gather_rows(&mut batch_x, inputs, &order[start..end]);
                gather_rows(&mut batch_y, labels, &order[start..end]);
                if rows < batch_rows {
                    // Short tail: run it through a right-sized workspace.
                    let mut tail_ws = Workspace::new(&layers, rows, inputs.cols());
                    let tx = shrink_rows(&batch_x, rows);
                    let ty = shrink_rows(&batch_y, rows);
                    let l = forward(&mut tail_ws, &tx, &wt, &bias, &acts, &ty)?;
                    if !l.is_finite() {
                        return Err(Error::Diverged { epoch, last_loss: last_finite });
                    }
                    backward(&mut tail_ws, &tx, &wt, &acts, &ty);
                    step += 1;
                    apply_update(&mut wt, &mut bias, &tail_ws, config, &mut adam_w, &mut adam_b, step);
                } else {
                    let l = forward(&mut ws, &batch_x, &wt, &bias, &acts, &batch_y)?;
                    if !l.is_finite() {
                        return Err(Error::Diverged { epoch, last_loss: last_finite });
                    }
                    backward(&mut ws, &batch_x, &wt, &acts, &batch_y);
                    step += 1;
                    apply_update(&mut wt, &mut bias, &ws, config, &mut adam_w, &mut adam_b, step);
                }
                start = end;
            }
        }
    }

    let trained: Vec<Layer> = wt
        .iter()
        .zip(&bias)
        .zip(&acts)
        .map(|((w, b), &a)| Layer::new(w.transpose(), b.clone(), a))
        .collect::<Result<_>>()?;
    let final_net = Mlp::new(trained)?;
    let final_loss = mse_loss(&final_net.forward(inputs)?, labels)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: config.epochs, last_loss: last_finite });
    }
    let report = TrainReport {
        loss_history: history,
        final_loss,
        epsilon_trained: (n_samples as f64 * final_loss).sqrt(),
    };
    Ok((final_net.layers, report))
}

/// Per-layer activation outputs, gradient staging buffers, and parameter
/// gradients, sized once for a fixed batch height.
struct Workspace {
    /// `h[j]`: output of layer `j` for the batch.
    h: Vec<Matrix>,
    /// `d[j]`: backpropagated gradient at layer `j`'s output.
    d: Vec<Matrix>,
    /// Gradient of the transposed weight (`in x out`).
    gwt: Vec<Matrix>,
    gb: Vec<Vec<f64>>,
    rows: usize,
}

impl Workspace {
    fn new(layers: &[Layer], rows: usize, _in_dim: usize) -> Workspace {
        let h = layers.iter().map(|l| Matrix::zeros(rows, l.out_dim())).collect();
        let d = layers.iter().map(|l| Matrix::zeros(rows, l.out_dim())).collect();
        let gwt = layers.iter().map(|l| Matrix::zeros(l.in_dim(), l.out_dim())).collect();
        let gb = layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        Workspace { h, d, gwt, gb, rows }
    }
}

/// Runs the batch through the layers, filling `ws.h`, and returns the loss.
fn forward(
    ws: &mut Workspace,
    x: &Matrix,
    wt: &[Matrix],
    bias: &[Vec<f64>],
    acts: &[Activation],
    y: &Matrix,
) -> Result<f64> {
    debug_assert_eq!(x.rows(), ws.rows);
    for j in 0..wt.len() {
        let (before, from_j) = ws.h.split_at_mut(j);
        let input = if j == 0 { x } else { &before[j - 1] };
        let out = &mut from_j[0];
        mul_into(out, input, &wt[j]);
        let act = acts[j];
        let b = &bias[j];
        let width = b.len();
        for row in out.data_mut().chunks_exact_mut(width) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = act.apply(*v + bv);
            }
        }
    }
    mse_loss(&ws.h[wt.len() - 1], y)
}

/// Activation derivative recovered from the activation output itself. Valid
/// for every [`Activation`] here: the rectifier families are sign-preserving
/// and the zero point carries the flat branch's derivative, and tanh's
/// derivative is `1 - tanh^2`.
#[inline]
pub(crate) fn derivative_from_output(act: Activation, out: f64) -> f64 {
    match act {
        Activation::Identity => 1.0,
        Activation::ReLU => {
            if out > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyReLU { slope } => {
            if out > 0.0 {
                1.0
            } else {
                slope
            }
        }
        Activation::Tanh => 1.0 - out * out,
    }
}

/// Fills `ws.gwt` / `ws.gb` with the loss gradients. `ws.h` must hold the
/// forward pass for this batch.
fn backward(ws: &mut Workspace, x: &Matrix, wt: &[Matrix], acts: &[Activation], y: &Matrix) {
    let n_layers = wt.len();
    let m = ws.rows as f64;
    let scale = 2.0 / m;
    {
        let last = &mut ws.d[n_layers - 1];
        for ((dv, &hv), &yv) in last.data_mut().iter_mut().zip(ws.h[n_layers - 1].data()).zip(y.data()) {
            *dv = scale * (hv - yv);
        }
    }
    for j in (0..n_layers).rev() {
        {
            let (d, h) = (&mut ws.d[j], &ws.h[j]);
            for (dv, &hv) in d.data_mut().iter_mut().zip(h.data()) {
                *dv *= derivative_from_output(acts[j], hv);
            }
        }
        let input = if j == 0 { x } else { &ws.h[j - 1] };
        mul_at_b_into(&mut ws.gwt[j], input, &ws.d[j]);
        {
            let gb = &mut ws.gb[j];
            gb.fill(0.0);
            let width = gb.len();
            for row in ws.d[j].data().chunks_exact(width) {
                for (g, &dv) in gb.iter_mut().zip(row) {
                    *g += dv;
                }
            }
        }
        if j > 0 {
            let (head, tail) = ws.d.split_at_mut(j);
            mul_a_bt_into(&mut head[j - 1], &tail[0], &wt[j]);
        }
    }
}

fn apply_update(
    wt: &mut [Matrix],
    bias: &mut [Vec<f64>],
    ws: &Workspace,
    config: &TrainConfig,
    adam_w: &mut [AdamState],
    adam_b: &mut [AdamState],
    step: u64,
) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for j in 0..wt.len() {
                for (w, &g) in wt[j].data_mut().iter_mut().zip(ws.gwt[j].data()) {
                    *w -= lr * g;
                }
                for (b, &g) in bias[j].iter_mut().zip(&ws.gb[j]) {
                    *b -= lr * g;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let c1 = 1.0 - beta1.powi(step as i32);
            let c2 = 1.0 - beta2.powi(step as i32);
            for j in 0..wt.len() {
                adam_step(wt[j].data_mut(), ws.gwt[j].data(), &mut adam_w[j], lr, beta1, beta2, epsilon, c1, c2);
                adam_step(&mut bias[j], &ws.gb[j], &mut adam_b[j], lr, beta1, beta2, epsilon, c1, c2);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + epsilon);
    }
}

fn gather_rows(dst: &mut Matrix, src: &Matrix, order: &[usize]) {
    for (slot, &idx) in order.iter().enumerate() {
        if slot >= dst.rows() {
            break;
        }
        dst.row_mut(slot).copy_from_slice(src.row(idx));
    }
}

fn shrink_rows(src: &Matrix, rows: usize) -> Matrix {
    Matrix::from_fn(rows, src.cols(), |i, j| src.get(i, j))
}
