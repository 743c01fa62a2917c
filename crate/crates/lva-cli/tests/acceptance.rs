//! Release acceptance suite: eight criteria, one test per criterion.
//!
//! Each test finishes by printing a `criterion N (...): PASS` line (visible
//! with `--nocapture`); a panic anywhere in the body marks that criterion
//! failed. Tolerances and per-criterion runtime budgets are pinned as named
//! constants next to the test that uses them. Criteria 1 and 6 run the
//! full-size benchmarks and dominate the wall-clock time of this target;
//! everything else finishes in seconds.

use std::path::Path;
use std::process::Output;
use std::time::{Duration, Instant};

use lva_core::align::{align_nearest, JointMetric, PairedDataset};
use lva_core::bench::{
    run_benchmark_1d_with, run_benchmark_deblur_with, BenchMethod, BenchResult, Benchmark1dConfig,
    BlurSpec, DeblurConfig,
};
use lva_core::convadapt::{
    conv_forward, fold, im2col, kernel_as_matrix, lva_conv_last_layer, Cnn, ConvKernel, ConvLayer,
    ImageDataset, ImageTensor,
};
use lva_core::lva::{
    lva_one_layer, lva_two_layer, transferal_residue, verify_generalization_bound,
    verify_transfer_bound, LayerDelta, ResidueVariant,
};
use lva_core::rng::{normal, uniform, Stream};
use lva_core::train::init_mlp;
use lva_core::{matmul, Activation, Layer, Matrix, Mlp};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn random_dataset(seed: u64, n: usize, dx: usize, dy: usize, scale: f64) -> PairedDataset {
    let mut c = 0u64;
    let inputs = Matrix::from_fn(n, dx, |_, _| {
        c += 1;
        uniform(seed, Stream::Trial, c) * 2.0 * scale - scale
    });
    let labels = Matrix::from_fn(n, dy, |_, _| {
        c += 1;
        uniform(seed, Stream::Trial, c) * 2.0 * scale - scale
    });
    PairedDataset::new(inputs, labels, "d").unwrap()
}

fn nudged(base: &PairedDataset, seed: u64, amount: f64) -> PairedDataset {
    let mut c = 0u64;
    let inputs = Matrix::from_fn(base.len(), base.input_dim(), |i, j| {
        c += 1;
        base.inputs.get(i, j) + amount * normal(seed, Stream::SignalJitter, c)
    });
    let labels = Matrix::from_fn(base.len(), base.label_dim(), |i, j| {
        c += 1;
        base.labels.get(i, j) + amount * normal(seed, Stream::SignalNoise, c)
    });
    PairedDataset::new(inputs, labels, "t").unwrap()
}

fn homogeneous_net(seed: u64, dims: &[usize]) -> Mlp {
    let mut net = init_mlp(dims, Activation::ReLU, seed).unwrap();
    for layer in &mut net.layers {
        layer.bias = vec![0.0; layer.bias.len()];
    }
    net
}

fn maxabs(m: &Matrix) -> f64 {
    m.data().iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()))
}

fn find_row(rows: &[BenchResult], method: BenchMethod, budget: usize) -> &BenchResult {
    rows.iter()
        .find(|r| r.method == method && r.budget == budget)
        .unwrap_or_else(|| panic!("no {} row at budget {budget}", method.label()))
}

fn lva(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_lva"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn the CLI binary")
}

fn assert_ok(out: &Output) {
    if out.status.code() != Some(0) {
        panic!(
            "CLI exited with {:?}\nstdout:\n{}\nstderr:\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn assert_within(started: Instant, budget: Duration) -> f64 {
    let elapsed = started.elapsed();
    assert!(
        elapsed <= budget,
        "took {:.1}s, budget {:.0}s",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    elapsed.as_secs_f64()
}

// ---------------------------------------------------------------------------
// Criterion 1: full-size 1-D signal benchmark method ordering
// ---------------------------------------------------------------------------

const C1_SEEDS: u64 = 5;
const C1_TWO_LAYER_SLACK: f64 = 1e-9;
const C1_BUDGET: Duration = Duration::from_secs(600);

#[test]
fn criterion_1_signal_benchmark_method_ordering_across_seeds() {
    let started = Instant::now();
    for seed in 0..C1_SEEDS {
        let config = Benchmark1dConfig {
            include_gd_two_layer: false,
            include_sinkhorn: false,
            seed,
            ..Benchmark1dConfig::default()
        };
        let bench = run_benchmark_1d_with(&config).unwrap();
        let gd1 = find_row(&bench.results, BenchMethod::Gd, 1).target_loss;
        let lva1 = find_row(&bench.results, BenchMethod::Lva1, 1).target_loss;
        let lva2 = find_row(&bench.results, BenchMethod::Lva2, 2).target_loss;
        assert!(
            lva1 < gd1,
            "seed {seed}: closed-form loss {lva1:.6e} is not strictly below finetuning loss {gd1:.6e}"
        );
        assert!(
            lva2 <= lva1 + C1_TWO_LAYER_SLACK,
            "seed {seed}: two-layer loss {lva2:.6e} exceeds one-layer loss {lva1:.6e}"
        );
    }
    let secs = assert_within(started, C1_BUDGET);
    println!("criterion 1 (1-d benchmark method ordering across {C1_SEEDS} seeds): PASS ({secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 2: the closed-form correction is least-squares optimal
// ---------------------------------------------------------------------------

const C2_GRADIENT_TOL: f64 = 1e-8;
const C2_IMPROVEMENT_TOL: f64 = 1e-12;
const C2_PERTURBATIONS: usize = 100;
const C2_GRID_STEP: f64 = 1e-3;
const C2_BUDGET: Duration = Duration::from_secs(30);

/// Design matrix of the last-layer fit: target penultimate features plus a
/// constant-one bias column.
fn design_matrix(net: &Mlp, target: &PairedDataset) -> Matrix {
    let z = net.latent(&target.inputs, net.n_layers() - 1).unwrap();
    Matrix::from_fn(z.rows(), z.cols() + 1, |i, c| if c < z.cols() { z.get(i, c) } else { 1.0 })
}

/// The correction as one `(features + 1) x outputs` coefficient block, bias
/// row last, so the fit reads `design * coefficients ~ residue`.
fn coefficient_block(delta: &LayerDelta) -> Matrix {
    let dw = &delta.d_weight;
    Matrix::from_fn(dw.cols() + 1, dw.rows(), |c, o| {
        if c < dw.cols() {
            dw.get(o, c)
        } else {
            delta.d_bias[o]
        }
    })
}

fn fit_objective(design: &Matrix, coeff: &Matrix, residue: &Matrix) -> f64 {
    let fitted = matmul(design, coeff).unwrap();
    fitted
        .data()
        .iter()
        .zip(residue.data())
        .map(|(f, q)| (f - q) * (f - q))
        .sum()
}

#[test]
fn criterion_2_closed_form_is_least_squares_optimal() {
    let started = Instant::now();
    // The objective gradient vanishes at the returned correction.
    let mut first_instance = None;
    for t in 0..20u64 {
        let net = init_mlp(&[2, 6, 2], Activation::ReLU, 900 + t).unwrap();
        let source = random_dataset(920 + t, 30, 2, 2, 1.0);
        let target = nudged(&source, 940 + t, 0.15);
        let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
        let (_, delta) = lva_one_layer(
            &net,
            &alignment,
            &source,
            &target,
            ResidueVariant::LatentJacobian,
            0.0,
            true,
        )
        .unwrap();
        let design = design_matrix(&net, &target);
        let residue =
            transferal_residue(&net, &alignment, &source, &target, ResidueVariant::LatentJacobian)
                .unwrap()
                .q;
        let coeff = coefficient_block(&delta);

        let fitted = matmul(&design, &coeff).unwrap();
        let normal_lhs = matmul(&design.transpose(), &fitted).unwrap();
        let normal_rhs = matmul(&design.transpose(), &residue).unwrap();
        let gradient = Matrix::from_fn(coeff.rows(), coeff.cols(), |i, j| {
            2.0 * (normal_lhs.get(i, j) - normal_rhs.get(i, j))
        });
        let scale = 1.0_f64.max(2.0 * maxabs(&normal_lhs)).max(2.0 * maxabs(&normal_rhs));
        assert!(
            maxabs(&gradient) < C2_GRADIENT_TOL * scale,
            "instance {t}: gradient {:.3e} at the closed-form solution (scale {scale:.3e})",
            maxabs(&gradient)
        );
        if first_instance.is_none() {
            first_instance = Some((design, coeff, residue));
        }
    }

    // No random perturbation of the coefficients improves the objective.
    let (design, coeff, residue) = first_instance.unwrap();
    let base = fit_objective(&design, &coeff, &residue);
    for p in 0..C2_PERTURBATIONS {
        let magnitude = [1e-6, 1e-3, 1e-1][p % 3];
        let cells = coeff.rows() * coeff.cols();
        let perturbed = Matrix::from_fn(coeff.rows(), coeff.cols(), |i, j| {
            coeff.get(i, j)
                + magnitude * normal(960, Stream::Trial, (p * cells + i * coeff.cols() + j) as u64)
        });
        let value = fit_objective(&design, &perturbed, &residue);
        assert!(
            base - value <= C2_IMPROVEMENT_TOL * base.max(1.0),
            "perturbation {p} improved the objective from {base:.12e} to {value:.12e}"
        );
    }

    // On a scalar one-layer model the closed form lands on the grid-search
    // minimizer of the target loss, within the grid resolution.
    let net = init_mlp(&[1, 1], Activation::Identity, 5).unwrap();
    let m = 40;
    let source = PairedDataset::new(
        Matrix::from_fn(m, 1, |i, _| uniform(11, Stream::Trial, i as u64) * 2.0 - 1.0),
        Matrix::from_fn(m, 1, |i, _| 0.05 * normal(12, Stream::Trial, i as u64) - 0.1),
        "src",
    )
    .unwrap();
    let tgt_inputs = Matrix::from_fn(m, 1, |i, _| uniform(13, Stream::Trial, i as u64) * 2.0 - 1.0);
    let tgt_labels = Matrix::from_fn(m, 1, |i, _| {
        0.8 * tgt_inputs.get(i, 0) + 0.3 + 0.01 * normal(14, Stream::Trial, i as u64)
    });
    let target = PairedDataset::new(tgt_inputs, tgt_labels, "tgt").unwrap();
    let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
    let (adapted, _) = lva_one_layer(
        &net,
        &alignment,
        &source,
        &target,
        ResidueVariant::LatentJacobian,
        0.0,
        true,
    )
    .unwrap();
    let w_closed = adapted.layers[0].weight.get(0, 0);
    let b_closed = adapted.layers[0].bias[0];

    let (mut sxx, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        let x = target.inputs.get(i, 0);
        let y = target.labels.get(i, 0);
        sxx += x * x;
        sx += x;
        sxy += x * y;
        sy += y;
    }
    let n_f = m as f64;
    let steps = (4.0 / C2_GRID_STEP).round() as usize;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for wi in 0..=steps {
        let w = -2.0 + wi as f64 * C2_GRID_STEP;
        // Target loss up to the label-only constant, which cannot move the argmin.
        let w_part = w * w * sxx - 2.0 * w * sxy;
        let cross = 2.0 * w * sx - 2.0 * sy;
        for bi in 0..=steps {
            let b = -2.0 + bi as f64 * C2_GRID_STEP;
            let loss = w_part + b * cross + b * b * n_f;
            if loss < best.0 {
                best = (loss, w, b);
            }
        }
    }
    assert!(
        (w_closed - best.1).abs() <= C2_GRID_STEP + 1e-12,
        "closed-form weight {w_closed:.9} vs grid minimizer {:.9}",
        best.1
    );
    assert!(
        (b_closed - best.2).abs() <= C2_GRID_STEP + 1e-12,
        "closed-form bias {b_closed:.9} vs grid minimizer {:.9}",
        best.2
    );
    let secs = assert_within(started, C2_BUDGET);
    println!("criterion 2 (closed form is least-squares optimal): PASS ({secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 3: residue identities
// ---------------------------------------------------------------------------

const C3_EXACT_TOL: f64 = 1e-10;
const C3_IDENTITY_TOL: f64 = 1e-12;
const C3_BUDGET: Duration = Duration::from_secs(10);
const C3_VARIANTS: [ResidueVariant; 2] =
    [ResidueVariant::LatentJacobian, ResidueVariant::InputJacobian];

#[test]
fn criterion_3_residue_identities() {
    let started = Instant::now();
    // Exactly fitted model and identical domains: the residue vanishes.
    let net = init_mlp(&[2, 5, 2], Activation::ReLU, 21).unwrap();
    let inputs =
        Matrix::from_fn(30, 2, |i, j| uniform(22, Stream::Trial, (i * 2 + j) as u64) * 2.0 - 1.0);
    let labels = net.forward(&inputs).unwrap();
    let exact = PairedDataset::new(inputs, labels, "exact").unwrap();
    let self_alignment = align_nearest(&exact, &exact, &JointMetric::default()).unwrap();
    for variant in C3_VARIANTS {
        let residue = transferal_residue(&net, &self_alignment, &exact, &exact, variant).unwrap();
        assert!(
            maxabs(&residue.q) < C3_EXACT_TOL,
            "{variant:?}: residue {:.3e} on an exactly fitted identical-domain setup",
            maxabs(&residue.q)
        );
    }

    // The reported parts compose to the residue, and the residue matches an
    // independently assembled first-order correction.
    let net = init_mlp(&[2, 6, 2], Activation::Tanh, 23).unwrap();
    let source = random_dataset(24, 26, 2, 2, 1.0);
    let target = nudged(&source, 25, 0.15);
    let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
    let n = net.n_layers();
    let source_pred = net.forward(&source.inputs).unwrap();
    let z_src = net.latent(&source.inputs, n - 1).unwrap();
    let z_tgt = net.latent(&target.inputs, n - 1).unwrap();
    for variant in C3_VARIANTS {
        let r = transferal_residue(&net, &alignment, &source, &target, variant).unwrap();
        let composed = Matrix::from_fn(r.q.rows(), r.q.cols(), |i, c| {
            r.label_shift.get(i, c) - r.jacobian_correction.get(i, c) + r.pretrain_error.get(i, c)
        });
        assert!(
            max_diff(&r.q, &composed) <= C3_IDENTITY_TOL,
            "{variant:?}: parts do not compose to the residue"
        );
        for i in 0..target.len() {
            let j = alignment.source_index[i];
            let (jacobian, step): (Matrix, Vec<f64>) = match variant {
                ResidueVariant::LatentJacobian => (
                    net.jacobian(z_src.row(j), n - 1..n).unwrap(),
                    z_tgt.row(i).iter().zip(z_src.row(j)).map(|(t, s)| t - s).collect(),
                ),
                ResidueVariant::InputJacobian => (
                    net.jacobian(source.inputs.row(j), 0..n).unwrap(),
                    target
                        .inputs
                        .row(i)
                        .iter()
                        .zip(source.inputs.row(j))
                        .map(|(t, s)| t - s)
                        .collect(),
                ),
            };
            for c in 0..r.q.cols() {
                let linear: f64 = step.iter().enumerate().map(|(k, s)| jacobian.get(c, k) * s).sum();
                let oracle = target.labels.get(i, c) - source_pred.get(j, c) - linear;
                assert!(
                    (r.q.get(i, c) - oracle).abs() <= C3_IDENTITY_TOL,
                    "{variant:?}: residue ({i}, {c}) is {:.12e}, oracle says {oracle:.12e}",
                    r.q.get(i, c)
                );
            }
        }
    }

    // On a fully affine model both linearization points give the same residue.
    let affine = init_mlp(&[2, 4, 2], Activation::Identity, 27).unwrap();
    let source = random_dataset(28, 22, 2, 2, 1.0);
    let target = nudged(&source, 29, 0.2);
    let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
    let latent_q =
        transferal_residue(&affine, &alignment, &source, &target, ResidueVariant::LatentJacobian)
            .unwrap()
            .q;
    let input_q =
        transferal_residue(&affine, &alignment, &source, &target, ResidueVariant::InputJacobian)
            .unwrap()
            .q;
    assert!(
        max_diff(&latent_q, &input_q) <= C3_IDENTITY_TOL,
        "affine model: residue variants differ by {:.3e}",
        max_diff(&latent_q, &input_q)
    );
    let secs = assert_within(started, C3_BUDGET);
    println!("criterion 3 (residue identities): PASS ({secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 4: error bounds hold on random instances; `verify` exits clean
// ---------------------------------------------------------------------------

const C4_TRIALS: u64 = 100;
const C4_BUDGET: Duration = Duration::from_secs(60);

#[test]
fn criterion_4_error_bounds_hold_on_random_instances() {
    let started = Instant::now();
    // Transfer bound, one corrected layer per instance. Half the corrections
    // come from the closed-form solver, half are random last-weight nudges;
    // biases stay zero throughout, matching the regime the bound is stated for.
    for t in 0..C4_TRIALS {
        let f = homogeneous_net(1000 + t, &[2, 5, 1]);
        let source = random_dataset(2000 + t, 20, 2, 1, 1.0);
        let target = nudged(&source, 3000 + t, 0.1);
        let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
        let g = if t % 2 == 0 {
            let mut g = f.clone();
            let lw = &f.layers[1].weight;
            g.layers[1].weight = Matrix::from_fn(lw.rows(), lw.cols(), |o, c| {
                lw.get(o, c) + 0.05 * normal(4000 + t, Stream::Trial, (o * 7 + c) as u64)
            });
            g
        } else {
            lva_one_layer(
                &f,
                &alignment,
                &source,
                &target,
                ResidueVariant::LatentJacobian,
                0.0,
                false,
            )
            .unwrap()
            .0
        };
        let report = verify_transfer_bound(&f, &g, 1, &alignment, &source, &target).unwrap();
        assert!(
            report.holds,
            "transfer trial {t}: observed {:.6e} exceeds bound {:.6e}",
            report.observed_loss, report.rhs_bound
        );
    }

    // Generalization bound on perturbed-subset test sets.
    for t in 0..C4_TRIALS {
        let net = init_mlp(&[2, 5, 1], Activation::ReLU, 500 + t).unwrap();
        let adapt = random_dataset(600 + t, 24, 2, 1, 1.0);
        let rows: Vec<usize> = (0..8).map(|k| k * 3).collect();
        let test = PairedDataset::new(
            Matrix::from_fn(8, 2, |i, j| {
                adapt.inputs.get(rows[i], j) + 1e-3 * normal(700 + t, Stream::Trial, (i * 2 + j) as u64)
            }),
            Matrix::from_fn(8, 1, |i, _| {
                adapt.labels.get(rows[i], 0) + 1e-3 * normal(800 + t, Stream::Trial, i as u64)
            }),
            "test",
        )
        .unwrap();
        let report = verify_generalization_bound(&net, &adapt, &test).unwrap();
        assert!(
            report.holds,
            "generalization trial {t}: test loss {:.6e} exceeds bound {:.6e}",
            report.test_loss, report.rhs_bound
        );
    }

    // The CLI checker agrees: a pretrain/adapt/verify round trip exits 0.
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&lva(
        dir.path(),
        &[
            "pretrain", "--gen", "signal-source", "--n", "80", "--epochs", "60", "--hidden", "8",
            "--seed", "7", "--dump-data", "source.csv", "--out", "model.json",
        ],
    ));
    assert_ok(&lva(
        dir.path(),
        &[
            "pretrain", "--gen", "signal-target", "--n", "80", "--epochs", "0", "--hidden", "8",
            "--seed", "7", "--dump-data", "target.csv", "--out", "scratch.json",
        ],
    ));
    assert_ok(&lva(
        dir.path(),
        &[
            "adapt", "--model", "model.json", "--source", "source.csv", "--target", "target.csv",
            "--method", "lva1", "--out", "adapted.json",
        ],
    ));
    assert_ok(&lva(
        dir.path(),
        &[
            "verify", "--pretrained", "model.json", "--adapted", "adapted.json", "--source",
            "source.csv", "--target", "target.csv", "--test", "target.csv",
        ],
    ));
    let secs = assert_within(started, C4_BUDGET);
    println!("criterion 4 (bounds hold on {C4_TRIALS} random instances, verify exits 0): PASS ({secs:.1}s)");
}

// ---------------------------------------------------------------------------
// Criterion 5: convolution equals the unfolded matrix product
// ---------------------------------------------------------------------------

const C5_TOL: f64 = 1e-12;
const C5_COMBOS: u64 = 50;
const C5_BUDGET: Duration = Duration::from_secs(30);

fn pick(seed: u64, index: u64, lo: usize, hi: usize) -> usize {
    let u = uniform(seed, Stream::Trial, index);
    lo + ((hi - lo + 1) as f64 * u) as usize
}

/// A 1x1 convolution applying the same affine map as a dense layer.
fn kernel_from_dense(layer: &Layer) -> ConvKernel {
    let (out_c, in_c) = (layer.weight.rows(), layer.weight.cols());
    let mut weights = vec![0.0; in_c * out_c];
    for o in 0..out_c {
        for i in 0..in_c {
            weights[i * out_c + o] = layer.weight.get(o, i);
        }
    }
    ConvKernel::new(1, 1, in_c, out_c, 1, 0, weights, layer.bias.clone()).unwrap()
}

#[test]
fn criterion_5_convolution_matches_the_unfolded_matrix_product() {
    let started = Instant::now();
    for t in 0..C5_COMBOS {
        let kh = pick(60, 10 * t, 1, 4);
        let kw = pick(60, 10 * t + 1, 1, 4);
        let stride = pick(60, 10 * t + 2, 1, 3);
        let padding = pick(60, 10 * t + 3, 0, 2);
        let in_c = pick(60, 10 * t + 4, 1, 3);
        let out_c = pick(60, 10 * t + 5, 1, 3);
        let h = kh + pick(60, 10 * t + 6, 0, 4);
        let w = kw + pick(60, 10 * t + 7, 0, 4);
        let weights: Vec<f64> = (0..kh * kw * in_c * out_c)
            .map(|k| uniform(61, Stream::Trial, t * 1000 + k as u64) * 2.0 - 1.0)
            .collect();
        let bias: Vec<f64> = (0..out_c)
            .map(|k| uniform(62, Stream::Trial, t * 50 + k as u64) * 2.0 - 1.0)
            .collect();
        let kernel =
            ConvKernel::new(kh, kw, in_c, out_c, stride, padding, weights, bias).unwrap();
        let image = ImageTensor::new(
            h,
            w,
            in_c,
            (0..h * w * in_c)
                .map(|k| uniform(63, Stream::Trial, t * 4000 + k as u64) * 2.0 - 1.0)
                .collect(),
        )
        .unwrap();

        let direct = conv_forward(&kernel, &image).unwrap();
        let patches = im2col(&image, kh, kw, stride, padding).unwrap();
        let unfolded = matmul(&patches.matrix, &kernel_as_matrix(&kernel).transpose()).unwrap();
        let biased = Matrix::from_fn(unfolded.rows(), unfolded.cols(), |i, c| {
            unfolded.get(i, c) + kernel.bias()[c]
        });
        let folded = fold(&biased, direct.height(), direct.width()).unwrap();
        assert_eq!(
            (folded.height(), folded.width(), folded.channels()),
            (direct.height(), direct.width(), direct.channels()),
            "combo {t}: shape mismatch for {h}x{w}x{in_c}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        );
        let diff = direct
            .data()
            .iter()
            .zip(folded.data())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        assert!(
            diff <= C5_TOL,
            "combo {t}: direct and unfolded convolution differ by {diff:.3e}"
        );
    }

    // A stack of 1x1 convolutions on 1x1 images is the same model as a dense
    // network, and the closed-form correction agrees coefficient for
    // coefficient.
    let mlp = init_mlp(&[2, 4, 3], Activation::ReLU, 71).unwrap();
    let cnn = Cnn::new(vec![
        ConvLayer {
            kernel: kernel_from_dense(&mlp.layers[0]),
            activation: mlp.layers[0].activation,
        },
        ConvLayer {
            kernel: kernel_from_dense(&mlp.layers[1]),
            activation: mlp.layers[1].activation,
        },
    ])
    .unwrap();
    let source = random_dataset(72, 12, 2, 3, 1.0);
    let target = nudged(&source, 73, 0.2);
    let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
    let (dense_adapted, _) = lva_one_layer(
        &mlp,
        &alignment,
        &source,
        &target,
        ResidueVariant::LatentJacobian,
        0.0,
        true,
    )
    .unwrap();
    let src_images = ImageDataset::from_paired(&source, (1, 1, 2), (1, 1, 3)).unwrap();
    let tgt_images = ImageDataset::from_paired(&target, (1, 1, 2), (1, 1, 3)).unwrap();
    let kernel = lva_conv_last_layer(&cnn, &alignment, &src_images, &tgt_images, 0.0).unwrap();
    let dense_last = &dense_adapted.layers[1];
    for o in 0..3 {
        for i in 0..4 {
            let conv_w = kernel.weights()[i * 3 + o];
            let dense_w = dense_last.weight.get(o, i);
            assert!(
                (conv_w - dense_w).abs() <= C5_TOL,
                "weight ({o}, {i}): convolutional {conv_w:.15e} vs dense {dense_w:.15e}"
            );
        }
        assert!(
            (kernel.bias()[o] - dense_last.bias[o]).abs() <= C5_TOL,
            "bias {o}: convolutional {:.15e} vs dense {:.15e}",
            kernel.bias()[o],
            dense_last.bias[o]
        );
    }
    let secs = assert_within(started, C5_BUDGET);
    println!(
        "criterion 5 (convolution matches its unfolded matrix product over {C5_COMBOS} shapes): PASS ({secs:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: full-size deblurring benchmark ordering plus control
// ---------------------------------------------------------------------------

const C6_SEEDS: u64 = 3;
const C6_SAMPLES: usize = 256;
const C6_LOSS_SLACK: f64 = 1e-9;
const C6_PSNR_SLACK: f64 = 1e-9;
const C6_CONTROL_TOL: f64 = 1e-6;
const C6_BUDGET: Duration = Duration::from_secs(900);

#[test]
fn criterion_6_deblur_benchmark_ordering_and_identical_domain_control() {
    let started = Instant::now();
    for seed in 0..C6_SEEDS {
        let config = DeblurConfig {
            spec: BlurSpec { seed, ..BlurSpec::default() },
            budgets: vec![C6_SAMPLES],
            ..DeblurConfig::default()
        };
        let bench = run_benchmark_deblur_with(&config).unwrap();
        let gd = find_row(&bench.results, BenchMethod::Gd, C6_SAMPLES);
        let lva1 = find_row(&bench.results, BenchMethod::Lva1, C6_SAMPLES);
        assert!(
            lva1.target_loss <= gd.target_loss + C6_LOSS_SLACK,
            "seed {seed}: closed-form loss {:.6e} above finetuning loss {:.6e}",
            lva1.target_loss,
            gd.target_loss
        );
        let (gd_psnr, lva_psnr) = (gd.psnr().unwrap(), lva1.psnr().unwrap());
        assert!(
            lva_psnr >= gd_psnr - C6_PSNR_SLACK,
            "seed {seed}: closed-form psnr {lva_psnr:.4} below finetuning psnr {gd_psnr:.4}"
        );
    }

    // With identical source and target corpora the closed-form correction is
    // numerically zero.
    let control = DeblurConfig {
        spec: BlurSpec {
            image_size: 16,
            num_images: 32,
            blur_sigma_source: 1.3,
            blur_sigma_target: 1.3,
            seed: 0,
        },
        budgets: vec![32],
        test_images: 8,
        pretrain_epochs: 60,
        gd_epochs: 40,
        learning_rate: 1e-3,
        ridge: 0.0,
    };
    let bench = run_benchmark_deblur_with(&control).unwrap();
    let delta = bench.delta_kernel_norms[&32];
    assert!(
        delta < C6_CONTROL_TOL,
        "identical domains still produced a kernel correction of norm {delta:.3e}"
    );
    let secs = assert_within(started, C6_BUDGET);
    println!(
        "criterion 6 (deblur ordering across {C6_SEEDS} seeds, identical-domain control): PASS ({secs:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: benchmark reruns are byte-identical outside runtime fields
// ---------------------------------------------------------------------------

fn mask_runtime_csv(text: &str) -> String {
    let mut lines: Vec<String> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            lines.push(line.to_string());
            continue;
        }
        let mut cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 6, "unexpected row {line:?}");
        cells[4] = "X";
        lines.push(cells.join(","));
    }
    lines.join("\n")
}

fn mask_runtime_lines(text: &str) -> String {
    text.lines()
        .map(|line| if line.contains("\"runtime_ms\"") { "RUNTIME" } else { line })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_7_benchmark_reruns_are_byte_identical_outside_runtime_fields() {
    let started = Instant::now();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let signal_args = [
        "bench", "1d", "--n", "120", "--pretrain-epochs", "200", "--gd-epochs", "150",
        "--sinkhorn-max-iter", "200", "--seed", "3", "--out", "signal.csv",
    ];
    let deblur_args = [
        "bench", "deblur", "--image-size", "8", "--num-images", "16", "--budgets", "4,16",
        "--test-images", "6", "--pretrain-epochs", "50", "--gd-epochs", "80", "--out", "deblur.csv",
    ];
    for dir in [dir_a.path(), dir_b.path()] {
        assert_ok(&lva(dir, &signal_args));
        assert_ok(&lva(dir, &deblur_args));
    }

    for name in ["signal.csv", "deblur.csv"] {
        let a = mask_runtime_csv(&read(&dir_a.path().join(name)));
        let b = mask_runtime_csv(&read(&dir_b.path().join(name)));
        assert_eq!(a, b, "{name} differs between reruns outside the runtime column");
    }
    for name in ["signal.transfer.json", "signal.generalization.json", "deblur.summary.json"] {
        let a = read(&dir_a.path().join(name));
        let b = read(&dir_b.path().join(name));
        assert_eq!(a, b, "{name} differs between reruns");
    }
    for name in ["signal.manifest.json", "deblur.manifest.json"] {
        let a = mask_runtime_lines(&read(&dir_a.path().join(name)));
        let b = mask_runtime_lines(&read(&dir_b.path().join(name)));
        assert_eq!(a, b, "{name} differs between reruns outside runtime fields");
    }
    println!(
        "criterion 7 (benchmark reruns byte-identical outside runtime fields): PASS ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: two-layer iteration behaviour
// ---------------------------------------------------------------------------

const C8_INSTANCES: u64 = 20;
const C8_TRACE_SLACK: f64 = 1e-12;
const C8_BUDGET: Duration = Duration::from_secs(30);

#[test]
fn criterion_8_two_layer_iteration_never_increases_the_objective() {
    let started = Instant::now();
    for t in 0..C8_INSTANCES {
        let activation = if t % 2 == 0 { Activation::ReLU } else { Activation::Tanh };
        let net = init_mlp(&[2, 7, 1], activation, 80 + t).unwrap();
        let source = random_dataset(7000 + t, 25, 2, 1, 1.0);
        let target = nudged(&source, 8000 + t, 0.2);
        let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
        let two = lva_two_layer(&net, &alignment, &source, &target, 4, 0.0).unwrap();
        assert!(two.linearized_objective.len() >= 2, "instance {t}: objective trace too short");
        for w in two.linearized_objective.windows(2) {
            assert!(
                w[1] <= w[0] + C8_TRACE_SLACK * w[0].abs().max(1.0),
                "instance {t}: objective rose from {:.12e} to {:.12e}",
                w[0],
                w[1]
            );
        }
    }

    // Zero sweeps reproduce the one-layer solution exactly.
    let net = init_mlp(&[2, 7, 1], Activation::ReLU, 99).unwrap();
    let source = random_dataset(7100, 25, 2, 1, 1.0);
    let target = nudged(&source, 8100, 0.2);
    let alignment = align_nearest(&source, &target, &JointMetric::default()).unwrap();
    let (one, _) = lva_one_layer(
        &net,
        &alignment,
        &source,
        &target,
        ResidueVariant::LatentJacobian,
        0.0,
        true,
    )
    .unwrap();
    let two = lva_two_layer(&net, &alignment, &source, &target, 0, 0.0).unwrap();
    assert_eq!(two.net, one, "zero sweeps did not return the one-layer network unchanged");
    assert_eq!(two.fold_scale, 0.0);
    let secs = assert_within(started, C8_BUDGET);
    println!(
        "criterion 8 (two-layer objective non-increasing over {C8_INSTANCES} instances, zero sweeps exact): PASS ({secs:.1}s)"
    );
}
