//! The four subcommands: pretrain, adapt, verify, bench.
//!
//! Every command writes a `<output stem>.manifest.json` echoing its fully
//! resolved configuration. Data goes to stdout and the output files;
//! progress notes and warnings go to stderr.

use crate::report::{self, JsonObject};
use crate::{
    AdaptArgs, AdaptMethod, AlignmentKind, Bench1dArgs, BenchArgs, BenchKind, Command, DeblurArgs, Failure, Generator,
    PretrainArgs, VariantKind, VerifyArgs,
};
use lva_core::align::{align_nearest, align_sinkhorn, Alignment, JointMetric, PairedDataset};
use lva_core::bench::{
    gen_blur_pairs, gen_signal, image_loss, init_cnn, polish_cnn_last, run_benchmark_1d_with, run_benchmark_deblur_with,
    train_cnn, BenchMethod, BenchResult, Benchmark1dConfig, BlurSpec, DeblurConfig, SignalSpec,
};
use lva_core::bench::finetune_cnn_last;
use lva_core::convadapt::{lva_conv_last_layer, Cnn, ConvKernel, ImageDataset};
use lva_core::lva::{
    lva_one_layer, lva_two_layer, verify_generalization_bound, verify_transfer_bound, GeneralizationBoundReport,
    ResidueVariant, TransferBoundReport,
};
use lva_core::train::{finetune_gd, init_mlp, mse_loss, pretrain, Optimizer, TrainConfig};
use lva_core::{Activation, Matrix, Mlp};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Adapt(args) => cmd_adapt(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Bench(BenchArgs { which }) => match which {
            BenchKind::OneD(args) => cmd_bench_1d(&args),
            BenchKind::Deblur(args) => cmd_bench_deblur(&args),
        },
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    fs::write(path, content).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json_file(path: &Path, mut text: String) -> Result<(), Failure> {
    if !text.ends_with('\n') {
        text.push('\n');
    }
    write_file(path, &text)
}

fn write_manifest(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

/// `out.json` -> `out.<suffix>` in the same directory.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".to_string());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn ms_since(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn parse_usize_list(text: &str, flag: &str) -> Result<Vec<usize>, Failure> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|cell| {
            cell.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("{flag} expects comma-separated integers, got {:?}", cell.trim())))
        })
        .collect()
}

fn check_learning_rate(lr: f64) -> Result<(), Failure> {
    if lr.is_finite() && lr > 0.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--lr must be positive and finite, got {lr}")))
    }
}

fn check_batch_size(batch: Option<usize>) -> Result<(), Failure> {
    if batch == Some(0) {
        Err(Failure::Usage("--batch-size must be at least 1".to_string()))
    } else {
        Ok(())
    }
}

fn train_config(sgd: bool, lr: f64, epochs: usize, batch_size: Option<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: if sgd { Optimizer::Sgd } else { Optimizer::adam() },
        learning_rate: lr,
        epochs,
        batch_size,
        seed,
    }
}

type ImageDims = (usize, usize, usize);

struct LoadedDataset {
    flat: PairedDataset,
    image_dims: Option<(ImageDims, ImageDims)>,
}

fn load_dataset(path: &Path) -> Result<LoadedDataset, Failure> {
    let text = read_file(path)?;
    let name = display(path);
    let flat = PairedDataset::parse_csv(&text, &name, name.clone())?;
    let image_dims = parse_image_comment(&text, &name)?;
    Ok(LoadedDataset { flat, image_dims })
}

/// Looks for the `# images HxWxC -> HxWxC` comment that marks a CSV as
/// flattened image rows.
fn parse_image_comment(text: &str, source: &str) -> Result<Option<(ImageDims, ImageDims)>, Failure> {
    for line in text.lines() {
        let Some(comment) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        let Some(spec) = comment.trim_start().strip_prefix("images") else {
            continue;
        };
        let parts: Vec<&str> = spec.split("->").collect();
        if parts.len() != 2 {
            return Err(Failure::Data(format!("{source}: malformed image header {:?}", line.trim())));
        }
        let input = parse_dims(parts[0], source)?;
        let label = parse_dims(parts[1], source)?;
        return Ok(Some((input, label)));
    }
    Ok(None)
}

fn parse_dims(cell: &str, source: &str) -> Result<ImageDims, Failure> {
    let parts: Vec<&str> = cell.trim().split('x').collect();
    if parts.len() == 3 {
        let mut dims = [0usize; 3];
        let mut ok = true;
        for (slot, part) in dims.iter_mut().zip(&parts) {
            match part.trim().parse::<usize>() {
                Ok(v) if v > 0 => *slot = v,
                _ => ok = false,
            }
        }
        if ok {
            return Ok((dims[0], dims[1], dims[2]));
        }
    }
    Err(Failure::Data(format!("{source}: image dimensions {:?} are not of the form HxWxC", cell.trim())))
}

fn image_dataset(loaded: &LoadedDataset, flag: &str) -> Result<ImageDataset, Failure> {
    match loaded.image_dims {
        Some((input, label)) => Ok(ImageDataset::from_paired(&loaded.flat, input, label)?),
        None => Err(Failure::Data(format!(
            "{} ({}): missing the `# images HxWxC -> HxWxC` header that convolutional models need",
            flag, loaded.flat.name
        ))),
    }
}

fn image_csv_string(set: &ImageDataset) -> Result<String, Failure> {
    let (h, w, c) = set.input_dims();
    let (lh, lw, lc) = set.label_dims();
    Ok(format!("# images {h}x{w}x{c} -> {lh}x{lw}x{lc}\n{}", set.to_paired()?.to_csv_string()))
}

enum ModelFile {
    Dense(Mlp),
    Conv(Cnn),
}

fn load_model(path: &Path) -> Result<ModelFile, Failure> {
    let text = read_file(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: not valid JSON: {e}", path.display())))?;
    if value.get("conv_layers").is_some() {
        Ok(ModelFile::Conv(Cnn::from_json(&text)?))
    } else if value.get("layers").is_some() {
        Ok(ModelFile::Dense(Mlp::from_json(&text)?))
    } else {
        Err(Failure::Data(format!(
            "{}: neither a dense (`layers`) nor a convolutional (`conv_layers`) model file",
            path.display()
        )))
    }
}

fn dense_model(path: &Path, purpose: &str) -> Result<Mlp, Failure> {
    match load_model(path)? {
        ModelFile::Dense(net) => Ok(net),
        ModelFile::Conv(_) => Err(Failure::Data(format!(
            "{}: {purpose} applies to dense models; this is a convolutional model",
            path.display()
        ))),
    }
}

struct SinkhornDiag {
    reg: f64,
    iterations: usize,
    marginal_error: f64,
    converged: bool,
}

fn build_alignment(
    kind: AlignmentKind,
    source: &PairedDataset,
    target: &PairedDataset,
    reg_override: Option<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(Alignment, Option<SinkhornDiag>), Failure> {
    let metric = JointMetric::default();
    match kind {
        AlignmentKind::Nn => Ok((align_nearest(source, target, &metric)?, None)),
        AlignmentKind::Sinkhorn => {
            let reg = match reg_override {
                Some(r) if r.is_finite() && r > 0.0 => r,
                Some(r) => return Err(Failure::Usage(format!("--sinkhorn-reg must be positive and finite, got {r}"))),
                None => default_sinkhorn_reg(source, target, &metric),
            };
            let sk = align_sinkhorn(source, target, &metric, reg, max_iter, tol)?;
            if !sk.converged {
                eprintln!(
                    "note: sinkhorn stopped after {} iterations at marginal error {:.3e}; using its best iterate",
                    sk.iterations, sk.marginal_error
                );
            }
            let diag = SinkhornDiag {
                reg,
                iterations: sk.iterations,
                marginal_error: sk.marginal_error,
                converged: sk.converged,
            };
            Ok((sk.alignment, Some(diag)))
        }
    }
}

/// Same default the 1-D benchmark uses: a twentieth of the median squared
/// joint-space cost.
fn default_sinkhorn_reg(source: &PairedDataset, target: &PairedDataset, metric: &JointMetric) -> f64 {
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
    let median = *costs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
    if median > 0.0 {
        0.05 * median
    } else {
        1e-3
    }
}

fn add_sinkhorn_metrics(extras: &mut BTreeMap<String, f64>, diag: &Option<SinkhornDiag>) {
    if let Some(d) = diag {
        extras.insert("sinkhorn_iterations".to_string(), d.iterations as f64);
        extras.insert("sinkhorn_marginal_error".to_string(), d.marginal_error);
        extras.insert("sinkhorn_reg".to_string(), d.reg);
        extras.insert("sinkhorn_converged".to_string(), if d.converged { 1.0 } else { 0.0 });
    }
}

fn frobenius(m: &Matrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m.get(i, j);
            sum = v.mul_add(v, sum);
        }
    }
    sum.sqrt()
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn kernel_delta_norm(before: &ConvKernel, after: &ConvKernel) -> f64 {
    let mut sum = 0.0;
    for (a, b) in before.weights().iter().zip(after.weights()) {
        let d = b - a;
        sum = d.mul_add(d, sum);
    }
    for (a, b) in before.bias().iter().zip(after.bias()) {
        let d = b - a;
        sum = d.mul_add(d, sum);
    }
    sum.sqrt()
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

enum TrainData {
    Flat(PairedDataset),
    Images(ImageDataset),
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<u8, Failure> {
    check_learning_rate(args.lr)?;
    check_batch_size(args.batch_size)?;
    let config = train_config(args.sgd, args.lr, args.epochs, args.batch_size, args.seed);

    let data = match (args.generator, &args.data) {
        (None, None) => return Err(Failure::Usage("pass --gen <generator> or --data <csv>".to_string())),
        (Some(_), Some(_)) => return Err(Failure::Usage("--gen conflicts with --data".to_string())),
        (Some(Generator::SignalSource), None) => TrainData::Flat(gen_signal(&SignalSpec::source(args.n, args.seed))?),
        (Some(Generator::SignalTarget), None) => TrainData::Flat(gen_signal(&SignalSpec::target(args.n, args.seed))?),
        (Some(gen @ (Generator::BlurSource | Generator::BlurTarget)), None) => {
            let spec = BlurSpec {
                image_size: args.image_size,
                num_images: args.num_images,
                blur_sigma_source: args.sigma_source,
                blur_sigma_target: args.sigma_target,
                seed: args.seed,
            };
            let (source, target) = gen_blur_pairs(&spec)?;
            let flat = if gen == Generator::BlurSource { source } else { target };
            let dims = (args.image_size, args.image_size, 1);
            TrainData::Images(ImageDataset::from_paired(&flat, dims, dims)?)
        }
        (None, Some(path)) => {
            let loaded = load_dataset(path)?;
            match loaded.image_dims {
                Some((input, label)) => TrainData::Images(ImageDataset::from_paired(&loaded.flat, input, label)?),
                None => TrainData::Flat(loaded.flat),
            }
        }
    };

    let model_kind;
    let dataset_name;
    let samples;
    let history;
    let final_loss;
    let model_json;

    match &data {
        TrainData::Flat(set) => {
            let hidden = parse_usize_list(&args.hidden, "--hidden")?;
            let mut dims = Vec::with_capacity(hidden.len() + 2);
            dims.push(set.input_dim());
            dims.extend_from_slice(&hidden);
            dims.push(set.label_dim());
            eprintln!(
                "pretraining a dense {dims:?} model for {} epochs on {} ({} rows)",
                args.epochs,
                set.name,
                set.len()
            );
            let net = init_mlp(&dims, Activation::ReLU, args.seed)?;
            let (trained, rep) = pretrain(&net, &set.inputs, &set.labels, &config)?;
            // Finish with the closed-form refit of the last layer, so the
            // written model is exactly least-squares optimal there.
            let self_alignment = align_nearest(set, set, &JointMetric::default())?;
            let (polished, _) =
                lva_one_layer(&trained, &self_alignment, set, set, ResidueVariant::LatentJacobian, 0.0, true)?;
            model_kind = "dense";
            dataset_name = set.name.clone();
            samples = set.len();
            history = rep.loss_history;
            final_loss = mse_loss(&polished.forward(&set.inputs)?, &set.labels)?;
            model_json = polished.to_json();
        }
        TrainData::Images(set) => {
            if args.batch_size.is_some() {
                return Err(Failure::Usage("convolutional training is full-batch; drop --batch-size".to_string()));
            }
            let kernels = parse_usize_list(&args.kernels, "--kernels")?;
            if kernels.is_empty() {
                return Err(Failure::Usage("--kernels needs at least one entry".to_string()));
            }
            let hidden_channels = parse_usize_list(&args.channels, "--channels")?;
            if hidden_channels.len() + 1 != kernels.len() {
                return Err(Failure::Usage(format!(
                    "--channels needs exactly {} entries for {} kernels",
                    kernels.len() - 1,
                    kernels.len()
                )));
            }
            let mut channels = Vec::with_capacity(kernels.len() + 1);
            channels.push(set.input_dims().2);
            channels.extend_from_slice(&hidden_channels);
            channels.push(set.label_dims().2);
            eprintln!(
                "pretraining a convolutional model ({} layers) for {} epochs on {} ({} images)",
                kernels.len(),
                args.epochs,
                set.name,
                set.len()
            );
            let net = init_cnn(&kernels, &channels, args.seed)?;
            let (trained, rep) = train_cnn(&net, set, &config)?;
            let polished = polish_cnn_last(&trained, set)?;
            model_kind = "conv";
            dataset_name = set.name.clone();
            samples = set.len();
            history = rep.loss_history;
            final_loss = image_loss(&polished, set)?;
            model_json = polished.to_json();
        }
    }

    if let Some(path) = &args.dump_data {
        let text = match &data {
            TrainData::Flat(set) => set.to_csv_string(),
            TrainData::Images(set) => image_csv_string(set)?,
        };
        write_file(path, &text)?;
    }

    let epsilon_trained = (samples as f64 * final_loss).sqrt();
    write_json_file(&args.out, model_json)?;
    let report_json = JsonObject::new()
        .string("model", &display(&args.out))
        .string("model_kind", model_kind)
        .string("dataset", &dataset_name)
        .int("samples", samples as u64)
        .int("epochs", args.epochs as u64)
        .raw("loss_history", &report::num_array(&history))
        .num("final_loss", final_loss)
        .num("epsilon_trained", epsilon_trained)
        .render();
    write_file(&sibling(&args.out, "report.json"), &report_json)?;

    let manifest = json!({
        "command": "pretrain",
        "gen": args.generator.map(Generator::label),
        "data": args.data.as_deref().map(display),
        "n": args.n,
        "num_images": args.num_images,
        "image_size": args.image_size,
        "sigma_source": args.sigma_source,
        "sigma_target": args.sigma_target,
        "hidden": args.hidden,
        "kernels": args.kernels,
        "channels": args.channels,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "optimizer": if args.sgd { "sgd" } else { "adam" },
        "seed": args.seed,
        "out": display(&args.out),
        "dump_data": args.dump_data.as_deref().map(display),
        "model_kind": model_kind,
    });
    write_manifest(&sibling(&args.out, "manifest.json"), &manifest)?;
    eprintln!("model written to {} (final loss {final_loss:.6e})", args.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

struct AdaptOutcome {
    model_json: String,
    target_loss: f64,
    runtime_ms: u64,
    budget: usize,
    extras: BTreeMap<String, f64>,
    theory: Option<TransferBoundReport>,
}

fn cmd_adapt(args: &AdaptArgs) -> Result<u8, Failure> {
    if args.no_bias && args.method != AdaptMethod::Lva1 {
        return Err(Failure::Usage("--no-bias applies to --method lva1 only".to_string()));
    }
    if args.variant.is_some() && args.method != AdaptMethod::Lva1 {
        return Err(Failure::Usage("--variant applies to --method lva1 only".to_string()));
    }
    if args.method == AdaptMethod::Gd {
        check_learning_rate(args.lr)?;
        check_batch_size(args.batch_size)?;
    }
    let variant = match args.variant.unwrap_or(VariantKind::Latent) {
        VariantKind::Latent => ResidueVariant::LatentJacobian,
        VariantKind::Input => ResidueVariant::InputJacobian,
    };

    let model = load_model(&args.model)?;
    let source = load_dataset(&args.source)?;
    let target = load_dataset(&args.target)?;

    let outcome = match model {
        ModelFile::Dense(net) => {
            adapt_dense(args, &net, &source.flat, &target.flat, variant)?
        }
        ModelFile::Conv(net) => adapt_conv(args, &net, &source, &target)?,
    };

    write_json_file(&args.out, outcome.model_json)?;
    let result_json = report::result_json(
        args.method.label(),
        outcome.budget,
        outcome.target_loss,
        outcome.runtime_ms,
        args.seed,
        &outcome.extras,
    );
    write_file(&sibling(&args.out, "result.json"), &result_json)?;
    match &outcome.theory {
        Some(theory) => {
            write_file(&sibling(&args.out, "theory.json"), &report::transfer_report_json(theory))?;
            if !theory.holds {
                eprintln!(
                    "warning: transfer bound violated (lhs {:.6e} > rhs {:.6e})",
                    theory.observed_loss, theory.rhs_bound
                );
            }
        }
        None => eprintln!("note: theory report skipped; the bound checkers apply to dense models"),
    }

    let manifest = json!({
        "command": "adapt",
        "model": display(&args.model),
        "source": display(&args.source),
        "target": display(&args.target),
        "method": args.method.label(),
        "alignment": args.alignment.label(),
        "variant": if args.method == AdaptMethod::Lva1 {
            Some(args.variant.unwrap_or(VariantKind::Latent).label())
        } else {
            None
        },
        "ridge": args.ridge,
        "bias_column": !args.no_bias,
        "sweeps": args.sweeps,
        "layers": args.layers,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "optimizer": if args.sgd { "sgd" } else { "adam" },
        "seed": args.seed,
        "sinkhorn_reg": args.sinkhorn_reg,
        "sinkhorn_max_iter": args.sinkhorn_max_iter,
        "sinkhorn_tol": args.sinkhorn_tol,
        "out": display(&args.out),
    });
    write_manifest(&sibling(&args.out, "manifest.json"), &manifest)?;
    eprintln!(
        "adapted model written to {} (target loss {:.6e})",
        args.out.display(),
        outcome.target_loss
    );
    Ok(0)
}

fn adapt_dense(
    args: &AdaptArgs,
    net: &Mlp,
    source: &PairedDataset,
    target: &PairedDataset,
    variant: ResidueVariant,
) -> Result<AdaptOutcome, Failure> {
    match args.method {
        AdaptMethod::LvaConv => Err(Failure::Data(format!(
            "{}: dense model; --method lva-conv needs a convolutional model (use lva1 or lva2)",
            args.model.display()
        ))),
        AdaptMethod::Gd => {
            if args.layers == 0 || args.layers > net.n_layers() {
                return Err(Failure::Usage(format!("--layers must be in 1..={}", net.n_layers())));
            }
            let config = train_config(args.sgd, args.lr, args.epochs, args.batch_size, args.seed);
            eprintln!("finetuning the last {} layer(s) for {} epochs", args.layers, args.epochs);
            let start = Instant::now();
            let (adapted, rep) =
                finetune_gd(net, &target.inputs, &target.labels, &config, net.n_layers() - args.layers)?;
            let runtime_ms = ms_since(start);
            let (alignment, diag) = build_alignment(
                args.alignment,
                source,
                target,
                args.sinkhorn_reg,
                args.sinkhorn_max_iter,
                args.sinkhorn_tol,
            )?;
            let mut extras = BTreeMap::new();
            extras.insert("epsilon_trained".to_string(), rep.epsilon_trained);
            add_sinkhorn_metrics(&mut extras, &diag);
            let theory = verify_transfer_bound(net, &adapted, args.layers, &alignment, source, target)?;
            Ok(AdaptOutcome {
                model_json: adapted.to_json(),
                target_loss: rep.final_loss,
                runtime_ms,
                budget: args.layers,
                extras,
                theory: Some(theory),
            })
        }
        AdaptMethod::Lva1 => {
            let (alignment, diag) = build_alignment(
                args.alignment,
                source,
                target,
                args.sinkhorn_reg,
                args.sinkhorn_max_iter,
                args.sinkhorn_tol,
            )?;
            let start = Instant::now();
            let (adapted, delta) = lva_one_layer(net, &alignment, source, target, variant, args.ridge, !args.no_bias)?;
            let runtime_ms = ms_since(start);
            let target_loss = mse_loss(&adapted.forward(&target.inputs)?, &target.labels)?;
            let mut extras = BTreeMap::new();
            extras.insert("delta_weight_norm".to_string(), frobenius(&delta.d_weight));
            extras.insert("delta_bias_norm".to_string(), l2(&delta.d_bias));
            extras.insert("bias_column".to_string(), if args.no_bias { 0.0 } else { 1.0 });
            extras.insert("ridge".to_string(), args.ridge);
            add_sinkhorn_metrics(&mut extras, &diag);
            let theory = verify_transfer_bound(net, &adapted, 1, &alignment, source, target)?;
            Ok(AdaptOutcome {
                model_json: adapted.to_json(),
                target_loss,
                runtime_ms,
                budget: 1,
                extras,
                theory: Some(theory),
            })
        }
        AdaptMethod::Lva2 => {
            let (alignment, diag) = build_alignment(
                args.alignment,
                source,
                target,
                args.sinkhorn_reg,
                args.sinkhorn_max_iter,
                args.sinkhorn_tol,
            )?;
            let start = Instant::now();
            let result = lva_two_layer(net, &alignment, source, target, args.sweeps, args.ridge)?;
            let runtime_ms = ms_since(start);
            let target_loss = mse_loss(&result.net.forward(&target.inputs)?, &target.labels)?;
            let mut extras = BTreeMap::new();
            extras.insert("fold_scale".to_string(), result.fold_scale);
            extras.insert("sweeps".to_string(), args.sweeps as f64);
            extras.insert("ridge".to_string(), args.ridge);
            extras.insert("bias_column".to_string(), 1.0);
            add_sinkhorn_metrics(&mut extras, &diag);
            let theory = verify_transfer_bound(net, &result.net, 2, &alignment, source, target)?;
            Ok(AdaptOutcome {
                model_json: result.net.to_json(),
                target_loss,
                runtime_ms,
                budget: 2,
                extras,
                theory: Some(theory),
            })
        }
    }
}

fn adapt_conv(
    args: &AdaptArgs,
    net: &Cnn,
    source: &LoadedDataset,
    target: &LoadedDataset,
) -> Result<AdaptOutcome, Failure> {
    match args.method {
        AdaptMethod::Lva1 | AdaptMethod::Lva2 => Err(Failure::Data(format!(
            "{}: convolutional model; use --method lva-conv or gd",
            args.model.display()
        ))),
        AdaptMethod::Gd => {
            if args.layers != 1 {
                return Err(Failure::Usage("convolutional gradient finetuning supports --layers 1 only".to_string()));
            }
            if args.batch_size.is_some() {
                return Err(Failure::Usage("convolutional training is full-batch; drop --batch-size".to_string()));
            }
            let target_images = image_dataset(target, "--target")?;
            let config = train_config(args.sgd, args.lr, args.epochs, args.batch_size, args.seed);
            eprintln!("finetuning the last kernel for {} epochs", args.epochs);
            let start = Instant::now();
            let (adapted, rep) = finetune_cnn_last(net, &target_images, &config)?;
            let runtime_ms = ms_since(start);
            let mut extras = BTreeMap::new();
            extras.insert("epsilon_trained".to_string(), rep.epsilon_trained);
            Ok(AdaptOutcome {
                model_json: adapted.to_json(),
                target_loss: rep.final_loss,
                runtime_ms,
                budget: 1,
                extras,
                theory: None,
            })
        }
        AdaptMethod::LvaConv => {
            let source_images = image_dataset(source, "--source")?;
            let target_images = image_dataset(target, "--target")?;
            let (alignment, diag) = build_alignment(
                args.alignment,
                &source.flat,
                &target.flat,
                args.sinkhorn_reg,
                args.sinkhorn_max_iter,
                args.sinkhorn_tol,
            )?;
            let start = Instant::now();
            let kernel = lva_conv_last_layer(net, &alignment, &source_images, &target_images, args.ridge)?;
            let mut layers = net.layers.clone();
            let last = layers.last_mut().expect("validated networks have layers");
            let delta = kernel_delta_norm(&last.kernel, &kernel);
            last.kernel = kernel;
            let adapted = Cnn::new(layers)?;
            let runtime_ms = ms_since(start);
            let target_loss = image_loss(&adapted, &target_images)?;
            let mut extras = BTreeMap::new();
            extras.insert("delta_kernel_norm".to_string(), delta);
            extras.insert("ridge".to_string(), args.ridge);
            extras.insert("bias_column".to_string(), 1.0);
            add_sinkhorn_metrics(&mut extras, &diag);
            Ok(AdaptOutcome {
                model_json: adapted.to_json(),
                target_loss,
                runtime_ms,
                budget: 1,
                extras,
                theory: None,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(args: &VerifyArgs) -> Result<u8, Failure> {
    let pretrained = dense_model(&args.pretrained, "bound verification")?;
    let adapted = dense_model(&args.adapted, "bound verification")?;
    let source = load_dataset(&args.source)?.flat;
    let target = load_dataset(&args.target)?.flat;
    let (alignment, _diag) = build_alignment(
        args.alignment,
        &source,
        &target,
        args.sinkhorn_reg,
        args.sinkhorn_max_iter,
        args.sinkhorn_tol,
    )?;
    let transfer = verify_transfer_bound(&pretrained, &adapted, args.layers, &alignment, &source, &target)?;
    let generalization = match &args.test {
        Some(path) => Some(verify_generalization_bound(&adapted, &target, &load_dataset(path)?.flat)?),
        None => None,
    };

    let json = match &generalization {
        None => report::transfer_report_json(&transfer),
        Some(gen) => report::transfer_report_object(&transfer)
            .raw("generalization", &report::generalization_report_json(gen))
            .render(),
    };
    if args.json {
        print!("{json}");
    } else {
        print_transfer_summary(&transfer);
        if let Some(gen) = &generalization {
            print_generalization_summary(gen);
        }
    }
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }

    let manifest = json!({
        "command": "verify",
        "pretrained": display(&args.pretrained),
        "adapted": display(&args.adapted),
        "source": display(&args.source),
        "target": display(&args.target),
        "layers": args.layers,
        "test": args.test.as_deref().map(display),
        "alignment": args.alignment.label(),
        "sinkhorn_reg": args.sinkhorn_reg,
        "sinkhorn_max_iter": args.sinkhorn_max_iter,
        "sinkhorn_tol": args.sinkhorn_tol,
        "json": args.json,
        "out": args.out.as_deref().map(display),
    });
    let manifest_path = match &args.out {
        Some(out) => sibling(out, "manifest.json"),
        None => PathBuf::from("lva-verify.manifest.json"),
    };
    write_manifest(&manifest_path, &manifest)?;

    let ok = transfer.holds && generalization.as_ref().map_or(true, |g| g.holds);
    if !transfer.holds {
        eprintln!(
            "transfer bound violated: lhs {:.6e} > rhs {:.6e}",
            transfer.observed_loss, transfer.rhs_bound
        );
    }
    if let Some(gen) = &generalization {
        if !gen.holds {
            eprintln!("generalization bound violated: lhs {:.6e} > rhs {:.6e}", gen.test_loss, gen.rhs_bound);
        }
    }
    Ok(if ok { 0 } else { 1 })
}

fn print_transfer_summary(r: &TransferBoundReport) {
    println!("transfer bound: {}", if r.holds { "holds" } else { "VIOLATED" });
    println!("  lhs (adapted target loss)  {:.6e}", r.observed_loss);
    println!("  rhs (bound)                {:.6e}", r.rhs_bound);
    println!("  epsilon_pretrained         {:.6e}", r.epsilon_pretrained);
    println!("  epsilon_data               {:.6e}", r.epsilon_data);
    println!("  C_F                        {:.6e}", r.c_suffix);
    println!("  C_Fprefix                  {:.6e}", r.c_prefix);
    println!("  C_deltaF                   {:.6e}", r.c_delta);
    println!("  C_xtilde                   {:.6e}", r.c_xtilde);
    println!("  v1_bound                   {:.6e}", r.v1_bound);
    println!("  C_deltaF <= epsilon_data   {}", r.cdelta_leq_edata);
}

fn print_generalization_summary(r: &GeneralizationBoundReport) {
    println!("generalization bound: {}", if r.holds { "holds" } else { "VIOLATED" });
    println!("  lhs (held-out loss)        {:.6e}", r.test_loss);
    println!("  rhs (bound)                {:.6e}", r.rhs_bound);
    println!("  epsilon_test               {:.6e}", r.epsilon_test);
    println!("  C_g                        {:.6e}", r.c_g);
    println!("  adapt_loss                 {:.6e}", r.adapt_loss);
    println!("  n_adapt / n_test           {} / {}", r.n_adapt, r.n_test);
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn find_row<'a>(rows: &'a [BenchResult], method: BenchMethod, budget: usize) -> Option<&'a BenchResult> {
    rows.iter().find(|r| r.method == method && r.budget == budget)
}

fn cmd_bench_1d(args: &Bench1dArgs) -> Result<u8, Failure> {
    check_learning_rate(args.lr)?;
    let config = Benchmark1dConfig {
        n: args.n,
        pretrain_epochs: args.pretrain_epochs,
        gd_epochs: args.gd_epochs,
        learning_rate: args.lr,
        ridge: args.ridge,
        two_layer_sweeps: args.sweeps,
        include_gd_two_layer: !args.no_gd_two_layer,
        include_sinkhorn: !args.no_sinkhorn,
        sinkhorn_max_iter: args.sinkhorn_max_iter,
        sinkhorn_tol: args.sinkhorn_tol,
        seed: args.seed,
    };
    eprintln!(
        "running the 1-d signal benchmark (seed {}, n {}, pretrain {} epochs, gd {} epochs)",
        args.seed, args.n, args.pretrain_epochs, args.gd_epochs
    );
    let bench = run_benchmark_1d_with(&config)?;

    write_file(&args.out, &report::bench_csv(&bench.results))?;
    write_file(&sibling(&args.out, "transfer.json"), &report::transfer_report_json(&bench.transfer))?;
    write_file(
        &sibling(&args.out, "generalization.json"),
        &report::generalization_report_json(&bench.generalization),
    )?;
    let manifest = json!({
        "command": "bench 1d",
        "seed": args.seed,
        "out": display(&args.out),
        "n": args.n,
        "pretrain_epochs": args.pretrain_epochs,
        "gd_epochs": args.gd_epochs,
        "lr": args.lr,
        "ridge": args.ridge,
        "sweeps": args.sweeps,
        "gd_two_layer": !args.no_gd_two_layer,
        "sinkhorn": !args.no_sinkhorn,
        "sinkhorn_max_iter": args.sinkhorn_max_iter,
        "sinkhorn_tol": args.sinkhorn_tol,
    });
    write_manifest(&sibling(&args.out, "manifest.json"), &manifest)?;

    println!("{:<11} {:>6}  {:<13} {:>10}", "method", "budget", "loss", "runtime_ms");
    for row in &bench.results {
        println!("{:<11} {:>6}  {:<13.6e} {:>10}", row.method.label(), row.budget, row.target_loss, row.runtime_ms);
    }
    println!(
        "transfer bound: {} (lhs {:.6e}, rhs {:.6e})",
        if bench.transfer.holds { "holds" } else { "VIOLATED" },
        bench.transfer.observed_loss,
        bench.transfer.rhs_bound
    );
    println!(
        "generalization bound: {} (lhs {:.6e}, rhs {:.6e})",
        if bench.generalization.holds { "holds" } else { "VIOLATED" },
        bench.generalization.test_loss,
        bench.generalization.rhs_bound
    );

    let mut violations = Vec::new();
    let gd1 = find_row(&bench.results, BenchMethod::Gd, 1);
    let lva1 = find_row(&bench.results, BenchMethod::Lva1, 1);
    let lva2 = find_row(&bench.results, BenchMethod::Lva2, 2);
    if let (Some(gd), Some(l1)) = (gd1, lva1) {
        if l1.target_loss > gd.target_loss + 1e-9 {
            violations.push(format!(
                "lva1 loss {:.6e} exceeds gd loss {:.6e}",
                l1.target_loss, gd.target_loss
            ));
        }
    }
    if let (Some(l1), Some(l2)) = (lva1, lva2) {
        if l2.target_loss > l1.target_loss + 1e-9 {
            violations.push(format!(
                "lva2 loss {:.6e} exceeds lva1 loss {:.6e}",
                l2.target_loss, l1.target_loss
            ));
        }
    }
    if !bench.transfer.holds {
        violations.push("transfer bound violated".to_string());
    }
    if !bench.generalization.holds {
        violations.push("generalization bound violated".to_string());
    }
    for v in &violations {
        eprintln!("assertion failed: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 1 })
}

fn cmd_bench_deblur(args: &DeblurArgs) -> Result<u8, Failure> {
    check_learning_rate(args.lr)?;
    let budgets = parse_usize_list(&args.budgets, "--budgets")?;
    if budgets.is_empty() {
        return Err(Failure::Usage("--budgets needs at least one entry".to_string()));
    }
    let config = DeblurConfig {
        spec: BlurSpec {
            image_size: args.image_size,
            num_images: args.num_images,
            blur_sigma_source: args.sigma_source,
            blur_sigma_target: args.sigma_target,
            seed: args.seed,
        },
        budgets: budgets.clone(),
        test_images: args.test_images,
        pretrain_epochs: args.pretrain_epochs,
        gd_epochs: args.gd_epochs,
        learning_rate: args.lr,
        ridge: args.ridge,
    };
    eprintln!(
        "running the deblurring benchmark (seed {}, {} images of {}x{}, budgets {:?})",
        args.seed, args.num_images, args.image_size, args.image_size, budgets
    );
    let bench = run_benchmark_deblur_with(&config)?;

    write_file(&args.out, &report::bench_csv(&bench.results))?;
    let mut summary = JsonObject::new()
        .num("pretrained_source_loss", bench.pretrained_source_loss)
        .num("pretrained_target_loss", bench.pretrained_target_loss)
        .num("pretrained_target_psnr", bench.pretrained_target_psnr);
    for (budget, norm) in &bench.delta_kernel_norms {
        summary = summary.num(&format!("delta_kernel_norm_{budget}"), *norm);
    }
    write_file(&sibling(&args.out, "summary.json"), &summary.render())?;
    let manifest = json!({
        "command": "bench deblur",
        "seed": args.seed,
        "out": display(&args.out),
        "budgets": args.budgets,
        "image_size": args.image_size,
        "num_images": args.num_images,
        "sigma_source": args.sigma_source,
        "sigma_target": args.sigma_target,
        "test_images": args.test_images,
        "pretrain_epochs": args.pretrain_epochs,
        "gd_epochs": args.gd_epochs,
        "lr": args.lr,
        "ridge": args.ridge,
    });
    write_manifest(&sibling(&args.out, "manifest.json"), &manifest)?;

    println!("{:<7} {:>6}  {:<13} {:<13} {:>10}", "method", "budget", "loss", "psnr", "runtime_ms");
    for row in &bench.results {
        let psnr = row.psnr().map(|v| format!("{v:.6e}")).unwrap_or_default();
        println!(
            "{:<7} {:>6}  {:<13.6e} {:<13} {:>10}",
            row.method.label(),
            row.budget,
            row.target_loss,
            psnr,
            row.runtime_ms
        );
    }
    println!(
        "pretrained: source loss {:.6e}, target loss {:.6e}, target psnr {:.6e}",
        bench.pretrained_source_loss, bench.pretrained_target_loss, bench.pretrained_target_psnr
    );

    let mut violations = Vec::new();
    for &budget in &budgets {
        let gd = find_row(&bench.results, BenchMethod::Gd, budget);
        let lva = find_row(&bench.results, BenchMethod::Lva1, budget);
        if let (Some(gd), Some(lva)) = (gd, lva) {
            if lva.target_loss > gd.target_loss + 1e-9 {
                violations.push(format!(
                    "budget {budget}: lva loss {:.6e} exceeds gd loss {:.6e}",
                    lva.target_loss, gd.target_loss
                ));
            }
        }
    }
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    if let (Some(gd), Some(lva)) = (
        find_row(&bench.results, BenchMethod::Gd, max_budget),
        find_row(&bench.results, BenchMethod::Lva1, max_budget),
    ) {
        if let (Some(gd_psnr), Some(lva_psnr)) = (gd.psnr(), lva.psnr()) {
            if lva_psnr < gd_psnr - 1e-9 {
                violations.push(format!(
                    "budget {max_budget}: lva psnr {lva_psnr:.6e} below gd psnr {gd_psnr:.6e}"
                ));
            }
        }
    }
    if bench.pretrained_target_loss <= bench.pretrained_source_loss {
        violations.push(format!(
            "pretrained model does not degrade on the target domain (source {:.6e}, target {:.6e})",
            bench.pretrained_source_loss, bench.pretrained_target_loss
        ));
    }
    for v in &violations {
        eprintln!("assertion failed: {v}");
    }
    Ok(if violations.is_empty() { 0 } else { 1 })
}
