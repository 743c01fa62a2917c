//! Pairing target samples with source samples.
//!
//! A target sample is matched to a source sample either by nearest neighbor
//! in the joint (input, label) space or through an entropic
//! optimal-transport coupling that is then hardened row-wise. The matching,
//! the per-pair deltas, and the worst pair distance (the data deviation)
//! feed the adaptation and the error bounds.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use std::fmt::Write as _;
use std::path::Path;

/// A dataset of `(input, label)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub inputs: Matrix,
    pub labels: Matrix,
    pub name: String,
}

impl PairedDataset {
    pub fn new(inputs: Matrix, labels: Matrix, name: impl Into<String>) -> Result<PairedDataset> {
        if inputs.rows() != labels.rows() {
            return Err(Error::shape(
                "PairedDataset::new",
                format!("{} input rows vs {} label rows", inputs.rows(), labels.rows()),
            ));
        }
        if inputs.rows() == 0 {
            return Err(Error::data("PairedDataset::new", "dataset is empty"));
        }
        if !inputs.all_finite() || !labels.all_finite() {
            return Err(Error::data("PairedDataset::new", "non-finite entries"));
        }
        Ok(PairedDataset { inputs, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty datasets
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn label_dim(&self) -> usize {
        self.labels.cols()
    }

    /// Reads `x0,...,x{k},y0,...,y{m}` CSV. The column split between inputs
    /// and labels comes from the header prefixes.
    pub fn read_csv(path: &Path) -> Result<PairedDataset> {
        let text = std::fs::read_to_string(path)?;
        let source_name = path.display().to_string();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Self::parse_csv(&text, &source_name, name)
    }

    /// Parses the `x0,..,y0,..` header-and-rows format. Lines starting with
    /// `#` are comments and are skipped wherever they appear; the CLI records
    /// image dimensions in such a comment.
    pub fn parse_csv(text: &str, source_name: &str, name: impl Into<String>) -> Result<PairedDataset> {
        let parse_err = |details: String| Error::Parse { source_name: source_name.to_string(), details };
        let mut lines =
            text.lines().enumerate().filter(|(_, line)| !line.trim_start().starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err("empty file".to_string()))?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        let dx = columns.iter().take_while(|c| c.starts_with('x')).count();
        let dy = columns.len() - dx;
        if dx == 0 || dy == 0 {
            return Err(parse_err(format!(
                "header must list x columns then y columns, got `{header}`"
            )));
        }
        for (k, c) in columns.iter().enumerate() {
            let expect = if k < dx { format!("x{k}") } else { format!("y{}", k - dx) };
            if **c != expect {
                return Err(parse_err(format!("header column {k} is `{c}`, expected `{expect}`")));
            }
        }
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dx + dy {
                return Err(parse_err(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 1,
                    dx + dy,
                    fields.len()
                )));
            }
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f.trim().parse().map_err(|_| {
                    parse_err(format!("line {}: `{}` is not a number", lineno + 1, f.trim()))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(format!("line {}: non-finite value", lineno + 1)));
                }
                if k < dx {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(parse_err("no data rows".to_string()));
        }
        PairedDataset::new(Matrix::from_vec(n, dx, xs)?, Matrix::from_vec(n, dy, ys)?, name)
    }

    pub fn to_csv_string(&self) -> String {
        let (dx, dy) = (self.input_dim(), self.label_dim());
        let mut out = String::new();
        for k in 0..dx {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "x{k}");
        }
        for k in 0..dy {
            let _ = write!(out, ",y{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            for (k, v) in self.inputs.row(i).iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:.16e}");
            }
            for v in self.labels.row(i) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Distance on the concatenation `(x, label_weight * y)`.
#[derive(Clone, Copy, Debug)]
pub struct JointMetric {
    pub label_weight: f64,
}

impl Default for JointMetric {
    fn default() -> JointMetric {
        JointMetric { label_weight: 1.0 }
    }
}

impl JointMetric {
    pub fn distance(&self, xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64]) -> f64 {
        self.squared_distance(xa, ya, xb, yb).sqrt()
    }

    pub fn squared_distance(&self, xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&a, &b) in xa.iter().zip(xb) {
            let d = a - b;
            acc = d.mul_add(d, acc);
        }
        let w2 = self.label_weight * self.label_weight;
        let mut lacc = 0.0;
        for (&a, &b) in ya.iter().zip(yb) {
            let d = a - b;
            lacc = d.mul_add(d, lacc);
        }
        w2.mul_add(lacc, acc)
    }
}

/// A per-target-sample match into the source dataset, with the aligned
/// differences precomputed (`delta_x[i] = x̃_i − x_{j_i}` and likewise for
/// labels) so downstream code never re-indexes.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// `source_index[i]` is the source row matched to target row `i`. Several
    /// targets may share one source row.
    pub source_index: Vec<usize>,
    /// Joint-space distance of each matched pair.
    pub pair_distances: Vec<f64>,
    /// Largest pair distance: the data deviation between the datasets.
    pub epsilon_data: f64,
    pub delta_x: Matrix,
    pub delta_y: Matrix,
}

/// Builds the full [`Alignment`] from a chosen index map.
fn alignment_from_indices(
    source: &PairedDataset,
    target: &PairedDataset,
    metric: &JointMetric,
    source_index: Vec<usize>,
) -> Alignment {
    let nt = target.len();
    let mut pair_distances = Vec::with_capacity(nt);
    let mut dx = Matrix::zeros(nt, target.input_dim());
    let mut dy = Matrix::zeros(nt, target.label_dim());
    for i in 0..nt {
        let j = source_index[i];
        let (xt, yt) = (target.inputs.row(i), target.labels.row(i));
        let (xs, ys) = (source.inputs.row(j), source.labels.row(j));
        pair_distances.push(metric.distance(xt, yt, xs, ys));
        for (slot, (&t, &s)) in dx.row_mut(i).iter_mut().zip(xt.iter().zip(xs)) {
            *slot = t - s;
        }
        for (slot, (&t, &s)) in dy.row_mut(i).iter_mut().zip(yt.iter().zip(ys)) {
            *slot = t - s;
        }
    }
    let epsilon_data = pair_distances.iter().fold(0.0f64, |a, &b| a.max(b));
    Alignment { source_index, pair_distances, epsilon_data, delta_x: dx, delta_y: dy }
}

fn check_dims(source: &PairedDataset, target: &PairedDataset) -> Result<()> {
    if source.input_dim() != target.input_dim() || source.label_dim() != target.label_dim() {
        return Err(Error::shape(
            "align",
            format!(
                "source is ({}, {})-dimensional, target ({}, {})",
                source.input_dim(),
                source.label_dim(),
                target.input_dim(),
                target.label_dim()
            ),
        ));
    }
    Ok(())
}

/// Matches each target sample to its closest source sample in the joint
/// space; ties go to the smallest source index.
pub fn align_nearest(source: &PairedDataset, target: &PairedDataset, metric: &JointMetric) -> Result<Alignment> {
    check_dims(source, target)?;
    let mut indices = Vec::with_capacity(target.len());
    for i in 0..target.len() {
        let (xt, yt) = (target.inputs.row(i), target.labels.row(i));
        let mut best = (0usize, f64::INFINITY);
        for j in 0..source.len() {
            let d = metric.squared_distance(xt, yt, source.inputs.row(j), source.labels.row(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        indices.push(best.0);
    }
    Ok(alignment_from_indices(source, target, metric, indices))
}

/// The worst matched-pair distance.
pub fn data_deviation(alignment: &Alignment) -> f64 {
    alignment.epsilon_data
}

/// Outcome of the entropic-OT alignment.
#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub alignment: Alignment,
    /// Whether the marginal error fell below `tol` within `max_iter`
    /// iterations. On `false` the alignment is hardened from the iterate
    /// with the smallest marginal error seen.
    pub converged: bool,
    pub iterations: usize,
    /// L1 error of the target-side marginal at the reported iterate.
    pub marginal_error: f64,
}

/// Entropic optimal transport between the datasets under the squared joint
/// distance with uniform marginals, hardened to a per-target-row argmax.
///
/// Runs in log-domain so small `reg` values do not underflow.
pub fn align_sinkhorn(
    source: &PairedDataset,
    target: &PairedDataset,
    metric: &JointMetric,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let (f, g, cost, converged, iterations, marginal_error) =
        sinkhorn_potentials(source, target, metric, reg, max_iter, tol)?;
    // argmax_j P[i][j] = argmax_j (g[j] - C[i][j]); f and reg only rescale
    // within a row.
    let _ = f;
    let nt = target.len();
    let ns = source.len();
    let mut indices = Vec::with_capacity(nt);
    for i in 0..nt {
        let row = cost.row(i);
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..ns {
            let score = g[j] - row[j];
            if score > best.1 {
                best = (j, score);
            }
        }
        indices.push(best.0);
    }
    Ok(SinkhornResult {
        alignment: alignment_from_indices(source, target, metric, indices),
        converged,
        iterations,
        marginal_error,
    })
}

/// Dense coupling matrix (target rows x source columns) for diagnostics and
/// tests; entries sum to 1.
pub fn sinkhorn_coupling(
    source: &PairedDataset,
    target: &PairedDataset,
    metric: &JointMetric,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Matrix> {
    let (f, g, cost, ..) = sinkhorn_potentials(source, target, metric, reg, max_iter, tol)?;
    let mut p = Matrix::zeros(target.len(), source.len());
    for i in 0..target.len() {
        let crow = cost.row(i);
        let fi = f[i];
        for (j, slot) in p.row_mut(i).iter_mut().enumerate() {
            *slot = ((fi + g[j] - crow[j]) / reg).exp();
        }
    }
    Ok(p)
}

type Potentials = (Vec<f64>, Vec<f64>, Matrix, bool, usize, f64);

fn sinkhorn_potentials(
    source: &PairedDataset,
    target: &PairedDataset,
    metric: &JointMetric,
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Potentials> {
    check_dims(source, target)?;
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::argument("align_sinkhorn", format!("reg {reg} must be positive")));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::argument("align_sinkhorn", "tol must be positive and max_iter nonzero"));
    }
    let nt = target.len();
    let ns = source.len();
    let cost = Matrix::from_fn(nt, ns, |i, j| {
        metric.squared_distance(
            target.inputs.row(i),
            target.labels.row(i),
            source.inputs.row(j),
            source.labels.row(j),
        )
    });
    let log_a = -(nt as f64).ln(); // target marginal 1/nt
    let log_b = -(ns as f64).ln();
    let mut f = vec![0.0f64; nt];
    let mut g = vec![0.0f64; ns];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;

    let mut col_max = vec![0.0f64; ns];
    let mut col_sum = vec![0.0f64; ns];

    for it in 0..max_iter {
        iterations = it + 1;
        // Row update. The row sum of the current coupling is
        // a_i * exp((f_i - f_i_new)/reg), so the marginal error of the
        // incoming iterate falls out of the same pass.
        let mut err = 0.0;
        for i in 0..nt {
            let crow = cost.row(i);
            let mut m = f64::NEG_INFINITY;
            for j in 0..ns {
                m = m.max(g[j] - crow[j]);
            }
            let mut s = 0.0;
            for j in 0..ns {
                s += ((g[j] - crow[j] - m) / reg).exp();
            }
            let lse = m / reg + s.ln();
            let f_new = reg * (log_a - lse);
            err += (nt as f64).recip() * (((f[i] - f_new) / reg).exp() - 1.0).abs();
            f[i] = f_new;
        }
        marginal_error = err;
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, f.clone(), g.clone()));
        }
        if err < tol && it > 0 {
            converged = true;
            break;
        }
        // Column update, two row-major passes: column maxima, then sums.
        col_max.fill(f64::NEG_INFINITY);
        for i in 0..nt {
            let crow = cost.row(i);
            let fi = f[i];
            for (j, cm) in col_max.iter_mut().enumerate() {
                *cm = cm.max(fi - crow[j]);
            }
        }
        col_sum.fill(0.0);
        for i in 0..nt {
            let crow = cost.row(i);
            let fi = f[i];
            for (j, cs) in col_sum.iter_mut().enumerate() {
                *cs += ((fi - crow[j] - col_max[j]) / reg).exp();
            }
        }
        for j in 0..ns {
            let lse = col_max[j] / reg + col_sum[j].ln();
            g[j] = reg * (log_b - lse);
        }
    }
    if !converged {
        if let Some((e, bf, bg)) = best {
            marginal_error = e;
            f = bf;
            g = bg;
        }
    }
    Ok((f, g, cost, converged, iterations, marginal_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform, Stream};

    fn random_dataset(seed: u64, n: usize, dx: usize, dy: usize) -> PairedDataset {
        let mut c = 0u64;
        let inputs = Matrix::from_fn(n, dx, |_, _| {
            c += 1;
            uniform(seed, Stream::Trial, c) * 4.0 - 2.0
        });
        let labels = Matrix::from_fn(n, dy, |_, _| {
            c += 1;
            uniform(seed, Stream::Trial, c) * 4.0 - 2.0
        });
        PairedDataset::new(inputs, labels, "random").unwrap()
    }

    #[test]
    fn identical_datasets_align_to_identity() {
        let d = random_dataset(1, 20, 3, 2);
        let a = align_nearest(&d, &d, &JointMetric::default()).unwrap();
        assert_eq!(a.source_index, (0..20).collect::<Vec<_>>());
        assert_eq!(a.epsilon_data, 0.0);
        assert!(a.delta_x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_geometry_two_points() {
        let source = PairedDataset::new(
            Matrix::from_rows(vec![vec![0.0], vec![10.0]]).unwrap(),
            Matrix::from_rows(vec![vec![0.0], vec![0.0]]).unwrap(),
            "s",
        )
        .unwrap();
        let target = PairedDataset::new(
            Matrix::from_rows(vec![vec![1.0]]).unwrap(),
            Matrix::from_rows(vec![vec![0.0]]).unwrap(),
            "t",
        )
        .unwrap();
        let a = align_nearest(&source, &target, &JointMetric::default()).unwrap();
        assert_eq!(a.source_index, vec![0]);
        assert!((a.pair_distances[0] - 1.0).abs() < 1e-15);
        assert!((data_deviation(&a) - 1.0).abs() < 1e-15);
        assert_eq!(a.delta_x.get(0, 0), 1.0);
    }

    /// Independent double-loop reimplementation with its own distance code.
    fn brute_force(source: &PairedDataset, target: &PairedDataset, lw: f64) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::new();
        let mut dist = Vec::new();
        for i in 0..target.len() {
            let mut bj = 0;
            let mut bd = f64::INFINITY;
            for j in 0..source.len() {
                let mut d2 = 0.0;
                for (a, b) in target.inputs.row(i).iter().zip(source.inputs.row(j)) {
                    d2 += (a - b) * (a - b);
                }
                for (a, b) in target.labels.row(i).iter().zip(source.labels.row(j)) {
                    d2 += lw * lw * (a - b) * (a - b);
                }
                let d = d2.sqrt();
                if d < bd {
                    bd = d;
                    bj = j;
                }
            }
            idx.push(bj);
            dist.push(bd);
        }
        (idx, dist)
    }

    #[test]
    fn nearest_matches_brute_force() {
        let source = random_dataset(7, 50, 2, 1);
        let target = random_dataset(8, 30, 2, 1);
        for lw in [1.0, 0.5] {
            let metric = JointMetric { label_weight: lw };
            let a = align_nearest(&source, &target, &metric).unwrap();
            let (idx, dist) = brute_force(&source, &target, lw);
            assert_eq!(a.source_index, idx);
            for (x, y) in a.pair_distances.iter().zip(&dist) {
                assert!((x - y).abs() < 1e-14);
            }
            let eps = dist.iter().fold(0.0f64, |m, &d| m.max(d));
            assert!((a.epsilon_data - eps).abs() < 1e-14);
            // Optimality against every alternative pairing.
            for i in 0..target.len() {
                for j in 0..source.len() {
                    let d = metric.distance(
                        target.inputs.row(i),
                        target.labels.row(i),
                        source.inputs.row(j),
                        source.labels.row(j),
                    );
                    assert!(a.pair_distances[i] <= d + 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_deviation_exactly_when_targets_coincide() {
        let source = random_dataset(3, 10, 2, 2);
        // Targets drawn from source rows: deviation 0.
        let rows = [4usize, 1, 7];
        let t_in = Matrix::from_fn(3, 2, |i, j| source.inputs.get(rows[i], j));
        let t_lab = Matrix::from_fn(3, 2, |i, j| source.labels.get(rows[i], j));
        let coincide = PairedDataset::new(t_in, t_lab, "t").unwrap();
        let a = align_nearest(&source, &coincide, &JointMetric::default()).unwrap();
        assert_eq!(a.epsilon_data, 0.0);
        // Any displaced target makes it strictly positive.
        let mut t_in2 = coincide.inputs.clone();
        t_in2.set(1, 0, t_in2.get(1, 0) + 1e-3);
        let displaced = PairedDataset::new(t_in2, coincide.labels.clone(), "t2").unwrap();
        let a2 = align_nearest(&source, &displaced, &JointMetric::default()).unwrap();
        assert!(a2.epsilon_data > 0.0);
    }

    #[test]
    fn permuting_source_rows_permutes_indices_only() {
        let source = random_dataset(11, 15, 2, 1);
        let target = random_dataset(12, 9, 2, 1);
        let metric = JointMetric::default();
        let base = align_nearest(&source, &target, &metric).unwrap();
        // Rotate the source rows by 4.
        let perm: Vec<usize> = (0..15).map(|i| (i + 4) % 15).collect();
        let p_in = Matrix::from_fn(15, 2, |i, j| source.inputs.get(perm[i], j));
        let p_lab = Matrix::from_fn(15, 1, |i, j| source.labels.get(perm[i], j));
        let permuted = PairedDataset::new(p_in, p_lab, "p").unwrap();
        let got = align_nearest(&permuted, &target, &metric).unwrap();
        // perm[new_index] == old_index
        for (n, o) in got.source_index.iter().zip(&base.source_index) {
            assert_eq!(perm[*n], *o);
        }
        assert_eq!(got.pair_distances, base.pair_distances);
        assert_eq!(got.epsilon_data, base.epsilon_data);
    }

    #[test]
    fn sinkhorn_identity_on_identical_datasets() {
        let d = random_dataset(5, 12, 2, 1);
        let r = align_sinkhorn(&d, &d, &JointMetric::default(), 1e-3, 2000, 1e-9).unwrap();
        assert!(r.converged, "marginal error {}", r.marginal_error);
        assert_eq!(r.alignment.source_index, (0..12).collect::<Vec<_>>());
        assert_eq!(r.alignment.epsilon_data, 0.0);
    }

    #[test]
    fn sinkhorn_large_reg_tends_to_uniform_coupling() {
        let source = random_dataset(21, 8, 2, 1);
        let target = random_dataset(22, 6, 2, 1);
        let p = sinkhorn_coupling(&source, &target, &JointMetric::default(), 1e6, 500, 1e-10).unwrap();
        let uniform_value = 1.0 / (8.0 * 6.0);
        for &v in p.data() {
            assert!((v - uniform_value).abs() < 1e-3 * uniform_value.max(1.0), "{v} vs {uniform_value}");
        }
    }

    #[test]
    fn sinkhorn_marginals_sum_to_uniform() {
        let source = random_dataset(31, 10, 2, 1);
        let target = random_dataset(32, 7, 2, 1);
        let tol = 1e-8;
        let p = sinkhorn_coupling(&source, &target, &JointMetric::default(), 0.5, 5000, tol).unwrap();
        for i in 0..7 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0 / 7.0).abs() < 10.0 * tol, "row {i} sums to {s}");
        }
        for j in 0..10 {
            let s: f64 = (0..7).map(|i| p.get(i, j)).sum();
            assert!((s - 1.0 / 10.0).abs() < 1e-4, "col {j} sums to {s}");
        }
    }

    #[test]
    fn sinkhorn_matches_clusters_to_their_own_side() {
        // Two clusters 100 apart, intra-cluster spread below 1.
        let place = |center: f64, k: usize, seed: u64| -> Vec<Vec<f64>> {
            (0..k)
                .map(|i| vec![center + uniform(seed, Stream::Trial, i as u64) - 0.5])
                .collect()
        };
        let mut s_rows = place(0.0, 5, 41);
        s_rows.extend(place(100.0, 5, 42));
        let mut t_rows = place(0.0, 4, 43);
        t_rows.extend(place(100.0, 4, 44));
        let zeros = |n: usize| Matrix::zeros(n, 1);
        let source = PairedDataset::new(Matrix::from_rows(s_rows).unwrap(), zeros(10), "s").unwrap();
        let target = PairedDataset::new(Matrix::from_rows(t_rows).unwrap(), zeros(8), "t").unwrap();
        let r = align_sinkhorn(&source, &target, &JointMetric::default(), 0.1, 5000, 1e-9).unwrap();
        let nn = align_nearest(&source, &target, &JointMetric::default()).unwrap();
        for i in 0..8 {
            let side = i >= 4; // second cluster
            let j = r.alignment.source_index[i];
            assert_eq!(j >= 5, side, "target {i} crossed clusters");
            assert_eq!(nn.source_index[i] >= 5, side);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_parameters() {
        let d = random_dataset(1, 4, 1, 1);
        assert!(align_sinkhorn(&d, &d, &JointMetric::default(), 0.0, 10, 1e-6).is_err());
        assert!(align_sinkhorn(&d, &d, &JointMetric::default(), 1.0, 0, 1e-6).is_err());
    }

    #[test]
    fn sinkhorn_nonconvergence_is_flagged() {
        let source = random_dataset(51, 9, 2, 1);
        let target = random_dataset(52, 9, 2, 1);
        let r = align_sinkhorn(&source, &target, &JointMetric::default(), 1e-4, 2, 1e-12).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert_eq!(r.alignment.source_index.len(), 9);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let d = random_dataset(61, 13, 3, 2);
        let text = d.to_csv_string();
        let back = PairedDataset::parse_csv(&text, "mem", "random").unwrap();
        assert_eq!(d, back);
        assert!(text.starts_with("x0,x1,x2,y0,y1\n"));
    }

    #[test]
    fn csv_comment_lines_are_skipped() {
        let text = "# images 2x1x1 -> 2x1x1\nx0,y0\n1.0,2.0\n# trailing note\n3.0,4.0\n";
        let d = PairedDataset::parse_csv(text, "mem", "commented").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs.get(1, 0), 3.0);
    }

    #[test]
    fn csv_errors_carry_line_context() {
        let bad_value = "x0,y0\n1.0,2.0\noops,3.0\n";
        match PairedDataset::parse_csv(bad_value, "mem", "d") {
            Err(Error::Parse { details, .. }) => assert!(details.contains("line 3"), "{details}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_width = "x0,y0\n1.0,2.0,3.0\n";
        match PairedDataset::parse_csv(bad_width, "mem", "d") {
            Err(Error::Parse { details, .. }) => assert!(details.contains("line 2"), "{details}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_header = "a0,y0\n1.0,2.0\n";
        assert!(PairedDataset::parse_csv(bad_header, "mem", "d").is_err());
        let unordered_header = "x1,x0,y0\n1.0,2.0,3.0\n";
        assert!(PairedDataset::parse_csv(unordered_header, "mem", "d").is_err());
    }
}
