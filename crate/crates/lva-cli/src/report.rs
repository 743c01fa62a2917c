//! Serialization of reports, benchmark rows, and manifests.
//!
//! Floats are written with 17 significant digits (`{:.16e}`) so a reader
//! recovers every bit; non-finite values become `null` in JSON. All output
//! here is deterministic for fixed inputs: object fields keep their
//! insertion order and maps are iterated in sorted key order.

use lva_core::bench::BenchResult;
use lva_core::lva::{GeneralizationBoundReport, TransferBoundReport};
use std::collections::BTreeMap;

/// Header of every benchmark CSV; the `psnr` cell is empty for rows that do
/// not measure one.
pub const CSV_HEADER: &str = "method,budget,loss,psnr,runtime_ms,seed";

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// JSON object writer that keeps fields in insertion order, so reports come
/// out with their documented key order.
#[derive(Default)]
pub struct JsonObject {
    fields: Vec<(String, String)>,
}

impl JsonObject {
    pub fn new() -> JsonObject {
        JsonObject::default()
    }

    pub fn num(mut self, key: &str, v: f64) -> JsonObject {
        self.fields.push((key.to_string(), fmt_f64(v)));
        self
    }

    pub fn int(mut self, key: &str, v: u64) -> JsonObject {
        self.fields.push((key.to_string(), v.to_string()));
        self
    }

    pub fn boolean(mut self, key: &str, v: bool) -> JsonObject {
        self.fields.push((key.to_string(), v.to_string()));
        self
    }

    pub fn string(mut self, key: &str, v: &str) -> JsonObject {
        self.fields.push((key.to_string(), format!("\"{}\"", escape(v))));
        self
    }

    /// Inserts an already rendered JSON value (array or object); multiline
    /// values are re-indented to sit inside this object.
    pub fn raw(mut self, key: &str, rendered: &str) -> JsonObject {
        let mut lines = rendered.trim_end().lines();
        let mut value = lines.next().unwrap_or("null").to_string();
        for line in lines {
            value.push('\n');
            value.push_str("  ");
            value.push_str(line);
        }
        self.fields.push((key.to_string(), value));
        self
    }

    pub fn render(&self) -> String {
        if self.fields.is_empty() {
            return "{}\n".to_string();
        }
        let mut out = String::from("{\n");
        for (k, (key, value)) in self.fields.iter().enumerate() {
            out.push_str(&format!("  \"{}\": {}", escape(key), value));
            out.push_str(if k + 1 < self.fields.len() { ",\n" } else { "\n" });
        }
        out.push_str("}\n");
        out
    }
}

pub fn num_array(values: &[f64]) -> String {
    let cells: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", cells.join(", "))
}

fn num_map(map: &BTreeMap<String, f64>) -> String {
    if map.is_empty() {
        return "{}".to_string();
    }
    let cells: Vec<String> = map.iter().map(|(k, v)| format!("\"{}\": {}", escape(k), fmt_f64(*v))).collect();
    format!("{{{}}}", cells.join(", "))
}

/// The transfer bound report with every constant under its published name.
pub fn transfer_report_json(r: &TransferBoundReport) -> String {
    transfer_report_object(r).render()
}

pub fn transfer_report_object(r: &TransferBoundReport) -> JsonObject {
    JsonObject::new()
        .num("epsilon_pretrained", r.epsilon_pretrained)
        .num("epsilon_data", r.epsilon_data)
        .num("C_F", r.c_suffix)
        .num("C_Fprefix", r.c_prefix)
        .num("C_deltaF", r.c_delta)
        .num("C_xtilde", r.c_xtilde)
        .num("v1_bound", r.v1_bound)
        .num("rhs", r.rhs_bound)
        .num("lhs", r.observed_loss)
        .boolean("holds", r.holds)
        .boolean("cdelta_leq_edata", r.cdelta_leq_edata)
}

pub fn generalization_report_json(r: &GeneralizationBoundReport) -> String {
    generalization_report_object(r).render()
}

pub fn generalization_report_object(r: &GeneralizationBoundReport) -> JsonObject {
    JsonObject::new()
        .num("epsilon_test", r.epsilon_test)
        .num("C_g", r.c_g)
        .int("n_adapt", r.n_adapt as u64)
        .int("n_test", r.n_test as u64)
        .num("adapt_loss", r.adapt_loss)
        .num("rhs", r.rhs_bound)
        .num("lhs", r.test_loss)
        .boolean("holds", r.holds)
}

/// One adaptation or benchmark measurement, mirroring the CSV columns plus
/// the named auxiliary metrics.
pub fn result_json(
    method: &str,
    budget: usize,
    target_loss: f64,
    runtime_ms: u64,
    seed: u64,
    extra_metrics: &BTreeMap<String, f64>,
) -> String {
    JsonObject::new()
        .string("method", method)
        .int("budget", budget as u64)
        .num("target_loss", target_loss)
        .int("runtime_ms", runtime_ms)
        .int("seed", seed)
        .raw("extra_metrics", &num_map(extra_metrics))
        .render()
}

pub fn bench_csv(rows: &[BenchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let psnr = r.psnr().map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.16e},{},{},{}\n",
            r.method.label(),
            r.budget,
            r.target_loss,
            psnr,
            r.runtime_ms,
            r.seed
        ));
    }
    out
}
