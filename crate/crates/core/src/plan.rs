//! Symbolic layer tables: output shape and parameter count per layer,
//! computed from configs alone without allocating any weights.

use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    /// Output extents as printed in a layer table, e.g. `[78, 70, 128]`.
    pub output: Vec<usize>,
    pub params: u64,
}

impl LayerRow {
    pub fn new(name: impl Into<String>, output: impl Into<Vec<usize>>, params: u64) -> Self {
        LayerRow {
            name: name.into(),
            output: output.into(),
            params,
        }
    }

    pub fn output_label(&self) -> String {
        self.output
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

pub fn total_params(rows: &[LayerRow]) -> u64 {
    rows.iter().map(|r| r.params).sum()
}

/// Parameters of a square convolution with bias.
pub fn conv_params(kernel: usize, cin: usize, cout: usize) -> u64 {
    (kernel * kernel * cin * cout + cout) as u64
}

pub fn dense_params(input: usize, output: usize) -> u64 {
    (input * output + output) as u64
}

/// Fixed-width text table with a trailing total line.
pub fn render_table(rows: &[LayerRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let out_w = rows
        .iter()
        .map(|r| r.output_label().len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut s = String::new();
    writeln!(s, "{:<name_w$}  {:<out_w$}  {:>12}", "layer", "output", "params").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<name_w$}  {:<out_w$}  {:>12}",
            r.name,
            r.output_label(),
            group_thousands(r.params)
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<name_w$}  {:<out_w$}  {:>12}",
        "total",
        "",
        group_thousands(total_params(rows))
    )
    .unwrap();
    s
}

pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
