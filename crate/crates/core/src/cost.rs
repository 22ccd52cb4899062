//! Parameter, multiply-accumulate and storage accounting for model graphs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, ModelGraph};

/// Stored values of one layer instance, running statistics included.
pub fn layer_params(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Conv {
            kernel,
            in_channels,
            out_channels,
            ..
        } => kernel * kernel * in_channels * out_channels + out_channels,
        LayerKind::BatchNorm { channels } => 4 * channels,
        LayerKind::Dense { inputs, outputs } => inputs * outputs + outputs,
        LayerKind::Se { channels, squeeze } => 2 * channels * channels / squeeze,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
}

/// Per-layer parameter counts; trunk layers count once per distinct trunk copy.
pub fn count_params(graph: &ModelGraph) -> Vec<LayerCount> {
    let copies = graph.trunk_copies();
    let trunk = graph.trunk().len();
    graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerCount {
            name: l.name.clone(),
            params: layer_params(&l.kind) * if i < trunk { copies } else { 1 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMacc {
    pub name: String,
    /// Multiply-accumulates of convolutions, summed over branches.
    pub conv: u64,
    /// Multiply-accumulates of dense layers (SE included), kept apart from `conv`.
    pub dense: u64,
}

/// Per-layer MACC for one sample of shape `input_shape` per branch.
pub fn count_macc(graph: &ModelGraph, input_shape: [usize; 3]) -> Result<Vec<LayerMacc>> {
    let trace = graph.with_input_shape(input_shape)?.shape_trace()?;
    let branches = graph.branches() as u64;
    let trunk = graph.trunk().len();
    Ok(graph
        .layers()
        .iter()
        .zip(&trace)
        .enumerate()
        .map(|(i, (l, s))| {
            let mult = if i < trunk { branches } else { 1 };
            let (conv, dense) = match l.kind {
                LayerKind::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let (ho, wo) = (s.output[0], s.output[1]);
                    ((ho * wo * out_channels * kernel * kernel * in_channels) as u64, 0)
                }
                LayerKind::Dense { inputs, outputs } => (0, (inputs * outputs) as u64),
                LayerKind::Se { channels, squeeze } => (0, (2 * channels * channels / squeeze) as u64),
                _ => (0, 0),
            };
            LayerMacc {
                name: l.name.clone(),
                conv: conv * mult,
                dense: dense * mult,
            }
        })
        .collect())
}

/// Cost of standard convolution with `m_hat → n_hat` channels relative to a
/// depthwise-separable one with `m → n` channels and a `d_k × d_k` kernel:
/// `M/(M̂·N̂) + M·N/(M̂·N̂·D_K²)`. Values above 1 favour the standard convolution.
pub fn depthwise_reduction_ratio(m: f64, n: f64, m_hat: f64, n_hat: f64, d_k: f64) -> Result<f64> {
    let args = [m, n, m_hat, n_hat, d_k];
    if args.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::invalid(format!(
            "reduction ratio needs positive finite arguments, got {args:?}"
        )));
    }
    let denom = m_hat * n_hat;
    Ok(m / denom + m * n / (denom * d_k * d_k))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub kernel: String,
    pub stride: String,
    pub output: String,
    pub params: usize,
    pub macc: u64,
}

/// Table-style cost report. `macc_total` covers convolutions only; dense
/// multiply-accumulates are in `dense_macc`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub param_total: usize,
    pub macc_total: u64,
    pub dense_macc: u64,
    pub serialized_bytes: usize,
}

fn dims(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("*")
}

impl CostReport {
    /// Groups layers into rows: each convolution, SE gate and dense layer
    /// opens a row, batch norm opens a `BN+ReLU` row (`BRA` once a pool joins
    /// it), and parameter-free layers fold into the row before them.
    pub fn analyze(graph: &ModelGraph) -> Result<Self> {
        let params = count_params(graph);
        let maccs = count_macc(graph, graph.input_shape())?;
        let trace = graph.shape_trace()?;
        let mut report = CostReport::default();
        let mut open_bn = false;
        for (((l, p), mc), s) in graph.layers().iter().zip(&params).zip(&maccs).zip(&trace) {
            report.dense_macc += mc.dense;
            let row = match &l.kind {
                LayerKind::Conv {
                    kernel,
                    out_channels,
                    stride,
                    ..
                } => Some(CostRow {
                    layer: l.name.clone(),
                    kernel: format!("{kernel}*{kernel}*{out_channels}"),
                    stride: stride.to_string(),
                    output: dims(&s.output),
                    params: p.params,
                    macc: mc.conv,
                }),
                LayerKind::BatchNorm { .. } => Some(CostRow {
                    layer: "BN+ReLU".into(),
                    kernel: "-".into(),
                    stride: "-".into(),
                    output: dims(&s.output),
                    params: p.params,
                    macc: 0,
                }),
                LayerKind::Se { channels, squeeze } => Some(CostRow {
                    layer: l.name.clone(),
                    kernel: format!("{channels}*{}", channels / squeeze),
                    stride: "-".into(),
                    output: dims(&s.output),
                    params: p.params,
                    macc: 0,
                }),
                LayerKind::Dense { inputs, outputs } => Some(CostRow {
                    layer: l.name.clone(),
                    kernel: format!("{inputs}*{outputs}"),
                    stride: "-".into(),
                    output: dims(&s.output),
                    params: p.params,
                    macc: 0,
                }),
                _ => None,
            };
            let opens_bn = matches!(l.kind, LayerKind::BatchNorm { .. });
            match row {
                Some(r) => {
                    report.rows.push(r);
                    open_bn = opens_bn;
                }
                None => {
                    let Some(last) = report.rows.last_mut() else {
                        continue;
                    };
                    match &l.kind {
                        LayerKind::Relu => {
                            if open_bn {
                                last.output = dims(&s.output);
                            }
                        }
                        LayerKind::AvgPool { window, stride } if open_bn => {
                            last.layer = "BRA".into();
                            last.kernel = format!("{window}*{window}");
                            last.stride = stride.to_string();
                            last.output = dims(&s.output);
                        }
                        LayerKind::AvgPool { .. } => last.output = dims(&s.output),
                        _ => {}
                    }
                    last.params += p.params;
                    last.macc += mc.conv;
                }
            }
        }
        report.param_total = report.rows.iter().map(|r| r.params).sum();
        report.macc_total = report.rows.iter().map(|r| r.macc).sum();
        report.serialized_bytes = 4 + 1 + 4 + graph.describe().len() + 4 * graph.stored_values() + 4;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::invalid(format!(
                "unknown report format {s:?} (expected text or csv)"
            ))),
        }
    }
}

const HEADER: [&str; 6] = ["layer", "kernel", "stride", "output", "params", "macc"];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_report(report: &CostReport, format: ReportFormat) -> String {
    let mut lines: Vec<[String; 6]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.layer.clone(),
                r.kernel.clone(),
                r.stride.clone(),
                r.output.clone(),
                r.params.to_string(),
                r.macc.to_string(),
            ]
        })
        .collect();
    lines.push([
        "Total".into(),
        String::new(),
        String::new(),
        String::new(),
        report.param_total.to_string(),
        report.macc_total.to_string(),
    ]);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&HEADER.join(","));
            out.push_str("\r\n");
            for l in &lines {
                let fields: Vec<String> = l.iter().map(|f| csv_field(f)).collect();
                out.push_str(&fields.join(","));
                out.push_str("\r\n");
            }
        }
        ReportFormat::Text => {
            let mut width = HEADER.map(str::len);
            for l in &lines {
                for (w, f) in width.iter_mut().zip(l) {
                    *w = (*w).max(f.len());
                }
            }
            let mut row = |cells: &[&str]| {
                let mut line = String::new();
                for (i, (c, w)) in cells.iter().zip(width).enumerate() {
                    // Text columns align left, counts align right.
                    if i < 4 {
                        let _ = write!(line, "{c:<w$}  ");
                    } else {
                        let _ = write!(line, "{c:>w$}  ");
                    }
                }
                out.push_str(line.trim_end());
                out.push('\n');
            };
            row(&HEADER);
            for l in &lines {
                row(&l.each_ref().map(String::as_str));
            }
            let _ = writeln!(out, "dense macc: {}", report.dense_macc);
            let _ = writeln!(out, "weight file bytes: {}", report.serialized_bytes);
        }
    }
    out
}

/// Parameter rows of a bare layer list (no shapes needed).
pub fn count_layer_params(layers: &[LayerSpec]) -> Vec<usize> {
    layers.iter().map(|l| layer_params(&l.kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build, build_full, build_plain, Architecture, ConcatMode};

    #[test]
    fn plain_params_and_macc() {
        let m = build_plain(false, false);
        let r = CostReport::analyze(&m).unwrap();
        let params: Vec<usize> = r.rows.iter().map(|r| r.params).collect();
        assert_eq!(
            params,
            [896, 128, 9248, 128, 9248, 128, 9248, 128, 1056, 6156, 13]
        );
        assert_eq!(r.param_total, 36377);
        let conv: Vec<u64> = r.rows.iter().filter(|r| r.macc > 0).map(|r| r.macc).collect();
        assert_eq!(conv, [3321216, 7750656, 1327104, 147456, 16384]);
        assert_eq!(r.macc_total, 12_562_816);
        assert_eq!(r.dense_macc, 512 * 12 + 12);
        assert_eq!(r.serialized_bytes, serialize_len(&m));
    }

    fn serialize_len(m: &ModelGraph) -> usize {
        crate::nn::serialize(m).len()
    }

    #[test]
    fn row_labels_and_shapes() {
        let r = CostReport::analyze(&build_plain(false, false)).unwrap();
        let labels: Vec<&str> = r.rows.iter().map(|r| r.layer.as_str()).collect();
        assert_eq!(
            labels,
            ["Conv1", "BRA", "Conv2", "BRA", "Conv3", "BRA", "Conv4", "BN+ReLU", "Conv5", "Feat", "Pred"]
        );
        assert_eq!(r.rows[0].kernel, "3*3*32");
        assert_eq!(r.rows[0].output, "62*62*32");
        assert_eq!(r.rows[1].output, "31*31*32");
        assert_eq!(r.rows[1].stride, "2");
        assert_eq!(r.rows[8].output, "4*4*32");
    }

    #[test]
    fn formula_matches_enumeration() {
        for m in [
            build_plain(false, false),
            build_plain(true, true),
            build_full(3, ConcatMode::Flatten, false).unwrap(),
            build_full(3, ConcatMode::Pooled, true).unwrap(),
            build(&Architecture {
                shared_weights: false,
                ..Architecture::full()
            })
            .unwrap(),
        ] {
            let total: usize = count_params(&m).iter().map(|c| c.params).sum();
            assert_eq!(total, m.stored_values());
            assert_eq!(CostReport::analyze(&m).unwrap().param_total, total);
        }
    }

    #[test]
    fn full_model_multiplies_trunk_macc() {
        let m = build_full(3, ConcatMode::Flatten, false).unwrap();
        let r = CostReport::analyze(&m).unwrap();
        assert_eq!(r.macc_total, 3 * 12_562_816);
        assert_eq!(r.param_total, 48665);
    }

    #[test]
    fn tiny_convolution_costs_one() {
        let layers = vec![
            LayerSpec::new(
                "c",
                LayerKind::Conv {
                    kernel: 1,
                    in_channels: 1,
                    out_channels: 1,
                    stride: 1,
                },
            ),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::new(
                "d",
                LayerKind::Dense {
                    inputs: 1,
                    outputs: 2,
                },
            ),
            LayerSpec::new("s", LayerKind::Softmax),
            LayerSpec::new(
                "p",
                LayerKind::Dense {
                    inputs: 2,
                    outputs: 1,
                },
            ),
        ];
        let m = ModelGraph::from_layers(layers, 1, true, [1, 1, 1], 0.99, 1e-5).unwrap();
        let macc = count_macc(&m, [1, 1, 1]).unwrap();
        assert_eq!(macc[0].conv, 1);
        assert!(count_macc(&build_plain(false, false), [8, 8, 3]).is_err());
    }

    #[test]
    fn empty_layer_list_counts_zero() {
        assert!(count_layer_params(&[]).is_empty());
        let text = render_report(&CostReport::default(), ReportFormat::Csv);
        assert_eq!(text, "layer,kernel,stride,output,params,macc\r\nTotal,,,,0,0\r\n");
    }

    #[test]
    fn text_and_csv_agree() {
        let r = CostReport::analyze(&build_plain(false, false)).unwrap();
        let csv = render_report(&r, ReportFormat::Csv);
        let text = render_report(&r, ReportFormat::Text);
        assert_eq!(csv.lines().count(), 1 + 11 + 1);
        for (c, t) in csv.lines().skip(1).zip(text.lines().skip(1)) {
            let cf: Vec<&str> = c.split(',').filter(|f| !f.is_empty()).collect();
            let tf: Vec<&str> = t.split_whitespace().collect();
            assert_eq!(cf, tf);
        }
    }

    #[test]
    fn reduction_ratio_examples() {
        let r = depthwise_reduction_ratio(144.0, 144.0, 32.0, 32.0, 3.0).unwrap();
        assert!((r - 2.390625).abs() < 1e-12);
        for n in [8.0, 32.0, 144.0] {
            let r = depthwise_reduction_ratio(n, n, n, n, 3.0).unwrap();
            assert!((r - (1.0 / n + 1.0 / 9.0)).abs() < 1e-12);
        }
        assert_eq!(depthwise_reduction_ratio(1.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 2.0);
        assert!(depthwise_reduction_ratio(1.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }
}
