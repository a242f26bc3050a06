//! Analytic parameter and MAC accounting, per-stage summaries and
//! feature-map export.
//!
//! One MAC is one multiply-accumulate. A convolution costs
//! `Cout · Cin/groups · kh · kw · H' · W'`, a channel linear map costs
//! `Cin · Cout · positions`; normalization, activations, pooling and
//! residual additions are free.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::model::{Model, ModelConfig, TokenizerKind, INPUT_MULTIPLE};
use crate::real::Real;
use crate::tensor::{shape_string, Tensor};

/// What a row computes, with enough geometry to recount its MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostOp {
    Conv { cin: usize, cout: usize, geom: ConvGeometry, out_hw: (usize, usize) },
    Linear { cin: usize, cout: usize, positions: usize },
    Free,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    /// Registry prefix of the layer's parameters.
    pub name: String,
    pub kind: &'static str,
    /// `[C, H, W]` for feature maps, `[K]` for vectors; batch omitted.
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
    pub op: CostOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub input: (usize, usize),
    pub total_params: usize,
    pub total_macs: u64,
}

pub const CSV_HEADER: &str = "name,kind,out_shape,params,macs";

impl CostReport {
    fn from_rows(rows: Vec<CostRow>, input: (usize, usize)) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        Self { rows, input, total_params, total_macs }
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// One line per row after the header; shapes as `CxHxW`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, shape_string(&r.out_shape), r.params, r.macs);
        }
        s
    }

    /// Rows whose name starts with `prefix` (as a whole dotted component).
    pub fn rows_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a CostRow> + 'a {
        self.rows.iter().filter(move |r| under(&r.name, prefix))
    }
}

fn under(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

struct Planner {
    rows: Vec<CostRow>,
    c: usize,
    h: usize,
    w: usize,
}

impl Planner {
    fn push(&mut self, name: String, kind: &'static str, params: usize, op: CostOp) {
        let macs = match op {
            CostOp::Conv { cin, cout, geom, out_hw } => {
                (cout * (cin / geom.groups) * geom.kernel.0 * geom.kernel.1 * out_hw.0 * out_hw.1) as u64
            }
            CostOp::Linear { cin, cout, positions } => (cin * cout * positions) as u64,
            CostOp::Free => 0,
        };
        let out_shape = if kind == "avgpool" || name == "head" { vec![self.c] } else { vec![self.c, self.h, self.w] };
        self.rows.push(CostRow { name, kind, out_shape, params, macs, op });
    }

    fn conv(&mut self, name: String, cout: usize, geom: ConvGeometry, bias: bool) -> Result<()> {
        let cin = self.c;
        let (oh, ow) = geom.output_extent(self.h, self.w)?;
        let params = cout * (cin / geom.groups) * geom.kernel.0 * geom.kernel.1 + if bias { cout } else { 0 };
        (self.c, self.h, self.w) = (cout, oh, ow);
        let kind = if geom.groups > 1 && geom.groups == cin { "dwconv" } else { "conv" };
        self.push(name, kind, params, CostOp::Conv { cin, cout, geom, out_hw: (oh, ow) });
        Ok(())
    }

    fn bn(&mut self, name: String) {
        let c = self.c;
        self.push(name, "batchnorm", 2 * c, CostOp::Free);
    }

    fn ln(&mut self, name: String) {
        let c = self.c;
        self.push(name, "layernorm", 2 * c, CostOp::Free);
    }

    fn linear(&mut self, name: String, cout: usize, kind: &'static str) {
        let cin = self.c;
        let positions = self.h * self.w;
        self.c = cout;
        self.push(name, kind, cin * cout + cout, CostOp::Linear { cin, cout, positions });
    }

    fn conv_bn(&mut self, name: &str, cout: usize, geom: ConvGeometry) -> Result<()> {
        self.conv(format!("{name}.conv"), cout, geom, false)?;
        self.bn(format!("{name}.bn"));
        Ok(())
    }

    fn mlp_block(&mut self, name: &str, ratio: usize, dw: bool) -> Result<()> {
        let c = self.c;
        self.ln(format!("{name}.norm1"));
        self.linear(format!("{name}.mlp1.fc1"), ratio * c, "linear");
        self.linear(format!("{name}.mlp1.fc2"), c, "linear");
        if dw {
            self.conv(format!("{name}.dw"), c, ConvGeometry::new(3, 1, 1).with_groups(c), true)?;
        }
        self.ln(format!("{name}.norm2"));
        self.linear(format!("{name}.mlp2.fc1"), ratio * c, "linear");
        self.linear(format!("{name}.mlp2.fc2"), c, "linear");
        Ok(())
    }
}

/// Every parameterized or pooling layer of `config` at input `h × w`, in
/// construction order.
pub fn layer_plan(config: &ModelConfig, h: usize, w: usize) -> Result<Vec<CostRow>> {
    config.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::geom("count_macs", format!("input {h}x{w} is not a multiple of {INPUT_MULTIPLE}")));
    }
    let mut p = Planner { rows: Vec::new(), c: 3, h, w };
    let ch = config.channels;
    match config.tokenizer {
        TokenizerKind::Conv => {
            for (i, &c) in config.tokenizer_channels.iter().enumerate() {
                let stride = if i == 0 { 2 } else { 1 };
                p.conv_bn(&format!("tokenizer.{i}"), c, ConvGeometry::new(3, stride, 1))?;
            }
            let (oh, ow) = ConvGeometry::new(3, 2, 1).output_extent(p.h, p.w)?;
            (p.h, p.w) = (oh, ow);
            p.push("tokenizer.pool".into(), "maxpool", 0, CostOp::Free);
        }
        TokenizerKind::Patch => p.conv("tokenizer.embed".into(), ch[0], ConvGeometry::new(4, 4, 0), true)?,
    }
    for i in 0..config.conv_stage_blocks {
        if config.use_conv_stage {
            let name = format!("conv_stage.blocks.{i}");
            p.conv_bn(&format!("{name}.0"), config.conv_stage_hidden, ConvGeometry::new(1, 1, 0))?;
            p.conv_bn(&format!("{name}.1"), config.conv_stage_hidden, ConvGeometry::new(3, 1, 1))?;
            p.conv_bn(&format!("{name}.2"), ch[0], ConvGeometry::new(1, 1, 0))?;
        } else {
            p.mlp_block(&format!("mlp_stage.blocks.{i}"), config.mlp_ratio, false)?;
        }
    }
    for k in 0..3 {
        let name = format!("stages.{k}.downsample");
        if config.use_conv_downsample {
            p.conv(format!("{name}.conv"), ch[k + 1], ConvGeometry::new(3, 2, 1), true)?;
        } else {
            (p.c, p.h, p.w) = (4 * p.c, p.h / 2, p.w / 2);
            p.linear(format!("{name}.proj"), ch[k + 1], "patch_merge");
        }
        for i in 0..config.stage_depths[k] {
            p.mlp_block(&format!("stages.{k}.blocks.{i}"), config.mlp_ratio, config.use_dw_conv)?;
        }
    }
    p.push("pool".into(), "avgpool", 0, CostOp::Free);
    (p.h, p.w) = (1, 1);
    p.linear("head".into(), config.num_classes, "linear");
    Ok(p.rows)
}

/// Analytic MAC (and parameter) report for `config` at `h × w`.
pub fn count_macs(config: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    Ok(CostReport::from_rows(layer_plan(config, h, w)?, (h, w)))
}

/// Resolution at which [`count_params`] fills in the MAC column.
pub const REFERENCE_RESOLUTION: usize = 224;

/// Per-layer and total parameter counts of a built model, checked against
/// the element counts actually held in its registry. MACs are reported at
/// 224 × 224.
pub fn count_params<T: Real>(model: &Model<T>) -> Result<CostReport> {
    let report = count_macs(model.config(), REFERENCE_RESOLUTION, REFERENCE_RESOLUTION)?;
    let reg = model.params();
    for row in &report.rows {
        let held: usize = reg.trainable().filter(|p| under(&p.name, &row.name)).map(|p| p.value.len()).sum();
        if held != row.params {
            return Err(Error::Consistency(format!("{}: plan says {} parameters, registry holds {held}", row.name, row.params)));
        }
    }
    let total = reg.num_trainable_elements();
    if total != report.total_params {
        return Err(Error::Consistency(format!("plan total {} vs registry total {total}", report.total_params)));
    }
    Ok(report)
}

/// One line of [`summarize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSummary {
    pub stage: String,
    pub blocks: usize,
    pub channels: usize,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
}

/// Groups a report by stage: tokenizer, first stage, the three Conv-MLP
/// stages (downsampler included) and the head.
pub fn stage_summaries(config: &ModelConfig, report: &CostReport) -> Vec<StageSummary> {
    let first = if config.use_conv_stage { ("conv stage", "conv_stage") } else { ("mlp stage", "mlp_stage") };
    let tok_blocks = match config.tokenizer {
        TokenizerKind::Conv => config.tokenizer_channels.len(),
        TokenizerKind::Patch => 1,
    };
    let mut groups: Vec<(String, usize, Vec<&str>)> = vec![("tokenizer".into(), tok_blocks, vec!["tokenizer"])];
    if config.conv_stage_blocks > 0 {
        groups.push((first.0.into(), config.conv_stage_blocks, vec![first.1]));
    }
    let stage_prefixes = ["stages.0", "stages.1", "stages.2"];
    for k in 0..3 {
        groups.push((format!("conv-mlp {}", k + 1), config.stage_depths[k], vec![stage_prefixes[k]]));
    }
    groups.push(("head".into(), 1, vec!["pool", "head"]));
    groups
        .into_iter()
        .map(|(stage, blocks, prefixes)| {
            let rows: Vec<&CostRow> =
                report.rows.iter().filter(|r| prefixes.iter().any(|p| under(&r.name, p))).collect();
            let out_shape = rows.last().map(|r| r.out_shape.clone()).unwrap_or_default();
            StageSummary {
                stage,
                blocks,
                channels: out_shape.first().copied().unwrap_or(0),
                out_shape,
                params: rows.iter().map(|r| r.params).sum(),
                macs: rows.iter().map(|r| r.macs).sum(),
            }
        })
        .collect()
}

/// Human-readable per-stage table for `model` at `h × w`.
pub fn summarize<T: Real>(model: &Model<T>, h: usize, w: usize) -> Result<String> {
    let config = model.config();
    let params = count_params(model)?;
    let report = count_macs(config, h, w)?;
    debug_assert_eq!(params.total_params, report.total_params);
    let mut s = String::new();
    let _ = writeln!(s, "input {h}x{w}; {}", config.describe());
    let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>14} {:>12} {:>15}", "stage", "blocks", "channels", "output", "params", "MACs");
    for st in stage_summaries(config, &report) {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>14} {:>12} {:>15}",
            st.stage,
            st.blocks,
            st.channels,
            shape_string(&st.out_shape),
            st.params,
            st.macs
        );
    }
    let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>14} {:>12} {:>15}", "total", "", "", "", report.total_params, report.total_macs);
    let _ = writeln!(s, "params {:.3} M, {:.3} GMACs", report.mparams(), report.gmacs());
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Average over channels: one map.
    Mean,
    /// The first `k` channels (fewer if the stage has fewer).
    PerChannel(usize),
}

/// Min-max normalizes to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map<T: Real>(map: &mut Tensor<T>) {
    let (lo, hi) = map.data().iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > T::zero()) || !range.is_finite() {
        map.fill(T::zero());
        return;
    }
    for v in map.data_mut() {
        *v = (*v - lo) / range;
    }
}

/// Eval-mode feature maps of one image at pyramid level `stage` (1-4),
/// reduced to 2-D `[H', W']` maps and min-max normalized.
pub fn export_feature_maps<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    stage: usize,
    reduce: Reduce,
) -> Result<Vec<Tensor<T>>> {
    let (n, _, _, _) = image.dims4()?;
    if n != 1 {
        return Err(Error::dim("export_feature_maps", format!("expected a single image, got batch {n}")));
    }
    if !(1..=4).contains(&stage) {
        return Err(Error::Parameter(format!("stage {stage} outside 1..=4")));
    }
    let pyramid = model.features(image)?;
    let f = pyramid.levels()[stage - 1];
    let (_, c, h, w) = f.dims4()?;
    let plane = h * w;
    let mut maps = Vec::new();
    match reduce {
        Reduce::Mean => {
            let inv = T::one() / T::of_f64(c as f64);
            let mut m = Tensor::zeros(&[h, w]);
            for ch in 0..c {
                for (d, &v) in m.data_mut().iter_mut().zip(&f.data()[ch * plane..(ch + 1) * plane]) {
                    *d += v * inv;
                }
            }
            maps.push(m);
        }
        Reduce::PerChannel(k) => {
            for ch in 0..k.min(c) {
                maps.push(Tensor::from_vec(&[h, w], f.data()[ch * plane..(ch + 1) * plane].to_vec())?);
            }
        }
    }
    for m in &mut maps {
        normalize_map(m);
    }
    Ok(maps)
}
