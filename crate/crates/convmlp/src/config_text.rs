//! Line-oriented `key = value` model configuration files.
//!
//! ```text
//! # ConvMLP-S with a wider MLP
//! variant = S
//! mlp_ratio = 3
//! ```
//!
//! `variant` (if present) must be the first setting and loads a preset;
//! every later line overrides one field. Without `variant` the base is S.

use std::path::Path;

use convmlp_core::{Error, ModelConfig, TokenizerKind};

use crate::error::{FormatError, Result};

/// Accepted keys in canonical order (`variant` first).
pub const CONFIG_KEYS: [&str; 13] = [
    "variant",
    "tokenizer",
    "tokenizer_channels",
    "conv_stage_blocks",
    "conv_stage_hidden",
    "stage_depths",
    "channels",
    "mlp_ratio",
    "num_classes",
    "use_conv_stage",
    "use_conv_downsample",
    "use_dw_conv",
    "dropout",
];

fn err(line: usize, detail: impl Into<String>) -> FormatError {
    FormatError::Config { line, detail: detail.into() }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| err(line, format!("malformed value `{v}` for `{key}`: expected a non-negative integer")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_usize(line, key, s.trim())).collect()
}

fn parse_array<const N: usize>(line: usize, key: &str, v: &str) -> Result<[usize; N]> {
    let items = parse_list(line, key, v)?;
    items
        .as_slice()
        .try_into()
        .map_err(|_| err(line, format!("`{key}` takes exactly {N} comma-separated values, got {}", items.len())))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("malformed value `{v}` for `{key}`: expected true or false"))),
    }
}

/// Parses and validates a configuration. Every error carries the 1-based
/// line it refers to.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::convmlp_s();
    let mut seen: Vec<(&str, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{body}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let Some(key) = CONFIG_KEYS.iter().copied().find(|k| *k == key) else {
            return Err(err(line, format!("unknown key `{key}`")));
        };
        if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
            return Err(err(line, format!("duplicate key `{key}` (first set on line {first})")));
        }
        if value.is_empty() && key != "tokenizer_channels" {
            return Err(err(line, format!("missing value for `{key}`")));
        }
        match key {
            "variant" => {
                if !seen.is_empty() {
                    return Err(err(line, "`variant` must be the first setting"));
                }
                cfg = ModelConfig::preset(value).map_err(|_| err(line, format!("unknown variant `{value}`")))?;
            }
            "tokenizer" => {
                cfg.tokenizer = match value {
                    "conv" => TokenizerKind::Conv,
                    "patch" => TokenizerKind::Patch,
                    _ => return Err(err(line, format!("malformed value `{value}` for `tokenizer`: expected conv or patch"))),
                }
            }
            "tokenizer_channels" => cfg.tokenizer_channels = parse_list(line, key, value)?,
            "conv_stage_blocks" => cfg.conv_stage_blocks = parse_usize(line, key, value)?,
            "conv_stage_hidden" => cfg.conv_stage_hidden = parse_usize(line, key, value)?,
            "stage_depths" => cfg.stage_depths = parse_array(line, key, value)?,
            "channels" => cfg.channels = parse_array(line, key, value)?,
            "mlp_ratio" => cfg.mlp_ratio = parse_usize(line, key, value)?,
            "num_classes" => cfg.num_classes = parse_usize(line, key, value)?,
            "use_conv_stage" => cfg.use_conv_stage = parse_bool(line, key, value)?,
            "use_conv_downsample" => cfg.use_conv_downsample = parse_bool(line, key, value)?,
            "use_dw_conv" => cfg.use_dw_conv = parse_bool(line, key, value)?,
            "dropout" => {
                cfg.dropout = value
                    .parse()
                    .map_err(|_| err(line, format!("malformed value `{value}` for `dropout`: expected a number")))?
            }
            _ => unreachable!("key list and match arms agree"),
        }
        seen.push((key, line));
    }
    if let Err(e) = cfg.validate() {
        let line = match &e {
            Error::Config { field, .. } => seen.iter().find(|(k, _)| k == field).map(|(_, l)| *l),
            _ => None,
        };
        // fall back to the last setting; an untouched preset is always valid
        let line = line.or_else(|| seen.last().map(|(_, l)| *l)).unwrap_or(1);
        return Err(err(line, e.to_string()));
    }
    Ok(cfg)
}

/// Canonical text: every field spelled out, no `variant`, no comments.
/// `parse_config` inverts it exactly.
pub fn serialize_config(cfg: &ModelConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let fields = [
        ("tokenizer", cfg.tokenizer.as_str().to_string()),
        ("tokenizer_channels", list(&cfg.tokenizer_channels)),
        ("conv_stage_blocks", cfg.conv_stage_blocks.to_string()),
        ("conv_stage_hidden", cfg.conv_stage_hidden.to_string()),
        ("stage_depths", list(&cfg.stage_depths)),
        ("channels", list(&cfg.channels)),
        ("mlp_ratio", cfg.mlp_ratio.to_string()),
        ("num_classes", cfg.num_classes.to_string()),
        ("use_conv_stage", cfg.use_conv_stage.to_string()),
        ("use_conv_downsample", cfg.use_conv_downsample.to_string()),
        ("use_dw_conv", cfg.use_dw_conv.to_string()),
        ("dropout", cfg.dropout.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in fields {
        out.push_str(k);
        out.push_str(" =");
        if !v.is_empty() {
            out.push(' ');
            out.push_str(&v);
        }
        out.push('\n');
    }
    out
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_config(&text)
}
