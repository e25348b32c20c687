//! Model checkpoints as `f64` tensor files.
//!
//! The configuration is stored first as scalar entries under `config.`,
//! followed by every parameter under its dotted name.

use std::path::Path;

use super::tensorfile::{read_tensor_file, write_tensor_file, DType, TensorTable};
use crate::error::{Error, Result};
use crate::model::{BoqModel, BoqParams, InputMode, ModelConfig, Reduction};
use crate::tensor::Tensor;

const PREFIX: &str = "config.";

fn config_entries(cfg: &ModelConfig) -> Vec<(&'static str, Tensor)> {
    let s = |v: usize| Tensor::scalar(v as f64);
    let b = |v: bool| Tensor::scalar(if v { 1.0 } else { 0.0 });
    let mut out = vec![
        ("num_blocks", s(cfg.num_blocks)),
        ("queries_per_block", s(cfg.queries_per_block)),
        ("model_dim", s(cfg.model_dim)),
        ("num_heads", s(cfg.num_heads)),
        ("channel_proj", s(cfg.channel_proj)),
        ("row_proj", s(cfg.row_proj.unwrap_or(0))),
        ("ffn_mult", s(cfg.ffn_mult)),
        ("self_attention", b(cfg.self_attention)),
        ("output_norm", b(cfg.output_norm)),
        ("reduction", s(matches!(cfg.reduction, Reduction::Linear) as usize)),
    ];
    match &cfg.input {
        InputMode::Image {
            height,
            width,
            stem_channels,
        } => {
            out.push(("input_mode", s(0)));
            out.push(("image_height", s(*height)));
            out.push(("image_width", s(*width)));
            out.push((
                "stem_channels",
                Tensor::from_vec(stem_channels.iter().map(|&c| c as f64).collect()),
            ));
        }
        InputMode::Features { feature_dim, grid } => {
            let (gh, gw) = grid.unwrap_or((0, 0));
            out.push(("input_mode", s(1)));
            out.push(("feature_dim", s(*feature_dim)));
            out.push(("grid_rows", s(gh)));
            out.push(("grid_cols", s(gw)));
        }
    }
    out
}

pub fn checkpoint_table(model: &BoqModel) -> TensorTable {
    let mut table = TensorTable::new(DType::F64);
    for (name, t) in config_entries(model.config()) {
        table.push(format!("{PREFIX}{name}"), t);
    }
    for (name, t) in model.params().named() {
        table.push(name, t.clone());
    }
    table
}

fn config_from_table(table: &TensorTable) -> Result<ModelConfig> {
    let get = |name: &str| {
        table
            .get(&format!("{PREFIX}{name}"))
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{PREFIX}{name}`")))
    };
    let uint = |name: &str| -> Result<usize> {
        let t = get(name)?;
        match t.data() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
            _ => Err(Error::Config(format!("`{PREFIX}{name}` is not a non-negative integer scalar"))),
        }
    };
    let flag = |name: &str| -> Result<bool> {
        match uint(name)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Config(format!("`{PREFIX}{name}` must be 0 or 1, got {v}"))),
        }
    };
    let input = match uint("input_mode")? {
        0 => InputMode::Image {
            height: uint("image_height")?,
            width: uint("image_width")?,
            stem_channels: get("stem_channels")?
                .data()
                .iter()
                .map(|&c| c as usize)
                .collect(),
        },
        1 => InputMode::Features {
            feature_dim: uint("feature_dim")?,
            grid: match (uint("grid_rows")?, uint("grid_cols")?) {
                (0, 0) => None,
                g => Some(g),
            },
        },
        v => return Err(Error::Config(format!("unknown input mode {v}"))),
    };
    let cfg = ModelConfig {
        num_blocks: uint("num_blocks")?,
        queries_per_block: uint("queries_per_block")?,
        model_dim: uint("model_dim")?,
        num_heads: uint("num_heads")?,
        channel_proj: uint("channel_proj")?,
        row_proj: Some(uint("row_proj")?).filter(|&r| r > 0),
        ffn_mult: uint("ffn_mult")?,
        self_attention: flag("self_attention")?,
        output_norm: flag("output_norm")?,
        reduction: if flag("reduction")? { Reduction::Linear } else { Reduction::Conv3x3 },
        input,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_from_table(table: &TensorTable) -> Result<BoqModel> {
    let config = config_from_table(table)?;
    let mut params = BoqParams::init(&config, 0)?;
    let mut missing = None;
    params.visit_mut(&mut |name, t| match table.get(name) {
        Some(stored) => *t = stored.clone(),
        None => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Config(format!("checkpoint lacks parameter `{name}`")));
    }
    let expected = params.named().len() + table.entries.iter().filter(|(n, _)| n.starts_with(PREFIX)).count();
    if expected != table.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} entries, configuration accounts for {expected}",
            table.len()
        )));
    }
    BoqModel::from_parts(config, params)
}

pub fn save_checkpoint(path: &Path, model: &BoqModel) -> Result<()> {
    write_tensor_file(path, &checkpoint_table(model))
}

pub fn load_checkpoint(path: &Path) -> Result<BoqModel> {
    model_from_table(&read_tensor_file(path)?)
}
