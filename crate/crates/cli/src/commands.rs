//! The five pipeline stages. Each command stages its outputs in a hidden
//! sibling directory and renames it into place only when everything has
//! been written.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use boq::data::checkpoint::load_checkpoint;
use boq::data::dataset::PlaceDataset;
use boq::data::image::{encode_pgm, load_image};
use boq::data::manifest::{load_manifest, Manifest, Role};
use boq::data::synthetic::{generate, write_dataset};
use boq::data::tensorfile::{read_tensor_file, write_tensor_file, DType, TensorTable};
use boq::data::write_atomic;
use boq::model::{InputMode, ModelInput};
use boq::retrieval::{evaluate, format_results, DescriptorIndex, GroundTruth};
use boq::training::{embed_samples, train, TrainOutputs};
use boq::{Error, Tensor};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.boqt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DESCRIPTORS_FILE: &str = "descriptors.boqt";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or inputs. Exit code 1.
    Validation(String),
    /// Failure while running a valid command. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn context(self, what: impl fmt::Display) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension { .. }
            | Error::EmptyInput(_)
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Dataset(_)
            | Error::Manifest { .. }
            | Error::Format { .. } => CliError::Validation(e.to_string()),
            Error::DegenerateInput(_)
            | Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Divergence { .. }
            | Error::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// An output directory under construction.
struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    /// Refuses targets that exist and are not empty directories.
    fn new(target: &Path, cfg: &RunConfig) -> CliResult<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(target)?.next().is_none();
            if !empty {
                return Err(validation(format!("output `{}` already exists and is not empty", target.display())));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        if !parent.is_dir() {
            return Err(validation(format!("output parent `{}` is not a directory", parent.display())));
        }
        let dir = tempfile::Builder::new().prefix(".boq-staging-").tempdir_in(&parent)?;
        fs::write(dir.path().join(CONFIG_FILE), cfg.to_text())?;
        Ok(Staging {
            dir,
            target: target.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn commit(self) -> CliResult<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        let staged = self.dir.keep();
        fs::rename(&staged, &self.target).map_err(|e| {
            let _ = fs::remove_dir_all(&staged);
            CliError::from(e)
        })
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    let p = p.as_deref().ok_or_else(|| validation(format!("`{key}` is not set")))?;
    if !p.exists() {
        return Err(validation(format!("`{key}`: cannot find {}", p.display())));
    }
    Ok(p)
}

fn manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    let path = required(&cfg.manifest, "path.manifest")?;
    load_manifest(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn checkpoint(cfg: &RunConfig) -> CliResult<boq::model::BoqModel> {
    let path = required(&cfg.checkpoint, "path.checkpoint")?;
    load_checkpoint(path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Renders a synthetic dataset with images and manifest under `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let synth = cfg.synthetic_config();
    synth.validate()?;
    let stage = Staging::new(out, cfg)?;
    let dataset = generate(&synth)?;
    let manifest = write_dataset(&dataset, stage.dir.path())?;
    stage.commit()?;
    Ok(format!(
        "records={}\ntrain={}\nquery={}\nreference={}\n",
        manifest.records.len(),
        manifest.with_role(Role::Train).count(),
        manifest.with_role(Role::Query).count(),
        manifest.with_role(Role::Reference).count(),
    ))
}

/// Trains a model on the manifest's training records. A diverged run still
/// publishes its best checkpoint and the metrics written so far.
pub fn train_cmd(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let manifest = manifest(cfg)?;
    let rule = cfg.match_rule(manifest.gt_kind());
    let train_cfg = cfg.train_config(rule);
    train_cfg.loss.validate()?;
    train_cfg.schedule.validate()?;
    let dataset = PlaceDataset::from_manifest(&manifest, &model_cfg.input)?;
    let stage = Staging::new(out, cfg)?;
    let outputs = TrainOutputs {
        checkpoint: Some(stage.path(CHECKPOINT_FILE)),
        metrics_log: Some(stage.path(METRICS_FILE)),
    };
    match train(&model_cfg, &dataset, &train_cfg, &outputs) {
        Ok(outcome) => {
            stage.commit()?;
            let best = &outcome.metrics[outcome.best_epoch];
            let last = outcome.metrics.last().expect("at least one epoch");
            Ok(format!(
                "epochs={}\nbest_epoch={}\nbest_recall@1={:.4}\nfinal_loss={:.6}\n",
                outcome.metrics.len(),
                outcome.best_epoch,
                best.val_recall1,
                last.train_loss
            ))
        }
        Err(e @ Error::Divergence { .. }) => {
            if stage.path(CHECKPOINT_FILE).exists() {
                stage.commit()?;
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Descriptors for every manifest record, stored as f32 keyed by record id.
pub fn embed(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = checkpoint(cfg)?;
    let manifest = manifest(cfg)?;
    let dataset = PlaceDataset::from_manifest(&manifest, &model.config().input)?;
    let stage = Staging::new(out, cfg)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let descriptors = embed_samples(&model, &dataset, &all)?;
    let mut table = TensorTable::new(DType::F32);
    for (s, d) in dataset.samples.iter().zip(descriptors) {
        table.push(s.id.clone(), d);
    }
    write_tensor_file(&stage.path(DESCRIPTORS_FILE), &table)?;
    stage.commit()?;
    Ok(format!(
        "descriptors={}\ndim={}\n",
        table.len(),
        model.config().descriptor_dim()
    ))
}

fn descriptor_table(path: &Path) -> CliResult<BTreeMap<String, Tensor>> {
    let table = read_tensor_file(path).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(table.entries.into_iter().collect())
}

fn pick(table: &BTreeMap<String, Tensor>, id: &str, path: &Path) -> CliResult<Tensor> {
    table
        .get(id)
        .cloned()
        .ok_or_else(|| validation(format!("{}: no descriptor for record `{id}`", path.display())))
}

/// Ranks every manifest query against every manifest reference.
pub fn eval(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let manifest = manifest(cfg)?;
    let qpath = required(&cfg.queries, "path.queries")?;
    let rpath = required(&cfg.references, "path.references")?;
    if cfg.ks.is_empty() || cfg.ks[0] == 0 || cfg.ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(validation("`eval.ks` must be a strictly ascending list of positive integers"));
    }
    let qtable = descriptor_table(qpath)?;
    let rtable = descriptor_table(rpath)?;

    let queries: Vec<_> = manifest.with_role(Role::Query).collect();
    let refs: Vec<_> = manifest.with_role(Role::Reference).collect();
    if queries.is_empty() || refs.is_empty() {
        return Err(validation("manifest needs query and reference records"));
    }
    let qdesc = queries.iter().map(|r| pick(&qtable, &r.id, qpath)).collect::<CliResult<Vec<_>>>()?;
    let rdesc = refs.iter().map(|r| pick(&rtable, &r.id, rpath)).collect::<CliResult<Vec<_>>>()?;
    let rule = cfg.match_rule(manifest.gt_kind());
    let gt = GroundTruth::build(
        &queries.iter().map(|r| r.location).collect::<Vec<_>>(),
        &refs.iter().map(|r| (r.id.clone(), r.location)).collect::<Vec<_>>(),
        rule,
    )?;
    let index = DescriptorIndex::new(refs.iter().map(|r| r.id.clone()).collect(), &rdesc)?;
    let result = evaluate(&index, &qdesc, &gt, &cfg.ks)?;

    let stage = Staging::new(out, cfg)?;
    let qids: Vec<String> = queries.iter().map(|r| r.id.clone()).collect();
    write_atomic(&stage.path(RESULTS_FILE), format_results(&qids, &result).as_bytes())?;
    stage.commit()?;

    let mut summary = format!("queries={}\nexcluded={}\n", result.evaluated, result.excluded);
    for (k, v) in &result.recall {
        let _ = writeln!(summary, "recall@{k}={v:.4}");
    }
    Ok(summary)
}

fn attention_input(path: &Path, mode: &InputMode) -> CliResult<ModelInput> {
    let wrap = |e: Error| CliError::from(e).context(path.display());
    match mode {
        InputMode::Image { height, width, .. } => {
            let img = load_image(path).map_err(wrap)?;
            if img.shape() != [3, *height, *width] {
                return Err(validation(format!(
                    "{}: image is {:?}, model expects [3, {height}, {width}]",
                    path.display(),
                    img.shape()
                )));
            }
            Ok(ModelInput::Image(img))
        }
        InputMode::Features { .. } => {
            let table = read_tensor_file(path).map_err(wrap)?;
            match <[_; 1]>::try_from(table.entries) {
                Ok([(_, t)]) => Ok(ModelInput::Features(t)),
                Err(e) => Err(validation(format!(
                    "{}: feature file holds {} tensors, expected 1",
                    path.display(),
                    e.len()
                ))),
            }
        }
    }
}

fn grid_csv(grid: &Tensor) -> String {
    let cols = grid.shape()[1];
    let mut out = String::new();
    for row in grid.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Cross-attention grids of selected queries as CSV and 8-bit graymaps.
pub fn attn(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let model = checkpoint(cfg)?;
    let path = required(&cfg.image, "path.image")?;
    let input = attention_input(path, &model.config().input)?;
    if cfg.attn_queries.is_empty() {
        return Err(validation("`attn.queries` is empty"));
    }
    let grids = model.export_attention(&input, cfg.attn_block, &cfg.attn_queries)?;
    let stage = Staging::new(out, cfg)?;
    let mut summary = String::new();
    for (q, grid) in cfg.attn_queries.iter().zip(&grids) {
        let stem = format!("block{}_query{q}", cfg.attn_block);
        fs::write(stage.path(&format!("{stem}.csv")), grid_csv(grid))?;
        fs::write(stage.path(&format!("{stem}.pgm")), encode_pgm(grid)?)?;
        let _ = writeln!(summary, "{stem}: {}x{}", grid.shape()[0], grid.shape()[1]);
    }
    stage.commit()?;
    Ok(summary)
}
