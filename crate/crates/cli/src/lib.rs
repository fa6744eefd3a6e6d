//! Command implementations behind the `ssat` binary.
//!
//! Every subcommand is a plain function so tests and scripts can drive
//! the same code paths without spawning a process.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssat_core::attack::{train_attack_with, AttackHistory, AttackSpec, AttackTrainConfig, EpochRecord};
use ssat_core::eval::{
    evaluate_attack, image_to_ppm, perturbation_to_ppm, render_labelmap, run_attack, write_report_csv, MetricsReport,
    Palette, ReportRow,
};
use ssat_core::labels::LabelMap;
use ssat_core::nets::{load_checkpoint, save_checkpoint, ModelKind};
use ssat_core::scenes::{generate_dataset, pnm, Dataset, DatasetManifest, SampleSet, Split};
use ssat_core::tensor::{stack, Tensor};
use ssat_core::util::write_atomic;
use ssat_core::{Error, Model};

pub use config::{load_json, EvalOptions, GridConfig, GridTrain, RunConfig};

/// Error type for every command; maps onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage. Exit code 2.
    Config(String),
    /// Anything that fails while running an experiment. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::from_core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const TARGET_CKPT: &str = "target.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const HISTORY_CSV: &str = "history.csv";
pub const ATTACK_JSON: &str = "attack.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const GRID_CSV: &str = "grid.csv";

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn load_frozen(path: &Path, kind: ModelKind) -> CliResult<Model> {
    let mut m = load_checkpoint(path)?;
    if m.kind() != kind {
        return Err(CliError::Config(format!("{} holds a {:?}, expected {kind:?}", path.display(), m.kind())));
    }
    m.freeze();
    Ok(m)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<DatasetManifest> {
    cfg.scene_config.validate()?;
    Ok(generate_dataset(&cfg.scene_config, cfg.n_train, cfg.n_test, out)?)
}

/// Trains the target on the dataset's train split and saves `target.ckpt`
/// under `out`. Returns the test pixel accuracy.
pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<f32> {
    cfg.target_model.validate()?;
    let ds = Dataset::open(data)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;
    let report = ssat_core::attack::pretrain_target(&cfg.target_model, &train, &test, &cfg.pretrain)?;
    save_checkpoint(&report.model, &out.join(TARGET_CKPT))?;
    Ok(report.test_pixel_acc)
}

/// What an attack run was trained with; written next to the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRecord {
    pub attack_spec: AttackSpec,
    pub train_config: AttackTrainConfig,
}

fn opt(v: Option<f32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_csv(history: &[EpochRecord]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row = |w: &mut csv::Writer<Vec<u8>>, r: [String; 6]| w.write_record(r).map_err(|e| CliError::Runtime(e.to_string()));
    row(
        &mut w,
        ["epoch", "adv_loss", "reg_loss", "total_loss", "manipulated_rate", "preserved_rate"].map(String::from),
    )?;
    for e in history {
        row(
            &mut w,
            [
                e.epoch.to_string(),
                e.adv_loss.to_string(),
                opt(e.reg_loss),
                e.total_loss.to_string(),
                opt(e.manipulated_rate),
                opt(e.preserved_rate),
            ],
        )?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Trains a generator against a frozen target. After every epoch the
/// generator checkpoint and history CSV under `out` are replaced
/// atomically, so an interrupted run keeps its last finished epoch.
pub fn cmd_attack(cfg: &RunConfig, data: &Path, target_ckpt: &Path, out: &Path) -> CliResult<AttackHistory> {
    cfg.train_config.validate()?;
    cfg.generator_model.validate()?;
    let target = load_frozen(target_ckpt, ModelKind::TargetFCN)?;
    cfg.attack_spec.validate(target.num_classes())?;
    let ds = Dataset::open(data)?;
    let train = ds.load_split(Split::Train)?;
    let record = AttackRecord {
        attack_spec: cfg.attack_spec.clone(),
        train_config: cfg.train_config.clone(),
    };
    let json = serde_json::to_vec_pretty(&record).expect("attack record serializes");
    write_atomic(&out.join(ATTACK_JSON), &json)?;
    let gen_path = out.join(GENERATOR_CKPT);
    let hist_path = out.join(HISTORY_CSV);
    let mut seen = Vec::new();
    let (generator, history) = train_attack_with(
        Model::build(cfg.generator_model.clone())?,
        &target,
        &train,
        &cfg.attack_spec,
        &cfg.train_config,
        |model, rec| {
            seen.push(rec.clone());
            save_checkpoint(model, &gen_path)?;
            let bytes = history_csv(&seen).map_err(|e| Error::Contract(e.to_string()))?;
            write_atomic(&hist_path, &bytes)
        },
    )?;
    // Zero epochs still leaves a usable (untrained) generator on disk.
    save_checkpoint(&generator, &gen_path)?;
    write_atomic(&hist_path, &history_csv(&history.epochs)?)?;
    Ok(history)
}

/// Names written into CSV rows in place of full paths.
#[derive(Clone, Debug)]
pub struct EvalNames {
    pub experiment_id: String,
    pub generator: String,
    pub target: String,
    pub dataset: String,
    pub seed: u64,
}

fn report_row(names: &EvalNames, spec: &AttackSpec, xi: f32, lambda0: Option<f32>, r: &MetricsReport) -> ReportRow {
    ReportRow {
        experiment_id: names.experiment_id.clone(),
        generator_ckpt: names.generator.clone(),
        target_ckpt: names.target.clone(),
        dataset: names.dataset.clone(),
        attack_type: format!("{:?}", spec.attack_type),
        success_mode: r.success_mode.name().to_string(),
        xi,
        lambda0,
        manipulated_rate: r.manipulated_rate,
        preserved_rate: Some(r.preserved_rate),
        n_target_px: r.n_target_pixels,
        n_nontarget_px: r.n_nontarget_pixels,
        efficiency_ratio: r.efficiency_ratio,
        seed: names.seed,
    }
}

/// Reads the training record stored beside a generator checkpoint, if any.
pub fn attack_record_for(generator_ckpt: &Path) -> Option<AttackRecord> {
    let path = generator_ckpt.parent()?.join(ATTACK_JSON);
    serde_json::from_slice(&std::fs::read(path).ok()?).ok()
}

pub const PANELS: [&str; 5] = ["clean", "perturbation", "adversarial", "clean_pred", "adv_pred"];

fn slice_sample(t: &Tensor, i: usize) -> CliResult<Tensor> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    Ok(Tensor::new(&s[1..], t.data()[i * per..(i + 1) * per].to_vec())?)
}

/// Writes the five panels for one test image: `sample_<i>_<panel>.ppm`.
pub fn render_sample(
    generator: &Model,
    target: &Model,
    image: &Tensor,
    xi: f32,
    opts: &EvalOptions,
    index: usize,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let run = run_attack(generator, target, &stack(&[image])?, xi)?;
    let clean = LabelMap::argmax_batch(&run.clean_logits)?;
    let adv = LabelMap::argmax_batch(&run.adv_logits)?;
    let bytes = [
        image_to_ppm(image)?,
        perturbation_to_ppm(&slice_sample(&run.perturbation, 0)?, opts.perturbation_gain)?,
        image_to_ppm(&slice_sample(&run.adversarial, 0)?)?,
        render_labelmap(&clean[0], &opts.palette)?,
        render_labelmap(&adv[0], &opts.palette)?,
    ];
    let mut paths = Vec::new();
    for (panel, b) in PANELS.iter().zip(bytes) {
        let p = out.join(format!("sample_{index}_{panel}.ppm"));
        write_atomic(&p, &b)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Evaluates on the test split, writes `metrics.csv` and sample panels.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    generator_ckpt: &Path,
    target_ckpt: &Path,
    data: &Path,
    spec: &AttackSpec,
    xi: f32,
    opts: &EvalOptions,
    names: &EvalNames,
    out: &Path,
) -> CliResult<MetricsReport> {
    let generator = load_frozen(generator_ckpt, ModelKind::GeneratorUNet)?;
    let target = load_frozen(target_ckpt, ModelKind::TargetFCN)?;
    spec.validate(target.num_classes())?;
    if !(xi > 0.0) {
        return Err(CliError::Config(format!("xi must be positive, got {xi}")));
    }
    let test = Dataset::open(data)?.load_split(Split::Test)?;
    let report = evaluate_attack(&generator, &target, &test, spec, xi)?;
    let lambda0 = attack_record_for(generator_ckpt).map(|r| r.train_config.lambda0);
    write_report_csv(&[report_row(names, spec, xi, lambda0, &report)], &out.join(METRICS_CSV))?;
    for &i in &opts.sample_indices {
        let image = test
            .images
            .get(i)
            .ok_or_else(|| CliError::Config(format!("sample index {i} outside the {}-image test split", test.len())))?;
        render_sample(&generator, &target, image, xi, opts, i, out)?;
    }
    Ok(report)
}

/// Evaluates an experiment grid and writes `grid.csv` under `out`.
///
/// Every generator (listed checkpoints plus any trained here) is run
/// against every (target, dataset) pair at every xi. Targets pair with
/// datasets by position. Trained generators use the first pair and are
/// saved under `out/generators/`.
pub fn cmd_sweep(grid: &GridConfig, out: &Path) -> CliResult<Vec<ReportRow>> {
    if grid.targets.len() != grid.datasets.len() || grid.targets.is_empty() {
        return Err(CliError::Config(format!(
            "need one dataset per target, got {} targets and {} datasets",
            grid.targets.len(),
            grid.datasets.len()
        )));
    }
    if grid.xis.is_empty() || grid.xis.iter().any(|&x| !(x > 0.0)) {
        return Err(CliError::Config("xis must be a non-empty list of positive values".into()));
    }
    let targets = grid
        .targets
        .iter()
        .map(|p| load_frozen(p, ModelKind::TargetFCN))
        .collect::<CliResult<Vec<_>>>()?;
    for t in &targets {
        grid.attack_spec.validate(t.num_classes())?;
    }
    let mut tests = Vec::new();
    for d in &grid.datasets {
        tests.push(Dataset::open(d)?.load_split(Split::Test)?);
    }
    let experiment_id = grid.experiment_id.clone().unwrap_or_else(|| "grid".into());

    // (name, model, xi it was trained for, lambda0)
    let mut generators: Vec<(String, Model, Option<f32>, Option<f32>)> = Vec::new();
    for p in &grid.generators {
        let lambda0 = attack_record_for(p).map(|r| r.train_config.lambda0);
        generators.push((display(p), load_frozen(p, ModelKind::GeneratorUNet)?, None, lambda0));
    }
    if let Some(train) = &grid.train {
        let train_set = Dataset::open(&grid.datasets[0])?.load_split(Split::Train)?;
        let gens = train_generators(train, grid, &targets[0], &train_set, out)?;
        generators.extend(gens.into_iter().map(|(n, m, xi)| (n, m, Some(xi), Some(train.train_config.lambda0))));
    }

    let mut rows = Vec::new();
    for (gname, generator, trained_xi, lambda0) in &generators {
        for ((tpath, target), (dpath, test)) in grid.targets.iter().zip(&targets).zip(grid.datasets.iter().zip(&tests)) {
            for &xi in &grid.xis {
                if trained_xi.is_some_and(|t| t != xi) {
                    continue;
                }
                let report = evaluate_attack(generator, target, test, &grid.attack_spec, xi)?;
                let names = EvalNames {
                    experiment_id: experiment_id.clone(),
                    generator: gname.clone(),
                    target: display(tpath),
                    dataset: display(dpath),
                    seed: grid.seed,
                };
                rows.push(report_row(&names, &grid.attack_spec, xi, *lambda0, &report));
            }
        }
    }
    write_report_csv(&rows, &out.join(GRID_CSV))?;
    Ok(rows)
}

fn train_generators(
    train: &GridTrain,
    grid: &GridConfig,
    target: &Model,
    data: &SampleSet,
    out: &Path,
) -> CliResult<Vec<(String, Model, f32)>> {
    let mut gens = Vec::new();
    for &w in &train.widths {
        for &xi in &grid.xis {
            let mcfg = train.generator_model.clone().with_width_multiplier(w);
            let mcfg = ssat_core::nets::ModelConfig { seed: grid.seed, ..mcfg };
            let tcfg = AttackTrainConfig {
                xi,
                seed: grid.seed,
                ..train.train_config.clone()
            };
            tcfg.validate()?;
            let (model, _) = ssat_core::attack::train_attack(Model::build(mcfg)?, target, data, &grid.attack_spec, &tcfg)?;
            let name = format!("generators/w{w}_xi{xi}.ckpt");
            save_checkpoint(&model, &out.join(&name))?;
            gens.push((name, model, xi));
        }
    }
    Ok(gens)
}

/// Colours a PGM label map into a PPM.
pub fn cmd_render(labels: &Path, palette: &Palette, out: &Path) -> CliResult<()> {
    let bytes = std::fs::read(labels).map_err(|e| CliError::Runtime(format!("{}: {e}", labels.display())))?;
    let raster = pnm::decode(&bytes, labels)?;
    if raster.channels != 1 {
        return Err(CliError::Config(format!("{} is not a grayscale PGM", labels.display())));
    }
    let map = LabelMap::new(raster.height, raster.width, raster.data.clone())?;
    write_atomic(out, &render_labelmap(&map, palette)?)?;
    Ok(())
}

/// Output locations of a full recipe, relative to its output directory.
#[derive(Clone, Debug)]
pub struct RecipeOutputs {
    pub root: PathBuf,
    pub test_pixel_acc: f32,
    pub history: AttackHistory,
    pub report: MetricsReport,
}

impl RecipeOutputs {
    /// Every artifact the recipe writes, for byte comparison.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        let r = &self.root;
        let mut v = vec![
            r.join("data").join(ssat_core::scenes::MANIFEST_FILE),
            r.join("target").join(TARGET_CKPT),
            r.join("attack").join(GENERATOR_CKPT),
            r.join("attack").join(HISTORY_CSV),
            r.join("eval").join(METRICS_CSV),
        ];
        let ckpts: Vec<PathBuf> = v.iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).cloned().collect();
        v.extend(ckpts.iter().map(|p| ssat_core::nets::sidecar_path(p)));
        v
    }
}

/// Runs gen-data, pretrain, attack and eval from one config into
/// `cfg.output_dir/{data,target,attack,eval}`.
pub fn run_recipe(cfg: &RunConfig) -> CliResult<RecipeOutputs> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    let (data, tdir, adir, edir) = (root.join("data"), root.join("target"), root.join("attack"), root.join("eval"));
    cmd_gen_data(&cfg, &data)?;
    let acc = cmd_pretrain(&cfg, &data, &tdir)?;
    let history = cmd_attack(&cfg, &data, &tdir.join(TARGET_CKPT), &adir)?;
    let names = EvalNames {
        experiment_id: "recipe".into(),
        generator: format!("attack/{GENERATOR_CKPT}"),
        target: format!("target/{TARGET_CKPT}"),
        dataset: "data".into(),
        seed: cfg.seed.unwrap_or(cfg.train_config.seed),
    };
    let report = cmd_eval(
        &adir.join(GENERATOR_CKPT),
        &tdir.join(TARGET_CKPT),
        &data,
        &cfg.attack_spec,
        cfg.eval_xi(),
        &cfg.eval,
        &names,
        &edir,
    )?;
    Ok(RecipeOutputs {
        root,
        test_pixel_acc: acc,
        history,
        report,
    })
}
