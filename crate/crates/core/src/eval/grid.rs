use super::{evaluate_attack, MetricsReport};
use crate::attack::{train_attack, AttackSpec, AttackTrainConfig};
use crate::error::{Error, Result};
use crate::nets::{Model, ModelConfig};
use crate::scenes::SampleSet;

/// Generators crossed with (target, dataset) pairs. `targets[j]` is
/// evaluated on `datasets[j]`.
#[derive(Clone, Debug)]
pub struct ExperimentGrid {
    pub generators: Vec<(String, Model)>,
    pub targets: Vec<(String, Model)>,
    pub datasets: Vec<(String, SampleSet)>,
    pub spec: AttackSpec,
    pub xi: f32,
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub generator: String,
    pub target: String,
    pub dataset: String,
    /// A failed cell keeps its error message; other cells still run.
    pub result: std::result::Result<MetricsReport, String>,
}

/// Evaluates every generator against every target, row-major by generator.
pub fn cross_evaluate(grid: &ExperimentGrid) -> Result<Vec<GridCell>> {
    if grid.targets.len() != grid.datasets.len() {
        return Err(Error::config(format!(
            "{} targets but {} datasets; each target needs its dataset",
            grid.targets.len(),
            grid.datasets.len()
        )));
    }
    let mut cells = Vec::with_capacity(grid.generators.len() * grid.targets.len());
    for (gname, gen) in &grid.generators {
        for ((tname, target), (dname, data)) in grid.targets.iter().zip(&grid.datasets) {
            cells.push(GridCell {
                generator: gname.clone(),
                target: tname.clone(),
                dataset: dname.clone(),
                result: evaluate_attack(gen, target, data, &grid.spec, grid.xi).map_err(|e| e.to_string()),
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub xi: f32,
    pub generator: Model,
    pub report: MetricsReport,
}

/// Trains and evaluates one attack per `xi`, each from the same seed.
pub fn sweep_xi(
    generator_cfg: &ModelConfig,
    target: &Model,
    train: &SampleSet,
    test: &SampleSet,
    spec: &AttackSpec,
    cfg: &AttackTrainConfig,
    xis: &[f32],
) -> Result<Vec<SweepRow>> {
    if xis.iter().any(|&x| !(x > 0.0)) || xis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("xi values must be positive and strictly ascending"));
    }
    xis.iter()
        .map(|&xi| {
            let cfg = AttackTrainConfig { xi, ..cfg.clone() };
            let (generator, _) = train_attack(Model::build(generator_cfg.clone())?, target, train, spec, &cfg)?;
            let report = evaluate_attack(&generator, target, test, spec, xi)?;
            Ok(SweepRow { xi, generator, report })
        })
        .collect()
}
