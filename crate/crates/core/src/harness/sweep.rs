//! Cartesian grids over config keys.

use rayon::prelude::*;

use crate::error::Result;
use crate::harness::config::{canonical_key, ExperimentConfig};
use crate::harness::experiment::{run_experiment, RunRecord};

/// A named list of values for one config key.
pub type Axis = (String, Vec<String>);

/// Every cell of the grid, first axis varying slowest. All axis keys and
/// values are applied and validated before anything runs.
pub fn expand_grid(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<ExperimentConfig>> {
    let mut cells = vec![base.clone()];
    for (key, values) in axes {
        let key = canonical_key(key)?;
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.set(key, v)?;
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Runs every cell; cells are independent, so they run in parallel and the
/// records come back in grid order.
pub fn grid_sweep(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<RunRecord>> {
    let cells = expand_grid(base, axes)?;
    log::info!("sweep: {} cells", cells.len());
    cells.par_iter().map(run_experiment).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinality_and_order() {
        let base = ExperimentConfig::default();
        let axes = vec![
            ("loss".to_string(), vec!["kl".to_string(), "cosine".to_string()]),
            ("optimizer".to_string(), vec!["sgd".into(), "adam".into(), "adamw".into()]),
        ];
        let cells = expand_grid(&base, &axes).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].loss, "kl");
        assert_eq!(cells[3].loss, "cosine");
        assert_eq!(cells[4].optimizer.to_string(), "adam");
    }

    #[test]
    fn invalid_axis_fails_before_running() {
        let base = ExperimentConfig::default();
        assert!(grid_sweep(&base, &[("bogus".into(), vec!["1".into()])]).is_err());
        assert!(grid_sweep(&base, &[("gamma".into(), vec!["0.1".into(), "7".into()])]).is_err());
    }
}
