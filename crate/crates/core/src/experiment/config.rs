//! Experiment files.
//!
//! ```toml
//! [defaults]
//! steps = 100
//! repetitions = 5
//! optimizer = { lr = 0.01 }
//!
//! [cells.sgd-uniform]
//! optimizer = { kind = "sgd" }
//! scheme = "uniform"
//!
//! [cells.sgd-gradnorm]
//! optimizer = { kind = "sgd" }
//! scheme = "gradnorm"
//! ```
//!
//! Each cell is the `defaults` table with the cell's keys merged on top
//! (nested tables merge key by key). Cells run in file order.

use serde::Deserialize;
use toml::{Table, Value};

use super::{RunConfig, SchemeKind};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentFile {
    pub cells: Vec<(String, RunConfig)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    #[serde(default)]
    defaults: Table,
    #[serde(default)]
    cells: Table,
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn to_config(table: Table, what: &str) -> Result<RunConfig> {
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{what}: {}", e.message())))?;
    cfg.validate().map_err(|e| Error::Config(format!("{what}: {e}")))?;
    Ok(cfg)
}

/// Parses an experiment file. A file without cells yields one cell named
/// `default` built from the defaults alone.
pub fn parse_experiment(text: &str) -> Result<ExperimentFile> {
    let raw: RawFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    if raw.cells.is_empty() {
        return Ok(ExperimentFile {
            cells: vec![("default".into(), to_config(raw.defaults, "defaults")?)],
        });
    }
    let cells = raw
        .cells
        .iter()
        .map(|(name, v)| {
            let Value::Table(over) = v else {
                return Err(Error::Config(format!("cell `{name}` must be a table")));
            };
            let mut t = raw.defaults.clone();
            merge(&mut t, over);
            Ok((name.clone(), to_config(t, &format!("cell `{name}`"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentFile { cells })
}

/// The loss-curve grid: SGD and momentum under uniform, gradient-norm and
/// midpoint sampling; RMSProp and ADAM under uniform and gradient-norm.
pub fn fig2_cells(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let plain = [SchemeKind::Uniform, SchemeKind::GradNorm, SchemeKind::Mix(0.5)];
    let adaptive = [SchemeKind::Uniform, SchemeKind::GradNorm];
    let mut cells = Vec::new();
    for kind in OptimizerKind::ALL {
        let schemes: &[SchemeKind] = match kind {
            OptimizerKind::Sgd | OptimizerKind::Momentum => &plain,
            OptimizerKind::RmsProp | OptimizerKind::Adam => &adaptive,
        };
        for &scheme in schemes {
            let cfg = RunConfig {
                optimizer: OptimizerConfig {
                    kind,
                    ..base.optimizer.clone()
                },
                scheme,
                ..base.clone()
            };
            cells.push((format!("{kind}-{}", scheme.slug()), cfg));
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::DatasetSpec;
    use crate::optim::SecondMoment;

    #[test]
    fn cells_merge_over_defaults() {
        let f = parse_experiment(
            r#"
            [defaults]
            steps = 40
            seed = 9
            optimizer = { lr = 0.05, kind = "momentum" }
            dataset = { kind = "blobs", n = 10, dim = 2, separation = 1.0 }
            model = "mlp:2-3-2"

            [cells.a]
            scheme = "gradnorm"

            [cells.b]
            scheme = "mix:0.25"
            optimizer = { kind = "adam", mode = "paper-scalar" }
            metric = { enabled = true, m = 4 }
            "#,
        )
        .unwrap();
        assert_eq!(f.cells.len(), 2);
        let (na, a) = &f.cells[0];
        let (nb, b) = &f.cells[1];
        assert_eq!((na.as_str(), nb.as_str()), ("a", "b"));
        assert_eq!((a.steps, a.seed, a.scheme), (40, 9, SchemeKind::GradNorm));
        assert_eq!(a.optimizer.kind, OptimizerKind::Momentum);
        assert_eq!(a.dataset, DatasetSpec::Blobs { n: 10, dim: 2, separation: 1.0 });
        assert_eq!(b.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(b.optimizer.lr, 0.05);
        assert_eq!(b.optimizer.mode, SecondMoment::PaperScalar);
        assert_eq!(b.scheme, SchemeKind::Mix(0.25));
        assert!(b.metric.enabled && b.metric.m == 4 && b.metric.cadence == 1);
        assert_eq!(a.batch, 5);
    }

    #[test]
    fn empty_file_is_the_default_protocol() {
        let f = parse_experiment("").unwrap();
        assert_eq!(f.cells, vec![("default".to_string(), RunConfig::default())]);
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "stepz = 3",
            "[defaults]\nstepz = 3",
            "[defaults]\nscheme = \"mix:2\"",
            "[defaults]\nbatch = 0",
            "[cells]\na = 3",
            "[defaults]\noptimizer = { kind = \"lbfgs\" }",
            "[defaults]\noptimizer = { beta1 = 1.0 }",
        ] {
            assert!(parse_experiment(text).is_err(), "{text}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig {
            scheme: SchemeKind::Mix(0.5),
            ..RunConfig::default()
        };
        #[derive(serde::Serialize)]
        struct Wrapper<'a> {
            defaults: &'a RunConfig,
        }
        let text = toml::to_string(&Wrapper { defaults: &cfg }).unwrap();
        let back = parse_experiment(&text).unwrap();
        assert_eq!(back.cells[0].1, cfg);
    }

    #[test]
    fn fig2_grid() {
        let cells = fig2_cells(&RunConfig::default());
        let names: Vec<&str> = cells.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "sgd-uniform",
                "sgd-gradnorm",
                "sgd-mix0.5",
                "momentum-uniform",
                "momentum-gradnorm",
                "momentum-mix0.5",
                "rmsprop-uniform",
                "rmsprop-gradnorm",
                "adam-uniform",
                "adam-gradnorm",
            ]
        );
        assert!(cells.iter().all(|(_, c)| c.optimizer.lr == 0.01 && c.batch == 5));
    }
}
