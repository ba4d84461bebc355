//! Run configuration: one JSON file describing the plant, origins, boxes,
//! stage settings, seed and output names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::SurfaceConfig;
use crate::error::{Error, Result};
use crate::library::{ExpansionConfig, TrioConfig};
use crate::plant::PlantSpec;
use crate::runtime::{DispatchPolicy, Fallback};
use crate::search::BestControlConfig;
use crate::spaces::OutputBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub start_state: Vec<f64>,
    pub waypoints: Vec<OutputBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub inputs: Vec<Vec<f64>>,
    #[serde(default)]
    pub policy: DispatchPolicy,
    #[serde(default)]
    pub fallback: Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub mc_samples: usize,
    /// Grid points per axis; skipped when absent or for more than 3 inputs.
    pub grid_points: Option<usize>,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            mc_samples: 10_000,
            grid_points: None,
        }
    }
}

/// Output file names, relative to the `--out` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputNames {
    pub library: String,
    pub trace: String,
    pub audit: String,
    /// Points per angular axis in exported radius grids.
    pub export_grid_points: usize,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            library: "library.json".into(),
            trace: "trace.csv".into(),
            audit: "audit.csv".into(),
            export_grid_points: 181,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Required: there is no clock-based default.
    pub seed: Option<u64>,
    pub plant: PlantSpec,
    #[serde(default)]
    pub origins: Vec<Vec<f64>>,
    /// One box shared by every origin, or one per origin.
    #[serde(default)]
    pub boxes: Vec<OutputBox>,
    #[serde(default)]
    pub search: BestControlConfig,
    #[serde(default)]
    pub surface: SurfaceConfig,
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    #[serde(default)]
    pub expansion: Option<ExpansionConfig>,
    #[serde(default)]
    pub trajectory: Option<TrajectorySection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default)]
    pub outputs: OutputNames,
    /// Existing library read by `expand`, `simulate`, `audit` and `export`;
    /// defaults to the library output in the `--out` directory.
    #[serde(default)]
    pub library: Option<PathBuf>,
    /// Overall plant-evaluation budget; unlimited when absent.
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn trio(&self) -> TrioConfig {
        TrioConfig {
            search: self.search.clone(),
            surface: self.surface.clone(),
            scales: self.scales.clone(),
            seed: self.seed(),
        }
    }

    pub fn expansion(&self) -> ExpansionConfig {
        let mut e = self.expansion.clone().unwrap_or_default();
        e.seed ^= self.seed();
        e
    }

    pub fn validate(&self) -> Vec<String> {
        let mut diags = Vec::new();
        if self.seed.is_none() {
            diags.push("seed: missing (a master seed is required)".to_string());
        }
        let plant = match self.plant.build() {
            Ok(p) => p,
            Err(e) => {
                diags.push(format!("plant: {e}"));
                return diags;
            }
        };
        let sig = plant.signature();
        let check_point = |diags: &mut Vec<String>, at: &str, x: &[f64], strict: bool| {
            if x.len() != sig.n_in {
                diags.push(format!("{at}: expected {} components, got {}", sig.n_in, x.len()));
                return;
            }
            for (i, v) in x.iter().enumerate() {
                let (lo, hi) = (sig.input_domain.lo[i], sig.input_domain.hi[i]);
                let outside = if strict { !(lo < *v && *v < hi) } else { !(lo <= *v && *v <= hi) };
                if outside {
                    let domain = if strict { format!("({lo}, {hi})") } else { format!("[{lo}, {hi}]") };
                    diags.push(format!("{at}[{i}]: {v} outside the input domain {domain}"));
                }
            }
        };
        for (k, o) in self.origins.iter().enumerate() {
            check_point(&mut diags, &format!("origins[{k}]"), o, true);
        }
        let check_box = |diags: &mut Vec<String>, at: &str, b: &OutputBox| {
            if b.lo.len() != sig.n_out || b.hi.len() != sig.n_out || b.target.len() != sig.n_out {
                diags.push(format!("{at}: expected {} output components", sig.n_out));
            } else if let Err(e) = OutputBox::new(b.lo.clone(), b.hi.clone(), b.target.clone()) {
                diags.push(format!("{at}: {e}"));
            }
        };
        if !self.boxes.is_empty() && self.boxes.len() != 1 && self.boxes.len() != self.origins.len() {
            diags.push(format!(
                "boxes: expected 1 or {} boxes, got {}",
                self.origins.len(),
                self.boxes.len()
            ));
        }
        if !self.origins.is_empty() && self.boxes.is_empty() {
            diags.push("boxes: missing (origins need an output box)".into());
        }
        for (k, b) in self.boxes.iter().enumerate() {
            check_box(&mut diags, &format!("boxes[{k}]"), b);
        }
        if let Some(w) = &self.search.weights {
            if w.len() != sig.n_out {
                diags.push(format!("search.weights: expected {} components, got {}", sig.n_out, w.len()));
            }
        }
        if self.search.budget == 0 {
            diags.push("search.budget: must be positive".into());
        }
        if !(self.surface.margin > 0.0 && self.surface.margin <= 1.0) {
            diags.push(format!("surface.margin: {} outside (0, 1]", self.surface.margin));
        }
        if self.surface.stabilization_window < 2 {
            diags.push("surface.stabilization_window: must be at least 2".into());
        }
        if !(self.surface.tol > 0.0) {
            diags.push("surface.tol: must be positive".into());
        }
        if self.surface.max_batches == 0 {
            diags.push("surface.max_batches: must be positive".into());
        }
        if let Some(s) = &self.scales {
            if s.len() != sig.n_in {
                diags.push(format!("scales: expected {} components, got {}", sig.n_in, s.len()));
            }
            for (i, v) in s.iter().enumerate() {
                if !(*v > 0.0 && v.is_finite()) {
                    diags.push(format!("scales[{i}]: must be positive"));
                }
            }
        }
        if let Some(t) = &self.trajectory {
            if sig.n_in != sig.n_out {
                diags.push(format!(
                    "trajectory: state feedback needs n_out = n_in (plant has {} inputs, {} outputs)",
                    sig.n_in, sig.n_out
                ));
            } else {
                check_point(&mut diags, "trajectory.start_state", &t.start_state, true);
                if t.waypoints.is_empty() {
                    diags.push("trajectory.waypoints: empty".into());
                }
                for (k, b) in t.waypoints.iter().enumerate() {
                    check_box(&mut diags, &format!("trajectory.waypoints[{k}]"), b);
                }
            }
        }
        if let Some(s) = &self.simulate {
            if s.inputs.is_empty() {
                diags.push("simulate.inputs: empty".into());
            }
            for (k, x) in s.inputs.iter().enumerate() {
                check_point(&mut diags, &format!("simulate.inputs[{k}]"), x, false);
            }
        }
        if self.audit.mc_samples == 0 {
            diags.push("audit.mc_samples: must be positive".into());
        }
        if self.workers == Some(0) {
            diags.push("workers: must be positive".into());
        }
        diags
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
        path: path.display().to_string(),
        source,
    })
}

fn parse(text: &str) -> std::result::Result<RunConfig, String> {
    serde_json::from_str(text).map_err(|e| format!("config: {e}"))
}

/// Every problem with the file; an empty list means it is runnable.
pub fn validate_config(path: &Path) -> Result<Vec<String>> {
    Ok(match parse(&read(path)?) {
        Ok(cfg) => cfg.validate(),
        Err(d) => vec![d],
    })
}

/// Reads, applies the seed override, and validates.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = parse(&read(path)?).map_err(|d| Error::ConfigInvalid(vec![d]))?;
    if seed_override.is_some() {
        cfg.seed = seed_override;
    }
    let diags = cfg.validate();
    if diags.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::ConfigInvalid(diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AFFINE: &str = r#"{
        "seed": 7,
        "plant": {"kind": "affine", "a": [[1.0]], "b": [[1.0]], "bias": [0.0],
                  "input_domain": {"lo": [-10.0], "hi": [10.0]},
                  "control_domain": {"lo": [-10.0], "hi": [10.0]}},
        "origins": [[2.0]],
        "boxes": [{"lo": [-1.0], "hi": [1.0], "target": [0.0]}]
    }"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn valid_config_has_no_diagnostics() {
        let (_d, p) = write(AFFINE);
        assert_eq!(validate_config(&p).unwrap(), Vec::<String>::new());
        let cfg = load_config(&p, Some(11)).unwrap();
        assert_eq!(cfg.seed, Some(11));
    }

    #[test]
    fn missing_seed_is_named() {
        let (_d, p) = write(&AFFINE.replace("\"seed\": 7,", ""));
        let d = validate_config(&p).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("seed"));
        assert!(load_config(&p, Some(3)).is_ok());
    }

    #[test]
    fn origin_outside_domain_names_component() {
        let (_d, p) = write(&AFFINE.replace("[[2.0]]", "[[12.0]]"));
        let d = validate_config(&p).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("origins[0][0]"), "{d:?}");
    }

    #[test]
    fn all_problems_reported() {
        let text = AFFINE
            .replace("\"seed\": 7,", "")
            .replace("[[2.0]]", "[[2.0, 1.0]]")
            .replace("\"target\": [0.0]", "\"target\": [0.0, 1.0]");
        let (_d, p) = write(&text);
        let d = validate_config(&p).unwrap();
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(matches!(load_config(&p, None), Err(Error::ConfigInvalid(v)) if v.len() == 3));
    }

    #[test]
    fn unreadable_and_malformed() {
        assert!(matches!(
            validate_config(Path::new("/nonexistent/cfg.json")),
            Err(Error::FileUnreadable { .. })
        ));
        let (_d, p) = write("{not json");
        assert_eq!(validate_config(&p).unwrap().len(), 1);
    }
}
