//! Experiment configuration: one JSON file describes the feature map, the
//! generator, the target, and the mode-specific settings.

use anyhow::{bail, Context, Result};
use paramflow::flow::{FlowConfig, FunctionalSpec, ScalarMap};
use paramflow::generator::Generator;
use paramflow::rkhs::{FeatureMap, FeatureMapSpec, RkhsFunction};
use paramflow::targets::MixtureTarget;
use paramflow::trainer::GanConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flow,
    Gan,
    Functional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub constant: bool,
    /// Seed for the parameter initialization.
    pub init_seed: u64,
}

impl GeneratorConfig {
    pub fn build(&self) -> Result<Generator> {
        let gen = if self.constant {
            Generator::constant(self.output_dim)?
        } else {
            Generator::mlp(self.latent_dim, &self.hidden, self.output_dim)?
        };
        Ok(gen)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetConfig {
    EightGaussians {
        radius: f64,
        sigma: f64,
        seed: u64,
    },
    Mixture {
        means: Vec<Vec<f64>>,
        sigma: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        seed: u64,
    },
}

impl TargetConfig {
    pub fn build(&self) -> Result<MixtureTarget> {
        match self {
            TargetConfig::EightGaussians {
                radius,
                sigma,
                seed,
            } => Ok(paramflow::targets::eight_gaussians(*radius, *sigma, *seed)?),
            TargetConfig::Mixture {
                means,
                sigma,
                weights,
                seed,
            } => {
                if means.is_empty() {
                    bail!("mixture target needs at least one mean");
                }
                let d = means[0].len();
                let k = means.len();
                let mut m = ndarray::Array2::<f64>::zeros((k, d));
                for (i, row) in means.iter().enumerate() {
                    if row.len() != d {
                        bail!("mixture means must share a dimension");
                    }
                    for (j, v) in row.iter().enumerate() {
                        m[[i, j]] = *v;
                    }
                }
                let w = match weights {
                    Some(w) => ndarray::Array1::from_vec(w.clone()),
                    None => ndarray::Array1::from_elem(k, 1.0 / k as f64),
                };
                Ok(MixtureTarget::new(m, *sigma, w, *seed)?)
            }
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TargetConfig::EightGaussians { seed, .. } => *seed,
            TargetConfig::Mixture { seed, .. } => *seed,
        }
    }
}

/// Functional description for `functional` mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum FunctionalConfig {
    /// Uses the experiment's target block as the fixed distribution.
    MmdToTarget {
        target_batch: usize,
    },
    Potential {
        weights: Vec<f64>,
    },
    Interaction {
        f: Vec<f64>,
        g: Vec<f64>,
    },
    Entropy {
        map: ScalarMap,
        grid: GridConfig,
    },
}

/// Uniform quadrature grid over a box (dimension <= 2 in practice).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridConfig {
    pub fn nodes_and_weights(&self) -> Result<(ndarray::Array2<f64>, ndarray::Array1<f64>)> {
        let d = self.min.len();
        if self.max.len() != d || self.n.len() != d || d == 0 {
            bail!("grid min/max/n must share a (positive) dimension");
        }
        let mut total = 1usize;
        let mut cell = 1.0f64;
        for i in 0..d {
            if self.n[i] < 1 || self.max[i] <= self.min[i] {
                bail!("grid axis {i} is empty or inverted");
            }
            total = total.checked_mul(self.n[i]).context("grid too large")?;
            cell *= (self.max[i] - self.min[i]) / self.n[i] as f64;
        }
        let mut nodes = ndarray::Array2::<f64>::zeros((total, d));
        for flat in 0..total {
            let mut rem = flat;
            for i in 0..d {
                let idx = rem % self.n[i];
                rem /= self.n[i];
                // cell midpoints
                let h = (self.max[i] - self.min[i]) / self.n[i] as f64;
                nodes[[flat, i]] = self.min[i] + (idx as f64 + 0.5) * h;
            }
        }
        Ok((nodes, ndarray::Array1::from_elem(total, cell)))
    }
}

impl FunctionalConfig {
    pub fn build(
        &self,
        map: &FeatureMap,
        target: &MixtureTarget,
        seed: u64,
    ) -> Result<FunctionalSpec> {
        match self {
            FunctionalConfig::MmdToTarget { target_batch } => {
                let mut sampler = target.sampler_with_seed(seed);
                let batch = sampler.sample(*target_batch)?;
                let mu = map.mean_embedding(&batch.view())?;
                Ok(FunctionalSpec::MmdToTarget { target_mu: mu })
            }
            FunctionalConfig::Potential { weights } => Ok(FunctionalSpec::Potential {
                v: RkhsFunction::new(ndarray::Array1::from_vec(weights.clone())),
            }),
            FunctionalConfig::Interaction { f, g } => Ok(FunctionalSpec::Interaction {
                f: RkhsFunction::new(ndarray::Array1::from_vec(f.clone())),
                g: RkhsFunction::new(ndarray::Array1::from_vec(g.clone())),
            }),
            FunctionalConfig::Entropy { map: smap, grid } => {
                let (nodes, weights) = grid.nodes_and_weights()?;
                Ok(FunctionalSpec::Entropy {
                    map: *smap,
                    nodes,
                    weights,
                })
            }
        }
    }
}

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Master seed; mode configs hold their own seeds, this one drives
    /// auxiliary streams (scatter sampling and the like).
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub feature_map: FeatureMapSpec,
    pub generator: GeneratorConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub gan: Option<GanConfig>,
    #[serde(default)]
    pub functional: Option<FunctionalConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Flow => {
                let flow = self
                    .flow
                    .as_ref()
                    .context("flow mode needs a 'flow' block")?;
                flow.validate()?;
            }
            Mode::Gan => {
                let gan = self.gan.as_ref().context("gan mode needs a 'gan' block")?;
                gan.validate()?;
            }
            Mode::Functional => {
                let flow = self
                    .flow
                    .as_ref()
                    .context("functional mode needs a 'flow' block")?;
                flow.validate()?;
                self.functional
                    .as_ref()
                    .context("functional mode needs a 'functional' block")?;
            }
        }
        if self.generator.output_dim != self.feature_map.input_dim {
            bail!(
                "generator output dimension {} must match the feature map input dimension {}",
                self.generator.output_dim,
                self.feature_map.input_dim
            );
        }
        Ok(())
    }
}
