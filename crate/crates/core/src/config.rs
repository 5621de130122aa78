//! TOML experiment configuration.
//!
//! ```toml
//! [graph]
//! kind = ["identity", "ring", "lazy_complete", "complete"]  # or a single string
//! m = 10
//! self_weight = 0.9          # lazy_complete only
//!
//! [loss]
//! kind = "logistic"          # logistic | ridge | bounded_nonconvex
//! mu = 0.5                   # ridge only (0 allowed)
//! projection_radius = 10.0   # ridge default 10
//!
//! [algo]
//! variant = "B"              # A | B
//! T = 300
//! eta = 0.03                 # or c = 0.5 for eta_t = c/(t+1)
//! seed = 1
//! projected = false
//! init = [0.0, 0.0]          # optional, zeros otherwise
//!
//! [data]
//! n = 1
//! dimension = 2              # optional when means are given
//! mean0 = [1.0, -1.0]
//! mean1 = [-1.0, 1.0]
//! flip_prob = 0.1
//! class_prob = 0.5
//! seed = 7
//!
//! [stability]
//! num_mc = 200
//! pair_subset_size = 10      # optional, full grid otherwise
//! modes = ["per_agent_mean", "worst_model"]
//!
//! [genexp]
//! reps = 30
//! runs = 2
//! test_size = 500
//!
//! [bounds]                   # optional overrides
//! L = 1.0
//! beta = 0.25
//! sigma = 0.5
//! init_gap = 0.1
//! c = 0.5
//!
//! [output]
//! directory = "out"          # relative to this file
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::datagen::MixtureSpec;
use crate::engine::{DsgdConfig, Stepsize, Variant};
use crate::losses::{LossKind, LossModel};
use crate::stability::{GenExperiment, MonteCarlo, PairSelection, StabilityMode};
use crate::topology::GraphKind;
use crate::{Error, Result};

const DEFAULT_RADIUS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub kind: OneOrMany,
    pub m: usize,
    pub self_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: String,
    pub mu: Option<f64>,
    pub projection_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub eta: Option<f64>,
    pub c: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub projected: bool,
    pub init: Option<Vec<f64>>,
}

fn default_variant() -> String {
    "B".into()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub dimension: Option<usize>,
    pub mean0: Option<Vec<f64>>,
    pub mean1: Option<Vec<f64>>,
    pub flip_prob: Option<f64>,
    pub class_prob: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub num_mc: usize,
    pub pair_subset_size: Option<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
}

fn default_modes() -> Vec<String> {
    StabilityMode::ALL.iter().map(|m| m.name().to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenexpSection {
    pub reps: usize,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn one() -> usize {
    1
}

fn default_test_size() -> usize {
    500
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(rename = "L")]
    pub lipschitz: Option<f64>,
    pub beta: Option<f64>,
    pub sigma: Option<f64>,
    pub init_gap: Option<f64>,
    pub c: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSection,
    pub loss: LossSection,
    pub algo: AlgoSection,
    pub data: DataSection,
    pub stability: Option<StabilitySection>,
    pub genexp: Option<GenexpSection>,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::invalid("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every section that does not depend on the command being run.
    pub fn validate(&self) -> Result<()> {
        self.graphs()?;
        self.loss_model()?;
        self.dsgd()?;
        self.mixture()?.validate()?;
        if self.data.n == 0 {
            return Err(Error::invalid("data.n", "must be >= 1"));
        }
        if let Some(s) = &self.stability {
            self.modes_of(s)?;
        }
        Ok(())
    }

    pub fn graphs(&self) -> Result<Vec<GraphKind>> {
        let names = match &self.graph.kind {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        };
        if names.is_empty() {
            return Err(Error::invalid("graph.kind", "no graph listed"));
        }
        let kinds: Vec<GraphKind> = names
            .iter()
            .map(|n| GraphKind::parse(n, self.graph.self_weight))
            .collect::<Result<_>>()?;
        for k in &kinds {
            k.build(self.graph.m)?;
        }
        Ok(kinds)
    }

    pub fn loss_model(&self) -> Result<LossModel> {
        let radius = self.loss.projection_radius;
        match self.loss.kind.as_str() {
            "logistic" => LossModel::new(LossKind::Logistic, radius),
            "bounded_nonconvex" => LossModel::new(LossKind::BoundedNonconvex, radius),
            "ridge" => {
                let mu = self.loss.mu.ok_or(Error::MissingConstant("loss.mu"))?;
                LossModel::ridge(mu, radius.unwrap_or(DEFAULT_RADIUS))
            }
            other => Err(Error::invalid(
                "loss.kind",
                format!("unknown loss kind `{other}`"),
            )),
        }
    }

    pub fn stepsize(&self) -> Result<Stepsize> {
        let s = match (self.algo.eta, self.algo.c) {
            (Some(eta), None) => Stepsize::Constant(eta),
            (None, Some(c)) => Stepsize::Decaying { c },
            _ => {
                return Err(Error::invalid(
                    "algo.eta",
                    "exactly one of algo.eta and algo.c must be set",
                ))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dsgd(&self) -> Result<DsgdConfig> {
        let variant = match self.algo.variant.as_str() {
            "A" | "a" => Variant::A,
            "B" | "b" => Variant::B,
            other => {
                return Err(Error::invalid(
                    "algo.variant",
                    format!("unknown variant `{other}`"),
                ))
            }
        };
        let mut config = DsgdConfig::new(variant, self.algo.iterations, self.stepsize()?, self.algo.seed);
        config.projected = self.algo.projected;
        config.init = self.algo.init.clone();
        if config.projected && self.loss_model()?.projection_radius().is_none() {
            return Err(Error::MissingConstant("loss.projection_radius"));
        }
        let d = self.mixture()?.dimension();
        config.initial(d)?;
        Ok(config)
    }

    pub fn mixture(&self) -> Result<MixtureSpec> {
        let d = self.data.dimension;
        let mut spec = match (&self.data.mean0, &self.data.mean1) {
            (Some(m0), Some(m1)) => MixtureSpec {
                mean0: m0.clone(),
                mean1: m1.clone(),
                ..Default::default()
            },
            (None, None) => MixtureSpec::with_dimension(d.unwrap_or(2)),
            _ => {
                return Err(Error::invalid(
                    "data.mean0",
                    "mean0 and mean1 must be given together",
                ))
            }
        };
        if let Some(d) = d {
            if d != spec.dimension() {
                return Err(Error::invalid(
                    "data.dimension",
                    format!("{d} does not match the {}-dimensional means", spec.dimension()),
                ));
            }
        }
        if let Some(p) = self.data.flip_prob {
            spec.flip_prob = p;
        }
        if let Some(p) = self.data.class_prob {
            spec.class_prob = p;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn modes_of(&self, s: &StabilitySection) -> Result<Vec<StabilityMode>> {
        if s.modes.is_empty() {
            return Err(Error::invalid("stability.modes", "no mode listed"));
        }
        s.modes.iter().map(|m| m.parse()).collect()
    }

    pub fn stability_setup(&self) -> Result<(MonteCarlo, PairSelection, Vec<StabilityMode>)> {
        let s = self
            .stability
            .as_ref()
            .ok_or_else(|| Error::invalid("stability", "section missing"))?;
        if s.num_mc == 0 {
            return Err(Error::invalid("stability.num_mc", "must be >= 1"));
        }
        let pairs = match s.pair_subset_size {
            None => PairSelection::Full,
            Some(0) => return Err(Error::invalid("stability.pair_subset_size", "must be >= 1")),
            Some(k) if k > self.graph.m * self.data.n => {
                return Err(Error::invalid(
                    "stability.pair_subset_size",
                    format!("{k} exceeds m*n = {}", self.graph.m * self.data.n),
                ))
            }
            Some(k) => PairSelection::Sampled(k),
        };
        let mc = MonteCarlo {
            spec: self.mixture()?,
            n: self.data.n,
            algo: self.dsgd()?,
            num_mc: s.num_mc,
            data_seed: self.data.seed,
        };
        Ok((mc, pairs, self.modes_of(s)?))
    }

    pub fn genexp_setup(&self) -> Result<GenExperiment> {
        let g = self
            .genexp
            .as_ref()
            .ok_or_else(|| Error::invalid("genexp", "section missing"))?;
        for (name, v) in [("genexp.reps", g.reps), ("genexp.runs", g.runs), ("genexp.test_size", g.test_size)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        Ok(GenExperiment {
            spec: self.mixture()?,
            n: self.data.n,
            algo: self.dsgd()?,
            reps: g.reps,
            runs: g.runs,
            test_size: g.test_size,
            data_seed: self.data.seed,
        })
    }

    /// Output directory resolved against the config file's directory.
    pub fn output_dir(&self, config_path: &Path) -> PathBuf {
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        match &self.output.directory {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => base.join(d),
            None => base.join("out"),
        }
    }
}
