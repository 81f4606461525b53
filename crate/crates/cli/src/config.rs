//! Experiment configuration: TOML schema, defaults and validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use carleman_core::carleman::{geometric_grid, SourceSpec};
use carleman_core::{
    Backend, DiffusionCoefficient, EnsembleConfig, Grading, Interval, Resolution, Setup,
    ThetaVariant, WeightSign, WeightSystem,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Overridden by `--seed`; one of the two is required.
    pub seed: Option<u64>,
    pub horizon: f64,
    /// Overridden by `--out`.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub coefficient: CoefficientSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub regions: Regions,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub theta: ThetaConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub backward: BackwardConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub observability: ObservabilityConfig,
    #[serde(default)]
    pub caccioppoli: CaccioppoliConfig,
    #[serde(default)]
    pub hum: HumConfig,
    #[serde(default)]
    pub uc: UcConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSpec {
    PowerLaw {
        alpha: f64,
    },
    /// CSV with columns `x, a, a'`; relative paths are taken from the config file.
    Tabulated {
        samples_path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub m: usize,
    pub steps: usize,
    #[serde(default)]
    pub grading: Grading,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_startup")]
    pub startup: usize,
}

fn default_theta() -> f64 {
    carleman_core::solvers::DEFAULT_THETA
}

fn default_startup() -> usize {
    carleman_core::solvers::DEFAULT_STARTUP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regions {
    pub omega: [f64; 2],
    pub omega1: [f64; 2],
}

impl Default for Regions {
    fn default() -> Self {
        Regions {
            omega: [0.3, 0.8],
            omega1: [0.47, 0.53],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Standard,
    Bar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub variant: VariantName,
    /// Regularizes the bar variant near `T` when set.
    pub bar_eps: Option<f64>,
    /// Single-`s` commands use `s = sigma (T/2)^8`.
    pub sigma: f64,
    /// Sweeps run geometrically over `sigma` in this range.
    pub sigma_range: [f64; 2],
    pub s_count: usize,
    pub theta_cap: Option<f64>,
    /// Time samples for the `weights` profile export.
    pub profile_times: usize,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            variant: VariantName::Standard,
            bar_eps: None,
            sigma: 1.0,
            sigma_range: [1.0, 100.0],
            s_count: 9,
            theta_cap: None,
            profile_times: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub size: usize,
    pub modes: usize,
    pub b_bound: f64,
    pub c_bound: f64,
    pub time_modes: usize,
    pub space_modes: usize,
    pub backend: Backend,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let e = EnsembleConfig::default();
        EnsembleSection {
            size: e.size,
            modes: e.modes,
            b_bound: e.b_bound,
            c_bound: e.c_bound,
            time_modes: e.time_modes,
            space_modes: e.space_modes,
            backend: Backend::Moments,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Rerun at doubled `(M, N)` and compare.
    pub refine: bool,
    pub max_change: f64,
    pub monotone: bool,
    pub monotone_tol: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            refine: true,
            max_change: 0.25,
            monotone: true,
            monotone_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaConfig {
    pub samples: usize,
    pub tol: f64,
}

impl Default for ThetaConfig {
    fn default() -> Self {
        ThetaConfig {
            samples: 100_000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub probes: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { probes: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialData {
    /// `sin(pi x)`.
    Sine,
    /// Random eigenfunction series drawn from the seed.
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    pub initial: InitialData,
    /// Constant coefficients and sources.
    pub b: f64,
    pub c: f64,
    pub f: f64,
    pub g: f64,
    pub backend: Backend,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            initial: InitialData::Sine,
            b: 0.0,
            c: 0.0,
            f: 0.0,
            g: 0.0,
            backend: Backend::Tree,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackwardConfig {
    /// Bound on `sup |f0| + sup |f1|` of the random sources.
    pub source_bound: f64,
    /// Terminal value depends on `W_T` as well.
    pub random_terminal: bool,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        BackwardConfig {
            source_bound: 1.0,
            random_terminal: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub spec: SourceSpec,
    /// Tolerance on the reproduction error of the reduction check.
    pub reproduction_tol: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            spec: SourceSpec::Reduction,
            reproduction_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilityConfig {
    /// A smaller observation region; its max ratio must exceed the primary one.
    pub shrunk: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaccioppoliConfig {
    pub outer: [f64; 2],
    /// Inner intervals in order of shrinking margin.
    pub inner: Vec<[f64; 2]>,
    pub sign: WeightSign,
}

impl Default for CaccioppoliConfig {
    fn default() -> Self {
        CaccioppoliConfig {
            outer: [0.3, 0.8],
            inner: vec![[0.4, 0.7], [0.35, 0.75], [0.32, 0.78]],
            sign: WeightSign::Negative,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumConfig {
    /// Decreasing penalties.
    pub epsilons: Vec<f64>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Fixed regularization of the terminal weight (two controls only).
    pub weight_eps: Option<f64>,
    pub b: f64,
    pub c: f64,
    pub f: f64,
    pub g: f64,
    /// Initial state (two controls) or terminal state (backward).
    pub data: InitialData,
    pub duality_tol: f64,
}

impl Default for HumConfig {
    fn default() -> Self {
        HumConfig {
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4],
            cg_tol: carleman_core::hum::DEFAULT_CG_TOL,
            cg_max_iter: carleman_core::hum::DEFAULT_CG_MAX_ITER,
            weight_eps: None,
            b: 0.0,
            c: 0.0,
            f: 0.0,
            g: 0.0,
            data: InitialData::Sine,
            duality_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UcConfig {
    pub candidates: usize,
    pub t1: f64,
    pub threshold: f64,
}

impl Default for UcConfig {
    fn default() -> Self {
        UcConfig {
            candidates: 200,
            t1: 0.25,
            threshold: 1e-8,
        }
    }
}

/// A validated configuration together with the objects built from it.
pub struct Resolved {
    pub config: Config,
    pub seed: u64,
    pub setup: Setup,
    pub omega: Interval,
    pub omega1: Interval,
}

pub fn interval(v: [f64; 2], what: &str) -> anyhow::Result<Interval> {
    Interval::new(v[0], v[1]).with_context(|| format!("{what} = [{}, {}]", v[0], v[1]))
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Config =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let CoefficientSpec::Tabulated { samples_path } = &mut config.coefficient {
            if samples_path.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *samples_path = base.join(&*samples_path);
            }
        }
        Ok(config)
    }

    /// Check the schema-level invariants and build the discrete setup.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<Resolved> {
        let seed = match seed.or(self.seed) {
            Some(s) => s,
            None => bail!("a seed is required (--seed or `seed` in the config)"),
        };
        self.seed = Some(seed);
        if let Some(out) = out {
            self.output_dir = out;
        }
        ensure!(
            self.horizon > 0.0 && self.horizon.is_finite(),
            "horizon must be positive"
        );
        let coef = match &self.coefficient {
            CoefficientSpec::PowerLaw { alpha } => DiffusionCoefficient::power_law(*alpha)?,
            CoefficientSpec::Tabulated { samples_path } => {
                DiffusionCoefficient::from_csv(samples_path)
                    .with_context(|| format!("coefficient table {}", samples_path.display()))?
            }
        };
        let g = &self.grid;
        ensure!(g.steps >= 1, "grid.steps must be at least 1");
        ensure!(
            (0.5..=1.0).contains(&g.theta),
            "grid.theta must lie in [0.5, 1]"
        );
        let resolution = Resolution {
            m: g.m,
            steps: g.steps,
            grading: g.grading,
            theta: g.theta,
            startup: g.startup,
        };
        let setup = Setup::new(coef, self.horizon, resolution);
        let op = setup.operator()?;
        setup.solver(&op)?;
        let omega = interval(self.regions.omega, "regions.omega")?;
        let omega1 = interval(self.regions.omega1, "regions.omega1")?;
        ensure!(
            omega1.inside(&omega),
            "regions.omega1 must lie strictly inside regions.omega"
        );

        let w = &self.weights;
        ensure!(w.sigma > 0.0, "weights.sigma must be positive");
        ensure!(
            0.0 < w.sigma_range[0] && w.sigma_range[0] <= w.sigma_range[1],
            "weights.sigma_range must be positive and increasing"
        );
        ensure!(w.s_count >= 1, "weights.s_count must be at least 1");
        ensure!(self.ensemble.size >= 1, "ensemble.size must be at least 1");

        if let Some(shrunk) = self.observability.shrunk {
            interval(shrunk, "observability.shrunk")?;
        }
        let outer = interval(self.caccioppoli.outer, "caccioppoli.outer")?;
        for inner in &self.caccioppoli.inner {
            ensure!(
                interval(*inner, "caccioppoli.inner")?.inside(&outer),
                "caccioppoli.inner [{}, {}] must lie strictly inside caccioppoli.outer",
                inner[0],
                inner[1]
            );
        }
        let h = &self.hum;
        ensure!(!h.epsilons.is_empty(), "hum.epsilons must not be empty");
        ensure!(
            h.epsilons.iter().all(|e| *e > 0.0),
            "hum.epsilons must be positive"
        );
        ensure!(
            h.epsilons.windows(2).all(|p| p[1] < p[0]),
            "hum.epsilons must decrease"
        );
        ensure!(
            h.cg_tol > 0.0 && h.cg_max_iter > 0,
            "hum.cg_tol and hum.cg_max_iter must be positive"
        );
        ensure!(
            self.uc.t1 > 0.0 && self.uc.t1 <= self.horizon,
            "uc.t1 must lie in (0, horizon]"
        );
        let config = self;
        let resolved = Resolved {
            seed,
            setup,
            omega,
            omega1,
            config,
        };
        resolved.weight_system(resolved.config.weights.variant)?;
        Ok(resolved)
    }
}

impl Resolved {
    pub fn variant(&self, name: VariantName) -> ThetaVariant {
        match (name, self.config.weights.bar_eps) {
            (VariantName::Standard, _) => ThetaVariant::Standard,
            (VariantName::Bar, None) => ThetaVariant::Bar,
            (VariantName::Bar, Some(eps)) => ThetaVariant::BarEps(eps),
        }
    }

    /// `s = sigma (T/2)^8`.
    pub fn s(&self) -> f64 {
        self.config.weights.sigma * (0.5 * self.setup.horizon).powi(8)
    }

    pub fn s_grid(&self) -> Vec<f64> {
        let w = &self.config.weights;
        let scale = (0.5 * self.setup.horizon).powi(8);
        geometric_grid(
            w.sigma_range[0] * scale,
            w.sigma_range[1] * scale,
            w.s_count,
        )
    }

    pub fn weight_system(&self, name: VariantName) -> anyhow::Result<WeightSystem> {
        let ws = WeightSystem::build(
            &self.setup.coef,
            self.setup.horizon,
            self.omega,
            self.omega1,
            self.s(),
            self.variant(name),
        )?;
        Ok(match self.config.weights.theta_cap {
            Some(cap) => ws.with_theta_cap(cap),
            None => ws,
        })
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        let e = &self.config.ensemble;
        EnsembleConfig {
            size: e.size,
            seed: self.seed,
            modes: e.modes,
            b_bound: e.b_bound,
            c_bound: e.c_bound,
            time_modes: e.time_modes,
            space_modes: e.space_modes,
        }
    }
}
