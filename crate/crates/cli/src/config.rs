//! Flat run configuration. Every key can be set in a TOML file and
//! overridden by the flag of the same name (dashes for underscores).

use std::path::{Path, PathBuf};

use clap::Args;
use gridlearn::datagen::GenConfig;
use gridlearn::eval::EvalOptions;
use gridlearn::trainer::{ObjectiveTerms, TrainConfig, Variant};
use gridlearn::{Family, SolverConfig, ThermalLimit};
use serde::Deserialize;

use crate::CliError;

pub const SEED_ENV: &str = "GRIDLEARN_SEED";

/// Keys shared by the file and the command line. `None` means unset.
#[derive(Debug, Clone, Default, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Case file path or bundled case name (case9, case14, case30, case118).
    #[arg(long)]
    pub case: Option<String>,
    /// Output directory for default file locations.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Dataset path (JSON lines).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training log path (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,

    #[arg(long)]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub lb_min: Option<f64>,
    #[arg(long)]
    pub lb_max: Option<f64>,
    #[arg(long)]
    pub ub_min: Option<f64>,
    #[arg(long)]
    pub ub_max: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,

    #[arg(long)]
    pub feas_tol: Option<f64>,
    #[arg(long)]
    pub opt_tol: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,

    /// mb, mc or mcd.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lambda_init: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub u_lambda: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Comma-separated family labels, e.g. 2a,3a,6a.
    #[arg(long, value_delimiter = ',')]
    pub constraint_set: Option<Vec<Family>>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub relu_heads: Option<bool>,
    /// all or voltage_power.
    #[arg(long)]
    pub objective_terms: Option<ObjectiveTerms>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// squared or literal.
    #[arg(long)]
    pub thermal: Option<ThermalLimit>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    #[arg(long)]
    pub timing_runs: Option<usize>,
}

macro_rules! merge {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Reads `path` (if any) and applies the command-line values on top.
    pub fn resolve(config: Option<&Path>, flags: &Settings) -> Result<Settings, CliError> {
        let mut s = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            }
            None => Settings::default(),
        };
        let file_seed = s.seed;
        merge!(s, flags; case, out_dir, dataset, checkpoint, log, seed, jobs, n_points, lb_min, lb_max, ub_min,
            ub_max, noise_scale, feas_tol, opt_tol, max_outer, max_inner, variant, lambda_init, rho, u_lambda, lr,
            batch_size, max_epochs, split_ratio, constraint_set, hidden, relu_heads, objective_terms, grad_clip,
            thermal, checkpoint_every, timing_runs);
        if flags.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let seed = v.trim().parse().map_err(|_| CliError::Input(format!("{SEED_ENV}={v} is not a seed")))?;
                s.seed = Some(seed);
            } else {
                s.seed = file_seed;
            }
        }
        Ok(s)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(1).max(1)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir().join("dataset.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir().join("checkpoint.json"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| self.out_dir().join("train_log.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir().join("report")
    }

    pub fn gen_config(&self) -> Result<GenConfig, CliError> {
        let d = GenConfig::default();
        let c = GenConfig {
            n_points: self.n_points.unwrap_or(d.n_points),
            seed: self.seed(),
            lb_range: [self.lb_min.unwrap_or(d.lb_range[0]), self.lb_max.unwrap_or(d.lb_range[1])],
            ub_range: [self.ub_min.unwrap_or(d.ub_range[0]), self.ub_max.unwrap_or(d.ub_range[1])],
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
        };
        c.check().map_err(CliError::Input)?;
        Ok(c)
    }

    pub fn solver_config(&self) -> Result<SolverConfig, CliError> {
        let d = SolverConfig::default();
        let c = SolverConfig {
            feas_tol: self.feas_tol.unwrap_or(d.feas_tol),
            opt_tol: self.opt_tol.unwrap_or(d.opt_tol),
            max_outer: self.max_outer.unwrap_or(d.max_outer),
            max_inner: self.max_inner.unwrap_or(d.max_inner),
            thermal: self.thermal.unwrap_or(d.thermal),
            ..d
        };
        c.check().map_err(CliError::Input)?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::for_variant(self.variant.unwrap_or(Variant::Mcd));
        let c = TrainConfig {
            lambda_init: self.lambda_init.unwrap_or(d.lambda_init),
            rho: self.rho.unwrap_or(d.rho),
            u_lambda: self.u_lambda.unwrap_or(d.u_lambda),
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            seed: self.seed(),
            split_ratio: self.split_ratio.unwrap_or(d.split_ratio),
            constraint_set: self.constraint_set.clone().unwrap_or(d.constraint_set.clone()),
            hidden: self.hidden.clone().unwrap_or_default(),
            relu_heads: self.relu_heads.unwrap_or(d.relu_heads),
            objective_terms: self.objective_terms.unwrap_or(d.objective_terms),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
            thermal: self.thermal.unwrap_or(d.thermal),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            ..d
        };
        c.check().map_err(CliError::Input)?;
        c.check_variant().map_err(CliError::Input)?;
        Ok(c)
    }

    pub fn eval_options(&self, loadflow: bool) -> Result<EvalOptions, CliError> {
        let d = EvalOptions::default();
        Ok(EvalOptions {
            loadflow,
            solver: self.solver_config()?,
            thermal: self.thermal.unwrap_or(d.thermal),
            timing_runs: self.timing_runs.unwrap_or(d.timing_runs),
            jobs: self.jobs(),
        })
    }
}
