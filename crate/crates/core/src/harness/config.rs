//! Plain-text `key = value` configuration with dotted sections.
//!
//! ```text
//! # comment
//! engine.n_particles = 500
//! [optim]
//! lr_phi = 1e-3
//! ```
//!
//! A `[section]` line prefixes the keys that follow it. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{ArBound, EngineConfig, Sampler, UpdateMethod};
use crate::error::{Error, Result};
use crate::optim::{GradientMode, Optimizer, OptimizerKind, Schedule};
use crate::variational::PotentialClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Lgssm,
    Chaotic,
    Residual,
}

/// Where the learned model parameters start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelInit {
    Truth,
    /// An independent draw from the same prior as the generative parameters.
    Random,
    /// The generative parameters plus Gaussian noise of scale `init_scale`.
    Perturbed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    Amortized,
    NonAmortized,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dx: usize,
    pub dy: usize,
    /// Seed of the generative parameters.
    pub seed: u64,
    pub q_var: f64,
    pub r_var: f64,
    /// Target spectral norm of the generative LGSSM transition matrix.
    pub f_norm: f64,
    pub hidden: Vec<usize>,
    pub init: ModelInit,
    pub init_scale: f64,
    pub learn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalSpec {
    pub kind: FamilyKind,
    pub hidden: usize,
    pub marginal_hidden: Vec<usize>,
    pub potential_hidden: Vec<usize>,
    pub window: usize,
    pub recurrent_init: f64,
    /// Inner gradient steps per time step for the non-amortized family.
    pub inner_steps: usize,
    pub learn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub phi: Optimizer,
    pub theta: Optimizer,
    pub rho_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Last time index; the stream holds `y_0..y_T`.
    pub t_len: usize,
    pub seed: u64,
    pub checkpoints: Vec<usize>,
    /// Length of the held-out evaluation stream; 0 skips evaluation.
    pub test_len: usize,
    /// Every `mask_every` steps, `mask_len` consecutive observations are fully
    /// masked (0 disables).
    pub mask_every: usize,
    pub mask_len: usize,
    /// Worker threads for the particle updates; 0 uses the default pool.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub data: Option<PathBuf>,
    pub columns: Vec<String>,
    pub state_columns: Vec<String>,
    pub sentinel: f64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub variational: VariationalSpec,
    pub engine: EngineConfig,
    pub optim: OptimSpec,
    pub run: RunSpec,
    pub io: IoSpec,
}

/// Splits a config text into `section.key -> value`.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut prefix = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(sec) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            prefix = if sec.trim().is_empty() { String::new() } else { format!("{}.", sec.trim()) };
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        out.insert(format!("{prefix}{k}"), v.trim().to_string());
    }
    Ok(out)
}

struct Keys {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Keys {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{s}`: {e}"))))
                .collect(),
        }
    }

    fn choice<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
                let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("`{key}`: `{v}` is not one of {}", names.join(", ")))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<_> = self.map.keys().filter(|k| !self.used.contains(*k)).cloned().collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("`{key}` must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<usize> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(Error::Config(format!("`{key}` must be at least 1")))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_pairs(BTreeMap::new()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Parses `text` and then applies `overrides` (each `key=value`).
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(map: BTreeMap<String, String>) -> Result<Self> {
        let mut k = Keys { map, used: BTreeSet::new() };

        let model = ModelSpec {
            kind: k.choice(
                "model.kind",
                ModelKind::Lgssm,
                &[("lgssm", ModelKind::Lgssm), ("chaotic", ModelKind::Chaotic), ("residual", ModelKind::Residual)],
            )?,
            dx: at_least_one("model.dx", k.get("model.dx", 2)?)?,
            dy: at_least_one("model.dy", k.get("model.dy", 2)?)?,
            seed: k.get("model.seed", 0)?,
            q_var: positive("model.q_var", k.get("model.q_var", 0.1)?)?,
            r_var: positive("model.r_var", k.get("model.r_var", 0.25)?)?,
            f_norm: positive("model.f_norm", k.get("model.f_norm", 0.8)?)?,
            hidden: k.list("model.hidden", vec![32, 32])?,
            init: k.choice(
                "model.init",
                ModelInit::Random,
                &[("truth", ModelInit::Truth), ("random", ModelInit::Random), ("perturbed", ModelInit::Perturbed)],
            )?,
            init_scale: k.get("model.init_scale", 0.5)?,
            learn: k.get("model.learn", true)?,
        };

        let variational = VariationalSpec {
            kind: k.choice(
                "variational.kind",
                FamilyKind::Amortized,
                &[
                    ("amortized", FamilyKind::Amortized),
                    ("non_amortized", FamilyKind::NonAmortized),
                    ("exact", FamilyKind::Exact),
                ],
            )?,
            hidden: at_least_one("variational.hidden", k.get("variational.hidden", 32)?)?,
            marginal_hidden: k.list("variational.marginal_hidden", vec![32])?,
            potential_hidden: k.list("variational.potential_hidden", vec![32])?,
            window: k.get("variational.window", 2)?,
            recurrent_init: k.get("variational.recurrent_init", 0.5)?,
            inner_steps: k.get("variational.inner_steps", 500)?,
            learn: k.get("variational.learn", true)?,
        };

        let mut engine = EngineConfig::new(at_least_one("engine.n_particles", k.get("engine.n_particles", 100)?)?);
        let m = at_least_one("engine.m", k.get("engine.m", 2)?)?;
        let bound = match k.raw("engine.bound").as_deref() {
            None | Some("analytic") => ArBound::Analytic,
            Some("clip") => ArBound::Clip,
            Some(v) => ArBound::Fixed(v.parse().map_err(|_| Error::Config(format!("`engine.bound`: `{v}` is not clip, analytic or a number")))?),
        };
        let sampler = match k.choice("engine.sampler", "categorical", &[("categorical", "categorical"), ("accept_reject", "accept_reject")])? {
            "categorical" => Sampler::Categorical,
            _ => Sampler::AcceptReject(bound),
        };
        engine.method = match k.choice("engine.method", "full", &[("full", "full"), ("sampled", "sampled")])? {
            "full" => UpdateMethod::Full,
            _ => UpdateMethod::Sampled { m, sampler },
        };
        engine.cv_g = k.get("engine.cv_g", true)?;
        engine.cv_estimate = k.get("engine.cv_estimate", true)?;
        engine.entropy_score = k.get("engine.entropy_score", true)?;
        let lo = k.get("engine.log_eps_minus", -30.0)?;
        let hi = k.get("engine.log_eps_plus", 30.0)?;
        engine.clip = if k.get("engine.clip", false)? { Some(PotentialClip::new(lo, hi).map_err(|e| Error::Config(e.to_string()))?) } else { None };
        if matches!(sampler, Sampler::AcceptReject(ArBound::Clip)) && engine.clip.is_none() && matches!(engine.method, UpdateMethod::Sampled { .. }) {
            return Err(Error::Config("accept-reject with the clip bound needs engine.clip = true".into()));
        }

        let mode = k.choice("optim.mode", GradientMode::Difference, &[("difference", GradientMode::Difference), ("raw", GradientMode::Raw)])?;
        let clip_norm: f64 = k.get("optim.clip_norm", 1e3)?;
        let clip_norm = if clip_norm > 0.0 { Some(clip_norm) } else { None };
        let kind = k.choice("optim.kind", "adam", &[("adam", "adam"), ("sgd", "sgd")])?;
        let kappa: f64 = k.get("optim.kappa", 0.0)?;
        let make = |lr: f64| -> Result<Optimizer> {
            let kind = match kind {
                "adam" => OptimizerKind::Adam { lr },
                _ if kappa > 0.0 => OptimizerKind::Sgd(Schedule::polynomial(lr, kappa)?),
                _ => OptimizerKind::Sgd(Schedule::constant(lr)?),
            };
            Ok(Optimizer { kind, mode, clip_norm })
        };
        let lr_phi: f64 = k.get("optim.lr_phi", 1e-3)?;
        let lr_theta: f64 = k.get("optim.lr_theta", 1e-4)?;
        if lr_phi < 0.0 || lr_theta < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        let rho: f64 = k.get("optim.rho_max", 0.99)?;
        let optim = OptimSpec {
            phi: make(lr_phi)?,
            theta: make(lr_theta)?,
            rho_max: if rho > 0.0 {
                if rho >= 1.0 {
                    return Err(Error::Config("`optim.rho_max` must lie in (0, 1)".into()));
                }
                Some(rho)
            } else {
                None
            },
        };

        let run = RunSpec {
            t_len: at_least_one("run.T", k.get("run.T", 1000)?)?,
            seed: k.get("run.seed", 0)?,
            checkpoints: k.list("run.checkpoints", Vec::new())?,
            test_len: k.get("run.test_len", 0)?,
            mask_every: k.get("run.mask_every", 0)?,
            mask_len: k.get("run.mask_len", 0)?,
            threads: k.get("run.threads", 0)?,
        };

        let io = IoSpec {
            data: k.raw("io.data").filter(|s| !s.is_empty()).map(PathBuf::from),
            columns: k.list("io.columns", Vec::new())?,
            state_columns: k.list("io.state_columns", Vec::new())?,
            sentinel: k.get("io.sentinel", -200.0)?,
            out_dir: PathBuf::from(k.get("io.out_dir", "out".to_string())?),
        };

        k.finish()?;
        Ok(Self {
            model,
            variational,
            engine,
            optim,
            run,
            io,
        })
    }

    /// The configuration as `key = value` text that parses back to itself.
    pub fn to_text(&self) -> String {
        fn list<T: Display>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let m = &self.model;
        let v = &self.variational;
        let e = &self.engine;
        let mut lines = vec![
            format!("model.kind = {}", match m.kind {
                ModelKind::Lgssm => "lgssm",
                ModelKind::Chaotic => "chaotic",
                ModelKind::Residual => "residual",
            }),
            format!("model.dx = {}", m.dx),
            format!("model.dy = {}", m.dy),
            format!("model.seed = {}", m.seed),
            format!("model.q_var = {:e}", m.q_var),
            format!("model.r_var = {:e}", m.r_var),
            format!("model.f_norm = {:e}", m.f_norm),
            format!("model.hidden = {}", list(&m.hidden)),
            format!("model.init = {}", match m.init {
                ModelInit::Truth => "truth",
                ModelInit::Random => "random",
                ModelInit::Perturbed => "perturbed",
            }),
            format!("model.init_scale = {:e}", m.init_scale),
            format!("model.learn = {}", m.learn),
            format!("variational.kind = {}", match v.kind {
                FamilyKind::Amortized => "amortized",
                FamilyKind::NonAmortized => "non_amortized",
                FamilyKind::Exact => "exact",
            }),
            format!("variational.hidden = {}", v.hidden),
            format!("variational.marginal_hidden = {}", list(&v.marginal_hidden)),
            format!("variational.potential_hidden = {}", list(&v.potential_hidden)),
            format!("variational.window = {}", v.window),
            format!("variational.recurrent_init = {:e}", v.recurrent_init),
            format!("variational.inner_steps = {}", v.inner_steps),
            format!("variational.learn = {}", v.learn),
            format!("engine.n_particles = {}", e.n_particles),
        ];
        match e.method {
            UpdateMethod::Full => lines.push("engine.method = full".into()),
            UpdateMethod::Sampled { m, sampler } => {
                lines.push("engine.method = sampled".into());
                lines.push(format!("engine.m = {m}"));
                match sampler {
                    Sampler::Categorical => lines.push("engine.sampler = categorical".into()),
                    Sampler::AcceptReject(b) => {
                        lines.push("engine.sampler = accept_reject".into());
                        lines.push(match b {
                            ArBound::Clip => "engine.bound = clip".into(),
                            ArBound::Analytic => "engine.bound = analytic".into(),
                            ArBound::Fixed(x) => format!("engine.bound = {x:e}"),
                        });
                    }
                }
            }
        }
        lines.push(format!("engine.cv_g = {}", e.cv_g));
        lines.push(format!("engine.cv_estimate = {}", e.cv_estimate));
        lines.push(format!("engine.entropy_score = {}", e.entropy_score));
        lines.push(format!("engine.clip = {}", e.clip.is_some()));
        if let Some(c) = e.clip {
            lines.push(format!("engine.log_eps_minus = {:e}", c.log_eps_minus));
            lines.push(format!("engine.log_eps_plus = {:e}", c.log_eps_plus));
        }
        let o = &self.optim;
        let (kind, lr_phi, kappa) = describe(&o.phi);
        let (_, lr_theta, _) = describe(&o.theta);
        lines.push(format!("optim.kind = {kind}"));
        lines.push(format!("optim.lr_phi = {lr_phi:e}"));
        lines.push(format!("optim.lr_theta = {lr_theta:e}"));
        lines.push(format!("optim.kappa = {kappa:e}"));
        lines.push(format!("optim.mode = {}", if o.phi.mode == GradientMode::Raw { "raw" } else { "difference" }));
        lines.push(format!("optim.clip_norm = {:e}", o.phi.clip_norm.unwrap_or(0.0)));
        lines.push(format!("optim.rho_max = {:e}", o.rho_max.unwrap_or(0.0)));
        let r = &self.run;
        lines.push(format!("run.T = {}", r.t_len));
        lines.push(format!("run.seed = {}", r.seed));
        lines.push(format!("run.checkpoints = {}", list(&r.checkpoints)));
        lines.push(format!("run.test_len = {}", r.test_len));
        lines.push(format!("run.mask_every = {}", r.mask_every));
        lines.push(format!("run.mask_len = {}", r.mask_len));
        lines.push(format!("run.threads = {}", r.threads));
        let io = &self.io;
        lines.push(format!("io.data = {}", io.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()));
        lines.push(format!("io.columns = {}", io.columns.join(",")));
        lines.push(format!("io.state_columns = {}", io.state_columns.join(",")));
        lines.push(format!("io.sentinel = {:e}", io.sentinel));
        lines.push(format!("io.out_dir = {}", io.out_dir.display()));
        lines.join("\n") + "\n"
    }
}

fn describe(o: &Optimizer) -> (&'static str, f64, f64) {
    match o.kind {
        OptimizerKind::Adam { lr } => ("adam", lr, 0.0),
        OptimizerKind::Sgd(s) => (
            "sgd",
            s.gamma0,
            match s.kind {
                crate::optim::ScheduleKind::Polynomial { kappa } => kappa,
                crate::optim::ScheduleKind::Constant => 0.0,
            },
        ),
    }
}
