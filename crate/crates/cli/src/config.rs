//! Run configuration: a sectioned key=value text format.
//!
//! ```text
//! # comment
//! [cascade]
//! base_shape = image:1x32x32   # or flat:LENxGROUP
//! K = 1
//! backend = pooling            # or dense
//!
//! [schedule]
//! T = 1000
//! turning_points = 600         # comma-separated, ascending; empty for none
//! lambda_min = 0.01
//! beta_lo = 0.0001
//! beta_hi = 0.02
//!
//! [train]
//! iterations = 10000
//! batch = 32
//! lr = 0.001
//! seed = 0
//! level_rule = uniform_level   # or uniform_time
//! hidden = 64
//!
//! [sample]
//! mode = ancestral             # or ddim
//! ddim_steps = 50
//! eta_window = auto            # auto | none | LO,HI
//! seed = 0
//! count = 4
//!
//! [data]
//! mixture = 0.5@0.9,-0.6@0.16|0.5@-0.9,0.6@0.16
//! # or: dataset = path.dvtf  (rows become kernel centers)
//! # smoothing = 0.001        (kernel variance; dataset only)
//!
//! [forward]
//! times = 0,600,1000           # default: 0, each turning point, T
//! seed = 0
//!
//! [verify]
//! lambda_mins = 0.3,0.1,0.03,0.01
//! n = 1000000
//! seed = 0
//! ```
//!
//! Unknown sections or keys are rejected by name. Values must not contain
//! '#' (it starts a comment).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvdp_core::cascade::{build_cascade, Backend, Shape, SubspaceCascade};
use dvdp_core::denoiser::{GaussianMixture, LevelRule};
use dvdp_core::sampler::SampleMode;
use dvdp_core::schedule::DvdpSchedule;

use crate::failure::{CliResult, Failure};
use crate::io::read_tensor;

#[derive(Clone, Debug)]
pub struct CascadeCfg {
    pub base_shape: Shape,
    pub levels: usize,
    pub backend: Backend,
}

#[derive(Clone, Debug)]
pub struct ScheduleCfg {
    pub t_total: usize,
    pub turning_points: Vec<usize>,
    pub lambda_min: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

#[derive(Clone, Debug)]
pub struct TrainCfg {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub level_rule: LevelRule,
    pub hidden: usize,
}

/// Noise-window request for DDIM sampling, resolved against the schedule.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EtaSpec {
    Auto,
    None,
    Fixed(usize, usize),
}

#[derive(Clone, Debug)]
pub struct SampleCfg {
    pub mode: SampleMode,
    pub ddim_steps: usize,
    pub eta_window: EtaSpec,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    None,
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
    Dataset {
        path: PathBuf,
        smoothing: f64,
    },
}

#[derive(Clone, Debug)]
pub struct ForwardCfg {
    pub times: Option<Vec<usize>>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct VerifyCfg {
    pub lambda_mins: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CliConfig {
    pub cascade: CascadeCfg,
    pub schedule: ScheduleCfg,
    pub train: TrainCfg,
    pub sample: SampleCfg,
    pub data: DataSpec,
    pub forward: ForwardCfg,
    pub verify: VerifyCfg,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            cascade: CascadeCfg {
                base_shape: Shape::Image {
                    channels: 1,
                    height: 32,
                    width: 32,
                },
                levels: 1,
                backend: Backend::Pooling,
            },
            schedule: ScheduleCfg {
                t_total: 1000,
                turning_points: vec![600],
                lambda_min: 0.01,
                beta_lo: 1e-4,
                beta_hi: 0.02,
            },
            train: TrainCfg {
                iterations: 10_000,
                batch: 32,
                lr: 1e-3,
                seed: 0,
                level_rule: LevelRule::UniformLevel,
                hidden: 64,
            },
            sample: SampleCfg {
                mode: SampleMode::Ancestral,
                ddim_steps: 50,
                eta_window: EtaSpec::Auto,
                seed: 0,
                count: 4,
            },
            data: DataSpec::None,
            forward: ForwardCfg {
                times: None,
                seed: 0,
            },
            verify: VerifyCfg {
                lambda_mins: vec![0.3, 0.1, 0.03, 0.01],
                n: 1_000_000,
                seed: 0,
            },
        }
    }
}

fn bad_key(section: &str, key: &str, detail: impl std::fmt::Display) -> Failure {
    Failure::config(format!("invalid value for {section}.{key}: {detail}"))
}

fn parse_num<T: FromStr>(section: &str, key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| bad_key(section, key, format!("'{value}' ({e})")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_num(section, key, part.trim()))
        .collect()
}

fn parse_shape(value: &str) -> CliResult<Shape> {
    let err = || {
        bad_key(
            "cascade",
            "base_shape",
            format!("'{value}' (want image:CxHxW or flat:LENxGROUP)"),
        )
    };
    let (kind, dims) = value.split_once(':').ok_or_else(err)?;
    let parts: Vec<usize> = dims
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| err())?;
    match (kind.trim(), parts.as_slice()) {
        ("image", [c, h, w]) => Ok(Shape::Image {
            channels: *c,
            height: *h,
            width: *w,
        }),
        ("flat", [len, group]) => Ok(Shape::Flat {
            len: *len,
            group: *group,
        }),
        _ => Err(err()),
    }
}

/// Mixture literal: components separated by '|', each `weight@means@variance`
/// with a comma-separated mean vector.
fn parse_mixture(value: &str) -> CliResult<DataSpec> {
    let err = |detail: &str| bad_key("data", "mixture", format!("'{value}' ({detail})"));
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for comp in value.split('|') {
        let fields: Vec<&str> = comp.split('@').collect();
        let [w, m, v] = fields.as_slice() else {
            return Err(err("each component is weight@means@variance"));
        };
        weights.push(
            w.trim()
                .parse::<f64>()
                .map_err(|_| err("bad weight"))?,
        );
        means.push(
            m.split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| err("bad mean vector"))?,
        );
        variances.push(
            v.trim()
                .parse::<f64>()
                .map_err(|_| err("bad variance"))?,
        );
    }
    Ok(DataSpec::Mixture {
        weights,
        means,
        variances,
    })
}

fn parse_eta(value: &str) -> CliResult<EtaSpec> {
    match value {
        "auto" => Ok(EtaSpec::Auto),
        "none" => Ok(EtaSpec::None),
        other => {
            let parts: Vec<&str> = other.split(',').collect();
            if let [lo, hi] = parts.as_slice() {
                let lo = lo.trim().parse::<usize>();
                let hi = hi.trim().parse::<usize>();
                if let (Ok(lo), Ok(hi)) = (lo, hi) {
                    return Ok(EtaSpec::Fixed(lo, hi));
                }
            }
            Err(bad_key(
                "sample",
                "eta_window",
                format!("'{other}' (want auto, none, or LO,HI)"),
            ))
        }
    }
}

impl CliConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = CliConfig::default();
        let mut section: Option<String> = None;
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut smoothing: Option<f64> = None;
        let mut mixture_value: Option<DataSpec> = None;
        let mut dataset_value: Option<PathBuf> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Failure::config(format!("line {lineno}: malformed section header '{line}'"))
                })?;
                if ![
                    "cascade", "schedule", "train", "sample", "data", "forward", "verify",
                ]
                .contains(&name)
                {
                    return Err(Failure::config(format!(
                        "line {lineno}: unknown section [{name}]"
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::config(format!("line {lineno}: expected key = value, got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let sect = section.clone().ok_or_else(|| {
                Failure::config(format!(
                    "line {lineno}: key '{key}' appears before any [section]"
                ))
            })?;
            if !seen.insert((sect.clone(), key.to_string())) {
                return Err(Failure::config(format!(
                    "line {lineno}: duplicate key '{key}' in [{sect}]"
                )));
            }

            let s = sect.as_str();
            match (s, key) {
                ("cascade", "base_shape") => cfg.cascade.base_shape = parse_shape(value)?,
                ("cascade", "K") => cfg.cascade.levels = parse_num(s, key, value)?,
                ("cascade", "backend") => {
                    cfg.cascade.backend = match value {
                        "pooling" => Backend::Pooling,
                        "dense" => Backend::Dense,
                        other => {
                            return Err(bad_key(s, key, format!("'{other}' (want pooling or dense)")))
                        }
                    }
                }
                ("schedule", "T") => cfg.schedule.t_total = parse_num(s, key, value)?,
                ("schedule", "turning_points") => {
                    cfg.schedule.turning_points = parse_list(s, key, value)?
                }
                ("schedule", "lambda_min") => cfg.schedule.lambda_min = parse_num(s, key, value)?,
                ("schedule", "beta_lo") => cfg.schedule.beta_lo = parse_num(s, key, value)?,
                ("schedule", "beta_hi") => cfg.schedule.beta_hi = parse_num(s, key, value)?,
                ("train", "iterations") => cfg.train.iterations = parse_num(s, key, value)?,
                ("train", "batch") => cfg.train.batch = parse_num(s, key, value)?,
                ("train", "lr") => cfg.train.lr = parse_num(s, key, value)?,
                ("train", "seed") => cfg.train.seed = parse_num(s, key, value)?,
                ("train", "level_rule") => {
                    cfg.train.level_rule = match value {
                        "uniform_level" => LevelRule::UniformLevel,
                        "uniform_time" => LevelRule::UniformTime,
                        other => {
                            return Err(bad_key(
                                s,
                                key,
                                format!("'{other}' (want uniform_level or uniform_time)"),
                            ))
                        }
                    }
                }
                ("train", "hidden") => cfg.train.hidden = parse_num(s, key, value)?,
                ("sample", "mode") => {
                    cfg.sample.mode = match value {
                        "ancestral" => SampleMode::Ancestral,
                        "ddim" => SampleMode::Ddim,
                        other => {
                            return Err(bad_key(s, key, format!("'{other}' (want ancestral or ddim)")))
                        }
                    }
                }
                ("sample", "ddim_steps") => cfg.sample.ddim_steps = parse_num(s, key, value)?,
                ("sample", "eta_window") => cfg.sample.eta_window = parse_eta(value)?,
                ("sample", "seed") => cfg.sample.seed = parse_num(s, key, value)?,
                ("sample", "count") => cfg.sample.count = parse_num(s, key, value)?,
                ("data", "mixture") => mixture_value = Some(parse_mixture(value)?),
                ("data", "dataset") => dataset_value = Some(PathBuf::from(value)),
                ("data", "smoothing") => smoothing = Some(parse_num(s, key, value)?),
                ("forward", "times") => {
                    let times: Vec<usize> = parse_list(s, key, value)?;
                    if times.is_empty() {
                        return Err(bad_key(s, key, "must list at least one timestep"));
                    }
                    cfg.forward.times = Some(times);
                }
                ("forward", "seed") => cfg.forward.seed = parse_num(s, key, value)?,
                ("verify", "lambda_mins") => {
                    cfg.verify.lambda_mins = parse_list(s, key, value)?;
                    if cfg.verify.lambda_mins.is_empty() {
                        return Err(bad_key(s, key, "must list at least one value"));
                    }
                }
                ("verify", "n") => cfg.verify.n = parse_num(s, key, value)?,
                ("verify", "seed") => cfg.verify.seed = parse_num(s, key, value)?,
                _ => {
                    return Err(Failure::config(format!(
                        "line {lineno}: unknown key '{key}' in [{sect}]"
                    )))
                }
            }
        }

        cfg.data = match (mixture_value, dataset_value) {
            (Some(_), Some(_)) => {
                return Err(Failure::config(
                    "data.mixture and data.dataset are mutually exclusive",
                ))
            }
            (Some(m), None) => {
                if smoothing.is_some() {
                    return Err(Failure::config(
                        "data.smoothing applies only with data.dataset",
                    ));
                }
                m
            }
            (None, Some(path)) => DataSpec::Dataset {
                path,
                smoothing: smoothing.unwrap_or(1e-3),
            },
            (None, None) => {
                if smoothing.is_some() {
                    return Err(Failure::config(
                        "data.smoothing applies only with data.dataset",
                    ));
                }
                DataSpec::None
            }
        };

        if cfg.cascade.levels != cfg.schedule.turning_points.len() {
            return Err(Failure::config(format!(
                "cascade.K = {} disagrees with schedule.turning_points ({} points)",
                cfg.cascade.levels,
                cfg.schedule.turning_points.len()
            )));
        }
        Ok(cfg)
    }

    pub fn build_cascade(&self) -> CliResult<SubspaceCascade> {
        Ok(build_cascade(
            self.cascade.base_shape,
            self.cascade.levels,
            self.cascade.backend,
        )?)
    }

    pub fn build_schedule(&self, c: &SubspaceCascade) -> CliResult<DvdpSchedule> {
        Ok(DvdpSchedule::build(
            self.schedule.t_total,
            &self.schedule.turning_points,
            &c.factors(),
            self.schedule.lambda_min,
            self.schedule.beta_lo,
            self.schedule.beta_hi,
        )?)
    }

    /// Resolves [data] into a mixture in the base space: either the literal
    /// components, or dataset rows as kernel centers with the smoothing
    /// variance.
    pub fn mixture(&self, dim: usize) -> CliResult<GaussianMixture> {
        match &self.data {
            DataSpec::None => Err(Failure::config(
                "this command needs data.mixture or data.dataset",
            )),
            DataSpec::Mixture {
                weights,
                means,
                variances,
            } => {
                if means.iter().any(|m| m.len() != dim) {
                    return Err(Failure::config(format!(
                        "data.mixture dimension {} disagrees with the cascade base dimension {dim}",
                        means.first().map(|m| m.len()).unwrap_or(0)
                    )));
                }
                Ok(GaussianMixture::isotropic(
                    weights.clone(),
                    means.clone(),
                    variances.clone(),
                )?)
            }
            DataSpec::Dataset { path, smoothing } => {
                let (tensor, _) = read_tensor(path)?;
                if tensor.shape.len() < 2 {
                    return Err(Failure::config(format!(
                        "{}: dataset tensor must be (rows, ...), got shape {:?}",
                        path.display(),
                        tensor.shape
                    )));
                }
                let rows = tensor.shape[0];
                let row_dim: usize = tensor.shape[1..].iter().product();
                if row_dim != dim {
                    return Err(Failure::config(format!(
                        "{}: dataset row dimension {row_dim} disagrees with the cascade base dimension {dim}",
                        path.display()
                    )));
                }
                let means: Vec<Vec<f64>> = tensor
                    .data
                    .chunks_exact(row_dim)
                    .map(|r| r.to_vec())
                    .collect();
                Ok(GaussianMixture::isotropic(
                    vec![1.0 / rows as f64; rows],
                    means,
                    vec![*smoothing; rows],
                )?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = CliConfig::parse("").unwrap();
        assert_eq!(cfg.schedule.t_total, 1000);
        assert_eq!(cfg.schedule.turning_points, vec![600]);
        assert_eq!(cfg.cascade.levels, 1);
        assert_eq!(
            cfg.cascade.base_shape,
            Shape::Image {
                channels: 1,
                height: 32,
                width: 32
            }
        );
        assert_eq!(cfg.verify.lambda_mins, vec![0.3, 0.1, 0.03, 0.01]);
        assert_eq!(cfg.verify.n, 1_000_000);
    }

    #[test]
    fn full_config_parses() {
        let text = "
[cascade]
base_shape = flat:8x2
K = 2
backend = dense

[schedule]
T = 100            # comment after value
turning_points = 40,70
lambda_min = 0.05

[train]
iterations = 50
lr = 0.01
level_rule = uniform_time

[sample]
mode = ddim
ddim_steps = 25
eta_window = 10,20
count = 3

[data]
mixture = 0.25@1,0,0,0,0,0,0,0@0.04|0.75@0,1,0,0,0,0,0,0@0.09

[forward]
times = 0,40,100

[verify]
lambda_mins = 0.1,0.01
n = 5000
";
        let cfg = CliConfig::parse(text).unwrap();
        assert_eq!(cfg.cascade.base_shape, Shape::Flat { len: 8, group: 2 });
        assert_eq!(cfg.cascade.backend, Backend::Dense);
        assert_eq!(cfg.schedule.turning_points, vec![40, 70]);
        assert_eq!(cfg.schedule.lambda_min, 0.05);
        assert_eq!(cfg.schedule.beta_hi, 0.02);
        assert_eq!(cfg.train.iterations, 50);
        assert_eq!(cfg.train.level_rule, LevelRule::UniformTime);
        assert_eq!(cfg.sample.mode, SampleMode::Ddim);
        assert_eq!(cfg.sample.eta_window, EtaSpec::Fixed(10, 20));
        assert_eq!(cfg.forward.times, Some(vec![0, 40, 100]));
        assert_eq!(cfg.verify.lambda_mins, vec![0.1, 0.01]);
        match &cfg.data {
            DataSpec::Mixture { weights, means, .. } => {
                assert_eq!(weights, &[0.25, 0.75]);
                assert_eq!(means[0].len(), 8);
            }
            other => panic!("unexpected data source: {other:?}"),
        }
        let c = cfg.build_cascade().unwrap();
        assert_eq!(c.dims(), &[8, 4, 2]);
        let s = cfg.build_schedule(&c).unwrap();
        assert_eq!(s.t_total(), 100);
        let gm = cfg.mixture(8).unwrap();
        assert_eq!(gm.components(), 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = CliConfig::parse("[cascade]\nsides = 3\n").unwrap_err();
        assert!(err.to_string().contains("'sides'"), "{err}");
        let err = CliConfig::parse("[orbit]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("[orbit]"), "{err}");
        let err = CliConfig::parse("x = 1\n").unwrap_err();
        assert!(err.to_string().contains("before any"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = CliConfig::parse("[schedule]\nT = soon\n").unwrap_err();
        assert!(err.to_string().contains("schedule.T"), "{err}");
        let err = CliConfig::parse("[sample]\neta_window = wide\n").unwrap_err();
        assert!(err.to_string().contains("sample.eta_window"), "{err}");
        let err = CliConfig::parse("[cascade]\nbase_shape = cube:3x3x3x3\n").unwrap_err();
        assert!(err.to_string().contains("cascade.base_shape"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = CliConfig::parse("[schedule]\nT = 10\nT = 20\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key 'T'"), "{err}");
    }

    #[test]
    fn level_count_must_match_turning_points() {
        let err = CliConfig::parse("[cascade]\nK = 2\n").unwrap_err();
        assert!(err.to_string().contains("turning_points"), "{err}");
        CliConfig::parse("[cascade]\nK = 2\n[schedule]\nturning_points = 300,600\n").unwrap();
    }

    #[test]
    fn mixture_and_dataset_are_exclusive() {
        let err =
            CliConfig::parse("[data]\nmixture = 1@0@1\ndataset = d.dvtf\n").unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");
        let err = CliConfig::parse("[data]\nmixture = 1@0@1\nsmoothing = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("smoothing"), "{err}");
    }

    #[test]
    fn missing_data_is_a_named_config_error() {
        let cfg = CliConfig::parse("").unwrap();
        let err = cfg.mixture(4).unwrap_err();
        assert!(matches!(err, Failure::Config(_)));
        assert!(err.to_string().contains("data.mixture"), "{err}");
    }

    #[test]
    fn mixture_dimension_is_checked() {
        let cfg = CliConfig::parse("[data]\nmixture = 1@0,0@1\n").unwrap();
        assert!(cfg.mixture(2).is_ok());
        assert!(cfg.mixture(3).is_err());
    }
}
