//! Subcommand implementations. Each takes the parsed configuration plus the
//! global flags and returns a [`Failure`] carrying the right exit code.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use dvdp_core::cascade::{Shape, SubspaceCascade};
use dvdp_core::denoiser::{
    AnalyticDenoiser, Denoiser, MlpDenoiser, TrainConfig, train, TIME_EMBED_DIM,
};
use dvdp_core::process::forward_trajectory;
use dvdp_core::sampler::{ddim_sample, sample, SampleMode, SamplerConfig, SigmaChoice};
use dvdp_core::schedule::DvdpSchedule;
use dvdp_core::stream_rng;
use dvdp_core::verify::turning_error;

use crate::config::{CliConfig, EtaSpec};
use crate::failure::{CliResult, Failure};
use crate::io::{
    fmt_f64, read_tensor, write_checkpoint, write_pgm, write_tensor, CascadeDescriptor,
    Checkpoint, Dtype, Tensor,
};

/// Training data draws come from a stream index far above the per-level
/// initialization streams.
const TRAIN_DATA_STREAM: u64 = 1 << 32;

pub struct Ctx {
    pub cfg: CliConfig,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

impl Ctx {
    fn out_dir(&self) -> CliResult<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn log(&self, msg: std::fmt::Arguments<'_>) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    /// CSV reports go to `--out` when given, stdout otherwise.
    fn emit_report(&self, name: &str, text: &str) -> CliResult<()> {
        match &self.out {
            Some(_) => {
                let path = self.out_dir()?.join(name);
                std::fs::write(&path, text)?;
                self.log(format_args!("wrote {}", path.display()));
            }
            None => {
                use std::io::Write;
                // A closed pipe (e.g. piping into `head`) is a normal way
                // for the reader to stop; exit quietly rather than fail.
                if let Err(e) = std::io::stdout().lock().write_all(text.as_bytes()) {
                    if e.kind() != std::io::ErrorKind::BrokenPipe {
                        return Err(e.into());
                    }
                }
            }
        }
        Ok(())
    }
}

fn tensor_shape(shape: Shape) -> Vec<usize> {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => vec![channels, height, width],
        Shape::Flat { len, .. } => vec![len],
    }
}

/// PGM geometry: image channels stack vertically; flat states render as a
/// single row.
fn pgm_geometry(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => (channels * height, width),
        Shape::Flat { len, .. } => (1, len),
    }
}

pub fn cmd_schedule(ctx: &Ctx) -> CliResult<()> {
    let c = ctx.cfg.build_cascade()?;
    let s = ctx.cfg.build_schedule(&c)?;
    let mut csv = String::from("t,sigma_bar");
    for k in 0..=s.levels() {
        csv.push_str(&format!(",lambda_bar_{k}"));
    }
    csv.push('\n');
    for t in 0..=s.t_total() {
        csv.push_str(&t.to_string());
        csv.push(',');
        csv.push_str(&fmt_f64(s.sigma_bar(t)));
        for k in 0..=s.levels() {
            csv.push(',');
            csv.push_str(&fmt_f64(s.lambda_bar(k, t)));
        }
        csv.push('\n');
    }
    ctx.emit_report("schedule.csv", &csv)
}

pub fn cmd_forward(ctx: &Ctx, input: Option<&Path>) -> CliResult<()> {
    let c = ctx.cfg.build_cascade()?;
    let s = ctx.cfg.build_schedule(&c)?;
    let seed = ctx.seed.unwrap_or(ctx.cfg.forward.seed);
    let mut rng = stream_rng(seed, 0);

    let (x0, base_shape) = match input {
        Some(path) => {
            let (tensor, _) = read_tensor(path)?;
            if tensor.data.len() != c.dim(0) {
                return Err(Failure::config(format!(
                    "{}: input has {} values, cascade base dimension is {}",
                    path.display(),
                    tensor.data.len(),
                    c.dim(0)
                )));
            }
            (tensor.data, tensor.shape)
        }
        None => {
            let gm = ctx.cfg.mixture(c.dim(0))?;
            (gm.sample(&mut rng), tensor_shape(c.shape(0)))
        }
    };

    let times: BTreeSet<usize> = match &ctx.cfg.forward.times {
        Some(list) => list.iter().copied().collect(),
        None => {
            let mut set: BTreeSet<usize> = s.turning_points().iter().copied().collect();
            set.insert(0);
            set.insert(s.t_total());
            set
        }
    };
    if let Some(&worst) = times.iter().find(|&&t| t > s.t_total()) {
        return Err(Failure::config(format!(
            "forward.times entry {worst} exceeds schedule.T = {}",
            s.t_total()
        )));
    }

    let trajectory = forward_trajectory(&c, &s, &x0, &mut rng)?;
    let dir = ctx.out_dir()?;
    let mut written = 0;
    for state in &trajectory {
        if !times.contains(&state.time) {
            continue;
        }
        let shape = if state.level == 0 {
            base_shape.clone()
        } else {
            tensor_shape(c.shape(state.level))
        };
        let tensor = Tensor::new(shape, state.data.clone())?;
        let path = dir.join(format!("forward_t{:05}_L{}.dvtf", state.time, state.level));
        write_tensor(&path, &tensor, Dtype::F64)?;
        ctx.log(format_args!("wrote {}", path.display()));
        written += 1;
    }
    ctx.log(format_args!("{written} checkpoints from a {}-state trajectory", trajectory.len()));
    Ok(())
}

/// Splits the flat parameter vector into named per-level tensors with their
/// real shapes.
fn mlp_checkpoint(den: &MlpDenoiser, c: &SubspaceCascade, s: &DvdpSchedule) -> Checkpoint {
    let theta = den.params();
    let hidden = den.hidden();
    let mut tensors = Vec::new();
    let mut at = 0;
    let slice = |len: usize, shape: Vec<usize>, at: &mut usize| {
        let t = Tensor {
            shape,
            data: theta[*at..*at + len].to_vec(),
        };
        *at += len;
        t
    };
    for k in 0..=c.levels() {
        let dim = c.dim(k);
        let n_in = dim + TIME_EMBED_DIM;
        tensors.push((format!("L{k}.w1"), slice(hidden * n_in, vec![hidden, n_in], &mut at)));
        tensors.push((format!("L{k}.b1"), slice(hidden, vec![hidden], &mut at)));
        tensors.push((format!("L{k}.w2"), slice(dim * hidden, vec![dim, hidden], &mut at)));
        tensors.push((format!("L{k}.b2"), slice(dim, vec![dim], &mut at)));
    }
    debug_assert_eq!(at, theta.len());
    Checkpoint {
        schedule_digest: s.digest(),
        cascade: CascadeDescriptor {
            shape: c.shape(0),
            levels: c.levels(),
            backend: c.backend(),
        },
        hidden,
        tensors,
    }
}

fn load_mlp(path: &Path, c: &SubspaceCascade, s: &DvdpSchedule) -> CliResult<MlpDenoiser> {
    let ck = crate::io::read_checkpoint(path)?;
    if ck.schedule_digest != s.digest() {
        return Err(Failure::config(format!(
            "{}: checkpoint was trained under a different schedule",
            path.display()
        )));
    }
    let want = CascadeDescriptor {
        shape: c.shape(0),
        levels: c.levels(),
        backend: c.backend(),
    };
    if ck.cascade != want {
        return Err(Failure::config(format!(
            "{}: checkpoint cascade {:?} does not match the configured {:?}",
            path.display(),
            ck.cascade,
            want
        )));
    }
    let mut den = MlpDenoiser::new(c, s, ck.hidden, 0);
    let mut theta = Vec::with_capacity(den.param_count());
    for k in 0..=c.levels() {
        for part in ["w1", "b1", "w2", "b2"] {
            let name = format!("L{k}.{part}");
            let tensor = ck
                .tensors
                .iter()
                .find(|(n, _)| n == &name)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Failure::config(format!(
                        "{}: checkpoint is missing tensor '{name}'",
                        path.display()
                    ))
                })?;
            theta.extend_from_slice(&tensor.data);
        }
    }
    den.set_params(&theta).map_err(|_| {
        Failure::config(format!(
            "{}: checkpoint parameter count does not match the configured network",
            path.display()
        ))
    })?;
    Ok(den)
}

pub fn cmd_sample(ctx: &Ctx, checkpoint: Option<&Path>) -> CliResult<()> {
    let c = ctx.cfg.build_cascade()?;
    let s = ctx.cfg.build_schedule(&c)?;
    let seed = ctx.seed.unwrap_or(ctx.cfg.sample.seed);

    let analytic;
    let mlp;
    let den: &dyn Denoiser = match checkpoint {
        Some(path) => {
            mlp = load_mlp(path, &c, &s)?;
            &mlp
        }
        None => {
            let gm = ctx.cfg.mixture(c.dim(0))?;
            analytic = AnalyticDenoiser::new(&c, &s, gm)?;
            &analytic
        }
    };

    let eta_window = match ctx.cfg.sample.eta_window {
        EtaSpec::Auto => SamplerConfig::auto_eta_window(&s),
        EtaSpec::None => None,
        EtaSpec::Fixed(lo, hi) => Some((lo, hi)),
    };
    let scfg = SamplerConfig {
        mode: ctx.cfg.sample.mode,
        ddim_steps: ctx.cfg.sample.ddim_steps,
        eta_window,
        sigma_choice: SigmaChoice::Posterior,
        seed,
        literal_update: false,
    };

    let count = ctx.cfg.sample.count;
    let draws: Result<Vec<Vec<f64>>, dvdp_core::Error> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            match scfg.mode {
                SampleMode::Ancestral => sample(&c, &s, den, &scfg, &mut rng),
                SampleMode::Ddim => ddim_sample(&c, &s, den, &scfg, &mut rng),
            }
        })
        .collect();
    let draws = draws?;

    let dir = ctx.out_dir()?;
    let shape = tensor_shape(c.shape(0));
    let (rows, cols) = pgm_geometry(c.shape(0));
    for (i, data) in draws.into_iter().enumerate() {
        let tensor = Tensor::new(shape.clone(), data)?;
        let dvtf = dir.join(format!("sample_{i:03}.dvtf"));
        write_tensor(&dvtf, &tensor, Dtype::F64)?;
        let pgm = dir.join(format!("sample_{i:03}.pgm"));
        write_pgm(&pgm, rows, cols, &tensor.data)?;
    }
    ctx.log(format_args!("wrote {count} samples to {}", dir.display()));
    Ok(())
}

pub fn cmd_train(ctx: &Ctx) -> CliResult<()> {
    let c = ctx.cfg.build_cascade()?;
    let s = ctx.cfg.build_schedule(&c)?;
    let gm = ctx.cfg.mixture(c.dim(0))?;
    let seed = ctx.seed.unwrap_or(ctx.cfg.train.seed);
    let tc = TrainConfig {
        iterations: ctx.cfg.train.iterations,
        batch: ctx.cfg.train.batch,
        lr: ctx.cfg.train.lr,
        seed,
        level_rule: ctx.cfg.train.level_rule,
    };
    let mut den = MlpDenoiser::new(&c, &s, ctx.cfg.train.hidden, seed);
    let trace = train(
        &mut den,
        &c,
        &s,
        &gm,
        &tc,
        &mut stream_rng(seed, TRAIN_DATA_STREAM),
    )?;

    let dir = ctx.out_dir()?;
    let ck_path = dir.join("checkpoint.dvck");
    write_checkpoint(&ck_path, &mlp_checkpoint(&den, &c, &s))?;
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, fmt_f64(*loss)));
    }
    let csv_path = dir.join("train_loss.csv");
    std::fs::write(&csv_path, csv)?;

    let tail = trace.len().min(100);
    let recent: f64 = trace[trace.len() - tail..].iter().sum::<f64>() / tail as f64;
    ctx.log(format_args!(
        "wrote {} and {} (mean loss over final {tail} iterations: {recent:.4})",
        ck_path.display(),
        csv_path.display()
    ));
    Ok(())
}

pub fn cmd_verify(ctx: &Ctx) -> CliResult<()> {
    let c = ctx.cfg.build_cascade()?;
    if c.levels() == 0 {
        return Err(Failure::config(
            "verify needs at least one turning point (cascade.K >= 1)",
        ));
    }
    ctx.cfg.build_schedule(&c)?;
    let gm = ctx.cfg.mixture(c.dim(0))?;
    let seed = ctx.seed.unwrap_or(ctx.cfg.verify.seed);
    let sched = &ctx.cfg.schedule;
    let n = ctx.cfg.verify.n;

    let reports: Result<Vec<_>, Failure> = ctx
        .cfg
        .verify
        .lambda_mins
        .par_iter()
        .enumerate()
        .map(|(i, &lm)| {
            let s = DvdpSchedule::build(
                sched.t_total,
                &sched.turning_points,
                &c.factors(),
                lm,
                sched.beta_lo,
                sched.beta_hi,
            )?;
            let report = turning_error(&c, &s, &gm, 1, n, &mut stream_rng(seed, i as u64))?;
            Ok((lm, report))
        })
        .collect();
    let reports = reports?;

    let mut csv = String::from("lambda_min,turn_time,jsd,stderr,bound,verdict\n");
    let mut failures = Vec::new();
    for (lm, r) in &reports {
        let pass = r.jsd - 3.0 * r.stderr <= r.bound;
        if !pass {
            failures.push(*lm);
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            lm,
            r.turn_time,
            fmt_f64(r.jsd),
            fmt_f64(r.stderr),
            fmt_f64(r.bound),
            if pass { "pass" } else { "fail" }
        ));
    }
    ctx.emit_report("verify.csv", &csv)?;
    if !failures.is_empty() {
        return Err(Failure::numeric(format!(
            "turning-point divergence exceeds its ceiling at lambda_min = {failures:?}"
        )));
    }
    Ok(())
}
