use std::fmt;
use std::path::Path;

use sot_core::dictionary;
use sot_core::metrics;
use sot_core::model_io;
use sot_core::pipeline::{fit_with, history_csv, IterationReport};
use sot_core::{transfer, Direction, Error, FitConfig, Image, TransferModel, TransferOptions};

use crate::args::{Command, DirectionArg, EvalArgs, FitArgs, FitLogs, FitParams, RunArgs, TransferArgs, TransferParams};
use crate::output::Staged;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable inputs, or inputs that do not fit together.
    Usage(String),
    /// The computation itself broke down.
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::NumericFailure(_) | Error::DegenerateDistribution | Error::AtomUnused(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

pub fn configure_threads(flag: Option<usize>) -> Outcome {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SOT_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("SOT_THREADS must be a positive integer, got {v:?}")))?,
            ),
            _ => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Usage("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("configuring {n} threads: {e}")))
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Fit(a) => cmd_fit(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
    }
}

fn load(path: &Path) -> Outcome<Image> {
    Image::load_png(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn fit_config(p: &FitParams) -> FitConfig {
    let d = FitConfig::default();
    FitConfig {
        patch_size: p.patch_size.unwrap_or(d.patch_size),
        sample_count: p.samples.unwrap_or(d.sample_count),
        dict_size: p.dict_size.unwrap_or(d.dict_size),
        dict_size_reference: p.dict_size_reference.or(d.dict_size_reference),
        omp_tol: p.omp_tol.unwrap_or(d.omp_tol),
        omp_max_atoms: p.omp_k.unwrap_or(d.omp_max_atoms),
        lambda: p.lambda.unwrap_or(d.lambda),
        tau: p.tau.unwrap_or(d.tau),
        gamma: p.gamma.unwrap_or(d.gamma),
        eta: p.eta.unwrap_or(d.eta),
        sinkhorn_iters: p.sinkhorn_iters.unwrap_or(d.sinkhorn_iters),
        outer_iters: p.outer_iters.unwrap_or(d.outer_iters),
        rel_loss_stop: p.stop.unwrap_or(d.rel_loss_stop),
        seed: p.seed.unwrap_or(d.seed),
        exact_ot: p.exact_ot.unwrap_or(d.exact_ot),
        ..d
    }
}

fn transfer_options(p: &TransferParams) -> (Direction, TransferOptions) {
    let d = TransferOptions::default();
    let direction = match p.direction.unwrap_or_default() {
        DirectionArg::Forward => Direction::Forward,
        DirectionArg::Reverse => Direction::Reverse,
    };
    let opts = TransferOptions {
        stride: p.stride.unwrap_or(d.stride),
        rho: p.rho.unwrap_or(d.rho),
        ..d
    };
    (direction, opts)
}

fn print_iteration(r: &IterationReport) {
    let l = &r.record;
    println!(
        "iter={} E_sp_x={:.6e} E_sp_y={:.6e} E_ot_a={:.6e} E_ot_b={:.6e} E_c={:.6e}",
        l.iteration, l.e_sp_x, l.e_sp_y, l.e_ot_a, l.e_ot_b, l.e_c
    );
}

/// Trains a model and stages the requested logs.
fn train(content: &Path, reference: &Path, params: &FitParams, logs: &FitLogs, staged: &mut Staged) -> Outcome<TransferModel> {
    let config = fit_config(params);
    config.validate()?;
    let (content, reference) = (load(content)?, load(reference)?);
    let model = fit_with(&content, &reference, &config, print_iteration)?;
    if let Some(path) = &logs.loss_csv {
        staged.add(path, history_csv(&model.history).into_bytes());
    }
    if let Some(dir) = &logs.atlas_dir {
        for (name, dict) in [("dict_x.png", &model.dx), ("dict_y.png", &model.dy)] {
            let atlas = dictionary::atlas(dict, config.patch_size, model.channels)?;
            staged.add(dir.join(name), atlas.to_png_bytes()?);
        }
    }
    Ok(model)
}

fn apply(model: &TransferModel, input: &Image, params: &TransferParams) -> Outcome<Image> {
    let (direction, opts) = transfer_options(params);
    let out = transfer(model, input, direction, &opts)?;
    if let Some(r) = out.refine.as_ref().filter(|r| !r.converged) {
        eprintln!(
            "warning: refinement stopped after {} iterations at relative residual {:.3e}",
            r.iterations, r.relative_residual
        );
    }
    println!("psnr={:.4}", metrics::psnr(&out.image, input)?);
    println!("edge_ssim={:.6}", metrics::edge_ssim(&out.image, input)?);
    Ok(out.image)
}

fn commit(staged: Staged) -> Outcome {
    staged.commit().map_err(|e| Failure::Numeric(format!("writing outputs: {e}")))
}

fn cmd_fit(a: FitArgs) -> Outcome {
    let mut staged = Staged::default();
    let model = train(&a.content, &a.reference, &a.params, &a.logs, &mut staged)?;
    staged.add(&a.out_model, model_io::to_bytes(&model));
    commit(staged)
}

fn cmd_transfer(a: TransferArgs) -> Outcome {
    let model = model_io::load_model(&a.model).map_err(|e| Failure::Usage(format!("{}: {e}", a.model.display())))?;
    let input = load(&a.input)?;
    let image = apply(&model, &input, &a.params)?;
    let mut staged = Staged::default();
    staged.add(&a.out, image.to_png_bytes()?);
    commit(staged)
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (x, y) = (load(&a.a)?, load(&a.b)?);
    if !x.same_shape(&y) {
        return Err(Failure::Usage(format!(
            "images differ in size: {}x{}x{} vs {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            y.width(),
            y.height(),
            y.channels()
        )));
    }
    let psnr = metrics::psnr(&x, &y)?;
    let ssim = metrics::ssim(&x, &y)?;
    let edge = metrics::edge_ssim(&x, &y)?;
    println!("psnr={}", fmt_metric(psnr));
    println!("ssim={}", fmt_metric(ssim));
    println!("edge_ssim={}", fmt_metric(edge));
    Ok(())
}

/// Shortest decimal that round-trips, so exact values print as `1` or `99`.
fn fmt_metric(v: f64) -> String {
    format!("{v}")
}

fn cmd_run(a: RunArgs) -> Outcome {
    let mut staged = Staged::default();
    let model = train(&a.content, &a.reference, &a.fit, &a.logs, &mut staged)?;
    let content = load(&a.content)?;
    let image = apply(&model, &content, &a.transfer)?;
    staged.add(&a.out, image.to_png_bytes()?);
    if let Some(path) = &a.out_model {
        staged.add(path, model_io::to_bytes(&model));
    }
    commit(staged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_fit_config() {
        assert_eq!(fit_config(&FitParams::default()), FitConfig::default());
        let (dir, opts) = transfer_options(&TransferParams::default());
        assert_eq!(dir, Direction::Forward);
        assert_eq!(opts, TransferOptions::default());
    }

    #[test]
    fn overrides_reach_the_config() {
        let p = FitParams {
            dict_size: Some(64),
            samples: Some(2000),
            omp_k: Some(4),
            stop: Some(0.5),
            exact_ot: Some(true),
            ..FitParams::default()
        };
        let c = fit_config(&p);
        assert_eq!((c.dict_size, c.sample_count, c.omp_max_atoms), (64, 2000, 4));
        assert_eq!(c.rel_loss_stop, 0.5);
        assert!(c.exact_ot);
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::NumericFailure("x".into())).code(), 1);
        assert_eq!(Failure::from(Error::DegenerateDistribution).code(), 1);
        assert_eq!(Failure::from(Error::InvalidArgument("x".into())).code(), 2);
        let staged = Error::Stage {
            context: "iteration 3".into(),
            source: Box::new(Error::NumericFailure("nan".into())),
        };
        assert_eq!(Failure::from(staged).code(), 1);
    }
}
