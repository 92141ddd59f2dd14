mod commands;
mod config;
mod model;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{Sources, UsageError};

/// Voxel radiance-field diffusion: datasets, fitting, training, sampling,
/// completion, guidance and evaluation.
///
/// Every command reads an optional flat JSON config (`--config`), then
/// `--set KEY=VALUE` pairs, then its named flags, and writes the resolved
/// config next to its outputs.
#[derive(Parser)]
#[command(name = "raddiff", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON object of config keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; VALUE is JSON or a bare string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn sources(self) -> Sources {
        let mut s = Sources {
            file: self.config,
            sets: self.sets,
            flags: Vec::new(),
        };
        s.flag("seed", self.seed);
        s
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset: one scene directory per shape.
    MakeData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a voxel field to a scene's posed images.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoiser on a directory of fitted scenes.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        /// Continue from OUT/trainer.ckpt.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Draw unconditional samples.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "n")]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate the masked voxels of a field.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resample: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample a field steered towards one posed image.
    Guide {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Pixels with luminance above 0.5 are foreground.
        #[arg(long)]
        fgmask: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        res: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a field from cameras in a JSON file or along a turntable.
    Render {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, conflicts_with = "spiral", required_unless_present = "spiral")]
        camera: Option<PathBuf>,
        #[arg(long)]
        spiral: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the density iso-surface as an OBJ mesh.
    Mesh {
        #[arg(long)]
        field: PathBuf,
        /// Density level; defaults to half the density at pre-activation 0.
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Coverage, minimum matching distance and pairwise Chamfer distances.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR of renders outside the footprint of a voxel mask.
    EvalMpsnr {
        /// The edited field.
        #[arg(long)]
        out: PathBuf,
        /// The original field.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a mask selecting an axis-aligned box of the [-1, 1]³ domain.
    MakeMask {
        #[arg(long)]
        res: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-1.0, -1.0, -1.0])]
        lo: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [1.0, 1.0, 1.0])]
        hi: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::MakeData { spec, out, seed } => commands::make_data(&spec, &out, seed),
        Command::Fit {
            scene,
            out,
            res,
            iters,
            common,
        } => {
            let mut src = common.sources();
            src.flag("resolution", res);
            src.flag("iterations", iters);
            commands::fit(&scene, &out, src)
        }
        Command::Train {
            data,
            out,
            iters,
            resume,
            common,
        } => {
            let mut src = common.sources();
            src.flag("iterations", iters);
            commands::train(&data, &out, src, resume)
        }
        Command::Sample {
            ckpt,
            count,
            out,
            res,
            common,
        } => {
            let mut src = common.sources();
            src.flag("count", count);
            src.flag("resolution", res);
            commands::sample(&ckpt, &out, src)
        }
        Command::Complete {
            ckpt,
            input,
            mask,
            out,
            resample,
            common,
        } => {
            let mut src = common.sources();
            src.flag("resample", resample);
            commands::complete(&ckpt, &input, &mask, &out, src)
        }
        Command::Guide {
            ckpt,
            image,
            camera,
            fgmask,
            lambda,
            out,
            res,
            common,
        } => {
            let mut src = common.sources();
            src.flag("lambda", lambda);
            src.flag("resolution", res);
            commands::guide(&ckpt, &image, &camera, &fgmask, &out, src)
        }
        Command::Render {
            field,
            camera,
            spiral: _,
            out,
            common,
        } => commands::render(&field, camera.as_deref(), &out, common.sources()),
        Command::Mesh {
            field,
            iso,
            out,
            common,
        } => {
            let mut src = common.sources();
            src.flag("iso", iso);
            commands::mesh(&field, &out, src)
        }
        Command::Eval {
            gen,
            reference,
            out,
            common,
        } => commands::eval(&gen, &reference, &out, common.sources()),
        Command::EvalMpsnr {
            out,
            input,
            mask,
            cameras,
            report,
            common,
        } => commands::eval_mpsnr(&out, &input, &mask, &cameras, report.as_deref(), common.sources()),
        Command::MakeMask { res, lo, hi, out } => {
            let corner = |v: Vec<f64>| -> anyhow::Result<[f64; 3]> {
                v.try_into()
                    .map_err(|v: Vec<f64>| config::usage(format!("box corners need 3 coordinates, got {}", v.len())))
            };
            commands::make_mask(res, corner(lo)?, corner(hi)?, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<raddiff_core::Error>()) {
        Some(raddiff_core::Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RADDIFF_LOG")
        .format_timestamp_secs()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
