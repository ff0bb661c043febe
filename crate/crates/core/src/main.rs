use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splat_slam::io::dataset::{read_tum_trajectory, write_depth_png, write_rgb_png};
use splat_slam::io::export::format_trajectory;
use splat_slam::io::synthetic::{generate_synthetic, SyntheticSpec};
use splat_slam::io::{ate_rmse, import_ply, run_slam, DatasetFormat, RunConfig};
use splat_slam::raster::{render, RenderSettings};
use splat_slam::scene::CameraIntrinsics;
use splat_slam::{Result, SlamError};

#[derive(Parser)]
#[command(
    name = "splat-slam",
    version,
    about = "RGB-D SLAM on compact 3D Gaussians"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full system on a dataset.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset_format: Option<DatasetFormat>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        single_thread: bool,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a PLY map from the first pose of a TUM trajectory file.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `fx,fy,cx,cy,width,height`; defaults to the synthetic camera.
        #[arg(long, value_delimiter = ',', num_args = 6)]
        intrinsics: Option<Vec<f64>>,
    },
    /// ATE-RMSE (cm) between two TUM trajectories.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Write a synthetic sequence as a folder dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            dataset_format,
            seed,
            single_thread,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(f) = dataset_format {
                cfg.dataset_format = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if single_thread {
                cfg.single_thread = true;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let report = run_slam(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report.metrics).expect("metrics serialize")
            );
        }
        Command::Render {
            map,
            pose,
            out,
            intrinsics,
        } => {
            let map = import_ply(&map, splat_slam::compaction::MaskConfig::default().epsilon)?;
            let traj = read_tum_trajectory(&pose)?;
            let first = traj
                .first()
                .ok_or_else(|| SlamError::Config(format!("{} holds no pose", pose.display())))?;
            let k = match intrinsics.as_deref() {
                Some(&[fx, fy, cx, cy, w, h]) => CameraIntrinsics {
                    fx,
                    fy,
                    cx,
                    cy,
                    width: w as usize,
                    height: h as usize,
                    depth_scale: 5000.0,
                },
                _ => splat_slam::io::synthetic::synthetic_intrinsics(&SyntheticSpec::default()),
            };
            k.validate()?;
            let img = render(&map, &first.pose, &k, &RenderSettings::default());
            write_rgb_png(&img.color, &out)?;
        }
        Command::Eval { est, gt } => {
            let est = read_tum_trajectory(&est)?;
            let gt = read_tum_trajectory(&gt)?;
            println!("ate_rmse_cm {:.6}", ate_rmse(&est, &gt)?);
        }
        Command::Synth { seed, out } => {
            let spec = SyntheticSpec::default();
            let (ds, _) = generate_synthetic(seed, &spec);
            write_folder(&ds, &out)?;
            println!("wrote {} frames to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn write_folder(ds: &splat_slam::io::Dataset, out: &std::path::Path) -> Result<()> {
    use splat_slam::io::dataset::FrameData;
    let io = |p: &std::path::Path, source| SlamError::Io {
        path: p.to_path_buf(),
        source,
    };
    let depth_scale = 5000.0;
    for sub in ["rgb", "depth"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    for (i, f) in ds.frames.iter().enumerate() {
        if let FrameData::Memory { rgb, depth } = &f.data {
            write_rgb_png(rgb, &out.join(format!("rgb/{i:05}.png")))?;
            if let Some(depth) = depth {
                write_depth_png(depth, &out.join(format!("depth/{i:05}.png")), depth_scale)?;
            }
        }
    }
    let k = ds.intrinsics;
    let intr = out.join("intrinsics.txt");
    let text = format!(
        "{} {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, depth_scale
    );
    std::fs::write(&intr, text).map_err(|e| io(&intr, e))?;
    if let Some(gt) = &ds.ground_truth {
        let traj = out.join("traj.txt");
        std::fs::write(&traj, format_trajectory(gt)).map_err(|e| io(&traj, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
