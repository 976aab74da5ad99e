//! Command-line front end. Exit codes: 0 success, 2 input or configuration
//! error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use thickslice::gmm::{fit_gmm3, histogram_with_fit, pve_proxy};
use thickslice::metrics::{ncc_volume, psnr, ssim};
use thickslice::nifti::{read_nifti, write_nifti};
use thickslice::pipeline::{reconstruct, write_report, ReconstructionConfig};
use thickslice::rigid::RigidTransform;
use thickslice::simulate::{make_phantom, simulate_dataset, DatasetConfig, Group, PhantomSpec};
use thickslice::srr::SrrState;
use thickslice::svr::{fit_svr, transform_table};
use thickslice::volume::{SliceStack, VoxelGrid3D};

#[derive(Parser)]
#[command(name = "thickslice", version, about = "Motion-corrected super-resolution from thick-slice MR stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: normalize, align, then alternate SVR and SRR.
    Reconstruct {
        #[arg(long, num_args = 1.., required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Simulates motion-corrupted stacks for each ground truth (or for a
    /// generated phantom when none is given).
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 0..)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "a")]
        group: GroupArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset configuration (TOML); `--group` and `--seed` override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One SVR pass of the stacks against a volume; writes the transform table.
    Svr {
        #[arg(long, num_args = 1.., required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// SRR with fixed slice transforms (identity unless a table is given).
    Srr {
        #[arg(long, num_args = 1.., required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        transforms: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// PSNR, SSIM and NCC of a volume against a reference.
    Eval {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Voxels with non-zero mask value are evaluated (PSNR only).
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Three-class Gaussian mixture and partial-volume proxy of a volume.
    GmmPve {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Histogram with fitted components as CSV.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        bins: usize,
    },
}

fn load_stacks(paths: &[PathBuf]) -> anyhow::Result<Vec<SliceStack>> {
    paths
        .iter()
        .map(|p| {
            let g = read_nifti(p).with_context(|| format!("reading {}", p.display()))?;
            SliceStack::from_grid(&g).with_context(|| format!("stack {}", p.display()))
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ReconstructionConfig> {
    Ok(match path {
        Some(p) => ReconstructionConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ReconstructionConfig::default(),
    })
}

fn read_volume(p: &Path) -> anyhow::Result<VoxelGrid3D> {
    read_nifti(p).with_context(|| format!("reading {}", p.display()))
}

/// Parses `stack slice αx αy αz dx dy dz ...` rows into the stacks.
fn apply_transforms(stacks: &mut [SliceStack], text: &str) -> anyhow::Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 {
            bail!("transform table line {}: expected at least 8 fields", n + 1);
        }
        let s: usize = f[0].parse().with_context(|| format!("line {}", n + 1))?;
        let k: usize = f[1].parse().with_context(|| format!("line {}", n + 1))?;
        let mut p = [0.0; 6];
        for (i, v) in p.iter_mut().enumerate() {
            *v = f[2 + i].parse().with_context(|| format!("line {}", n + 1))?;
        }
        let state = stacks
            .get_mut(s)
            .and_then(|st| st.slices.get_mut(k))
            .with_context(|| format!("line {}: no slice {k} in stack {s}", n + 1))?;
        state.1.transform = RigidTransform::from_params(p);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Reconstruct {
            stacks,
            config,
            out,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let input = load_stacks(&stacks)?;
            match reconstruct(&input, &cfg) {
                Ok(r) => {
                    write_nifti(&r.volume, &out)?;
                    if let Some(dir) = report {
                        write_report(&dir, &r.report)?;
                    }
                    println!(
                        "{} SVR passes, {} SRR epochs, checksum {}",
                        r.report.svr_passes, r.report.srr_epochs, r.report.checksum
                    );
                }
                Err(f) => {
                    if let Some(dir) = report {
                        write_report(&dir, &f.report)?;
                        if let Some(v) = &f.volume {
                            write_nifti(v, dir.join("partial.nii"))?;
                        }
                    }
                    return Err(f.error.into());
                }
            }
        }
        Command::Simulate {
            out,
            gt,
            group,
            seed,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => toml::from_str::<DatasetConfig>(&std::fs::read_to_string(&p)?)
                    .map_err(|e| thickslice::Error::Config(e.to_string()))?,
                None => DatasetConfig::default(),
            };
            cfg.group = match group {
                GroupArg::A => Group::A,
                GroupArg::B => Group::B,
            };
            cfg.seed = seed;
            let gts: Vec<(String, VoxelGrid3D)> = if gt.is_empty() {
                let spec = PhantomSpec {
                    seed,
                    ..PhantomSpec::default()
                };
                let ph = make_phantom(&spec)?;
                std::fs::create_dir_all(&out)?;
                write_nifti(&ph.grid, out.join("phantom_gt.nii"))?;
                vec![("phantom".to_string(), ph.grid)]
            } else {
                gt.iter()
                    .map(|p| {
                        let id = p
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .unwrap_or("subject")
                            .trim_end_matches(".nii")
                            .to_string();
                        Ok((id, read_volume(p)?))
                    })
                    .collect::<anyhow::Result<_>>()?
            };
            let m = simulate_dataset(&out, &gts, &cfg)?;
            println!("{} subjects, {} stacks written to {}", m.entries.len(), m.num_stacks(), out.display());
        }
        Command::Svr {
            stacks,
            volume,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut st = load_stacks(&stacks)?;
            let x = read_volume(&volume)?;
            let mut net = None;
            let rep = fit_svr(&mut st, &x, &cfg.svr, &mut net)?;
            std::fs::write(&out, transform_table(&st, &rep))?;
            let flagged = rep.slices.iter().filter(|s| s.flagged).count();
            println!("{} slices registered, {flagged} flagged", rep.slices.len());
        }
        Command::Srr {
            stacks,
            transforms,
            config,
            out,
            trace,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut st = load_stacks(&stacks)?;
            if let Some(t) = transforms {
                apply_transforms(&mut st, &std::fs::read_to_string(&t)?)?;
            }
            let grid = thickslice::acquisition::footprint_grid(&st, cfg.target_spacing, 1)?;
            let mut state = SrrState::new(&st, &grid, &cfg.srr)?;
            state.fit(&st, cfg.srr.epochs)?;
            write_nifti(&state.volume()?, &out)?;
            if let Some(p) = trace {
                std::fs::write(p, state.trace.to_csv())?;
            }
            let last = state.trace.epochs.last().map_or(f64::NAN, |e| e.total);
            println!("{} epochs, final loss {last:.6}", state.epochs_done);
        }
        Command::Eval {
            volume,
            reference,
            mask,
        } => {
            let x = read_volume(&volume)?;
            let r = read_volume(&reference)?;
            let m = match mask {
                Some(p) => Some(read_volume(&p)?.data.iter().map(|v| *v != 0.0).collect::<Vec<_>>()),
                None => None,
            };
            println!("psnr {:.4}", psnr(&x, &r, m.as_deref())?);
            println!("ssim {:.6}", ssim(&x, &r)?);
            println!("ncc {:.6}", ncc_volume(&x, &r)?);
        }
        Command::GmmPve {
            volume,
            mask,
            iters,
            seed,
            hist,
            bins,
        } => {
            let x = read_volume(&volume)?;
            let samples: Vec<f64> = match mask {
                Some(p) => {
                    let m = read_volume(&p)?;
                    if m.dims != x.dims {
                        bail!("mask shape {:?} differs from volume {:?}", m.dims, x.dims);
                    }
                    x.data.iter().zip(&m.data).filter(|(_, m)| **m != 0.0).map(|(v, _)| *v).collect()
                }
                None => x.data.clone(),
            };
            let fit = fit_gmm3(&samples, iters, seed)?;
            for (i, c) in fit.components.iter().enumerate() {
                println!(
                    "component {i}: weight {:.4} mean {:.6} std {:.6} delta {:.6}",
                    c.weight,
                    c.mean,
                    c.std,
                    c.delta()
                );
            }
            println!("pve_proxy {:.6}", pve_proxy(&samples, &fit.components));
            if let Some(p) = hist {
                let mut csv = String::from("center,count,c0,c1,c2\n");
                for (x, n, f) in histogram_with_fit(&samples, &fit.components, bins) {
                    csv.push_str(&format!("{x:.6},{n},{:.4},{:.4},{:.4}\n", f[0], f[1], f[2]));
                }
                std::fs::write(p, csv)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<thickslice::Error>()) {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
