use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kanet_core::checkpoint::{load_checkpoint, save_checkpoint};
use kanet_core::config::{parse_config, FileConfig};
use kanet_core::experiments::{grid_demo, render_grid_demo, render_scaling_csv, scaling_experiment};
use kanet_core::hsi::{
    compute_metrics, extract_patches, read_cube, stratified_split, synth_cube, write_cube,
    BandStats, SplitSpec, SynthParams,
};
use kanet_core::model::build_kanet;
use kanet_core::train::{class_map, predict, render_history_csv, render_report, train};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "kanet", about = "3D KAN convolution networks for hyperspectral classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a synthetic labeled cube in HSC1 format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long, default_value_t = 12)]
        blobs: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a KANet on a labeled cube.
    Train {
        #[arg(long)]
        cube: PathBuf,
        /// Spatial patch size M (odd).
        #[arg(long)]
        patch: usize,
        /// Split ratios, e.g. 6:1:3.
        #[arg(long)]
        split: String,
        /// Flat key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config file seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled cube.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        /// Optional P5 PGM class-map output path.
        #[arg(long)]
        raster: Option<PathBuf>,
    },
    /// Run the finite-difference gradient-check suite.
    Gradcheck {
        /// Check a single layer type by name.
        #[arg(long)]
        layer: Option<String>,
    },
    /// Run the parameter-count scaling study and write a CSV.
    Scaling {
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the adaptive grid update on a bimodal sample.
    GridDemo {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    kanet_core::init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            classes,
            height,
            width,
            bands,
            blobs,
            noise,
            seed,
        } => {
            let cube = synth_cube(&SynthParams {
                classes,
                height,
                width,
                bands,
                blob_count: blobs,
                noise_sigma: noise,
                seed,
            })?;
            write_cube(&cube, &out)?;
            let labeled = cube.labels.iter().filter(|&&v| v > 0).count();
            println!(
                "wrote {}x{}x{} cube with {} classes, {} labeled pixels to {}",
                height,
                width,
                bands,
                classes,
                labeled,
                out.display()
            );
        }
        Command::Train {
            cube,
            patch,
            split,
            config,
            seed,
            out,
        } => run_train(cube, patch, &split, config, seed, out)?,
        Command::Eval {
            checkpoint,
            cube,
            raster,
        } => run_eval(checkpoint, cube, raster)?,
        Command::Gradcheck { layer } => run_gradcheck(layer.as_deref())?,
        Command::Scaling { out } => {
            let report = scaling_experiment(0)?;
            std::fs::write(&out, render_scaling_csv(&report))?;
            println!(
                "kan_slope={:.4} mlp_slope={:.4} -> {}",
                report.kan_slope,
                report.mlp_slope,
                out.display()
            );
        }
        Command::GridDemo { epsilon, seed } => {
            print!("{}", render_grid_demo(&grid_demo(epsilon, seed)?));
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("split must look like a:b:c, got {s:?}");
    }
    let v: Vec<u32> = parts
        .iter()
        .map(|p| p.trim().parse().with_context(|| format!("bad split part {p:?}")))
        .collect::<Result<_>>()?;
    Ok((v[0], v[1], v[2]))
}

fn run_train(
    cube_path: PathBuf,
    patch: usize,
    split: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    let ratios = parse_split(split)?;
    let mut file_cfg: FileConfig = match &config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text)?
        }
        None => FileConfig::default(),
    };
    if let Some(s) = seed {
        file_cfg.train.seed = s;
    }
    let cube = read_cube(&cube_path)?;
    let mut ps = extract_patches(&cube, patch)?;
    if ps.is_empty() {
        bail!("cube has no labeled pixels");
    }
    let splits = stratified_split(
        &ps,
        &SplitSpec {
            ratios,
            seed: file_cfg.train.seed,
        },
    )?;
    for w in &splits.warnings {
        eprintln!("warning: {w}");
    }
    let stats = BandStats::from_patches(&ps, &splits.train)?;
    stats.apply(&mut ps);

    let net_cfg = file_cfg.network((patch, patch, cube.bands), cube.classes);
    let mut model = build_kanet(&net_cfg, file_cfg.train.seed)?;
    let outcome = train(&mut model, &ps, &splits, &file_cfg.train)?;

    std::fs::create_dir_all(&out)?;
    save_checkpoint(&out.join("checkpoint.kanc"), &outcome.best_model, &stats)?;
    std::fs::write(out.join("report.txt"), render_report(&outcome.report))?;
    std::fs::write(out.join("history.csv"), render_history_csv(&outcome.report))?;
    println!(
        "test OA={:.4} AA={:.4} Kappa={:.4} (best epoch {}) -> {}",
        outcome.report.test.oa,
        outcome.report.test.aa,
        outcome.report.test.kappa,
        outcome.report.best_epoch,
        out.display()
    );
    Ok(())
}

fn run_eval(checkpoint: PathBuf, cube_path: PathBuf, raster: Option<PathBuf>) -> Result<()> {
    let (model, stats) = load_checkpoint(&checkpoint)?;
    let cube = read_cube(&cube_path)?;
    let (m, n, l) = model.cfg.patch;
    if m != n {
        bail!("checkpoint patch geometry {m}x{n} is not square");
    }
    if cube.bands != l {
        bail!("cube has {} bands but the checkpoint expects {l}", cube.bands);
    }
    if cube.classes != model.cfg.classes {
        bail!(
            "cube has {} classes but the checkpoint expects {}",
            cube.classes,
            model.cfg.classes
        );
    }
    let mut ps = extract_patches(&cube, m)?;
    if ps.is_empty() {
        bail!("cube has no labeled pixels");
    }
    stats.apply(&mut ps);
    let all: Vec<usize> = (0..ps.len()).collect();
    let preds = predict(&model, &ps, &all, 64)?;
    let metrics = compute_metrics(&ps.labels, &preds, cube.classes)?;
    println!(
        "OA={:.4} AA={:.4} Kappa={:.4} over {} labeled pixels",
        metrics.oa,
        metrics.aa,
        metrics.kappa,
        ps.len()
    );
    for (i, &(hit, total)) in metrics.per_class.iter().enumerate() {
        if total > 0 {
            println!("class {}: {}/{} = {:.4}", i + 1, hit, total, hit as f64 / total as f64);
        }
    }
    if let Some(path) = raster {
        let map = class_map(&cube, &ps.provenance, &preds)?;
        let mut pgm = format!("P5\n{} {}\n255\n", cube.width, cube.height).into_bytes();
        pgm.extend_from_slice(&map);
        std::fs::write(&path, pgm)?;
        println!("class map -> {}", path.display());
    }
    Ok(())
}

fn run_gradcheck(layer: Option<&str>) -> Result<()> {
    use kanet_core::conv3d::{
        AvgPool3dOp, ConvGeometry, GlobalAvgPoolOp, KanConv3d, KanConv3dOp, LinearConv3d,
        LinearConv3dOp,
    };
    use kanet_core::gradcheck::{grad_check, BatchNormOp, GradCheckOpts, MatmulOp, SiluOp};
    use kanet_core::kan_linear::{KanLinear, KanLinearOp};
    use kanet_core::model::{
        build_kanet, HeadKind, KanetModelOp, NetworkConfig, SplineSettings,
    };
    use kanet_core::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let threshold = 1e-4;
    let mut failures = 0usize;
    let mut ran = 0usize;

    let mut run = |name: &str,
                   op: &dyn kanet_core::gradcheck::DifferentiableOp,
                   inputs: &[Tensor],
                   opts: GradCheckOpts|
     -> Result<()> {
        if let Some(want) = layer {
            if want != name {
                return Ok(());
            }
        }
        ran += 1;
        match grad_check(op, inputs, opts) {
            Ok(err) => {
                let ok = err < threshold;
                if !ok {
                    failures += 1;
                }
                println!(
                    "[{}] {name}: max rel err {err:.3e}",
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            Err(e) => {
                failures += 1;
                println!("[FAIL] {name}: {e}");
            }
        }
        Ok(())
    };

    let a = Tensor::randn(&[6, 5], &mut rng);
    let b = Tensor::randn(&[5, 4], &mut rng);
    run("matmul", &MatmulOp, &[a, b], GradCheckOpts::default())?;

    run("silu", &SiluOp, &[Tensor::randn(&[64], &mut rng)], GradCheckOpts::default())?;

    let x = Tensor::randn(&[4, 3, 10], &mut rng);
    let gamma = Tensor::randn(&[3], &mut rng);
    let beta = Tensor::randn(&[3], &mut rng);
    run("batch_norm", &BatchNormOp { channels: 3 }, &[x, gamma, beta], GradCheckOpts::default())?;

    let kan = KanLinear::init(4, 3, 5, 3, 1, 0.1)?;
    let x = Tensor::rand_uniform(&[8, 4], -0.9, 0.9, &mut rng);
    let inputs = vec![
        x,
        kan.base_weight.clone(),
        kan.spline_scaler.clone(),
        kan.spline_weight.clone(),
    ];
    run("kan_linear", &KanLinearOp { template: kan }, &inputs, GradCheckOpts::default())?;

    let conv = LinearConv3d::init(2, 3, ConvGeometry::simple(3, 1, 1), 2);
    let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
    let inputs = vec![x, conv.weight.clone(), conv.bias.clone()];
    run("linear_conv3d", &LinearConv3dOp { template: conv }, &inputs, GradCheckOpts::default())?;

    let kconv = KanConv3d::init(2, 2, ConvGeometry::simple(3, 1, 1), 5, 3, 3, 0.1)?;
    let x = Tensor::rand_uniform(&[1, 2, 4, 4, 4], -0.9, 0.9, &mut rng);
    let inputs = vec![
        x,
        kconv.inner.base_weight.clone(),
        kconv.inner.spline_scaler.clone(),
        kconv.inner.spline_weight.clone(),
    ];
    run("kan_conv3d", &KanConv3dOp { template: kconv }, &inputs, GradCheckOpts::default())?;

    let x = Tensor::randn(&[1, 2, 4, 4, 4], &mut rng);
    run(
        "avg_pool3d",
        &AvgPool3dOp {
            window: (2, 2, 2),
            stride: (2, 2, 2),
        },
        &[x],
        GradCheckOpts::default(),
    )?;

    let x = Tensor::randn(&[2, 3, 2, 2, 2], &mut rng);
    run("global_avg_pool", &GlobalAvgPoolOp, &[x], GradCheckOpts::default())?;

    let cfg = NetworkConfig {
        stages: vec![1, 1],
        k0: 2,
        spline: SplineSettings::default(),
        patch: (7, 7, 8),
        classes: 3,
        bottleneck_factor: 2,
        compression: 0.5,
        head: HeadKind::Linear,
    };
    let model = build_kanet(&cfg, 4)?;
    let x = Tensor::randn(&[4, 1, 7, 7, 8], &mut rng).scale(0.5);
    let flat = model.params_to_vec();
    let n = flat.len();
    let inputs = vec![x, Tensor::new(vec![n], flat)?];
    run(
        "model",
        &KanetModelOp { template: model },
        &inputs,
        GradCheckOpts {
            max_coords: 2000,
            ..GradCheckOpts::default()
        },
    )?;

    if ran == 0 {
        bail!(
            "unknown layer {:?}; known: matmul silu batch_norm kan_linear linear_conv3d kan_conv3d avg_pool3d global_avg_pool model",
            layer.unwrap_or("")
        );
    }
    if failures > 0 {
        bail!("{failures} gradient check(s) failed");
    }
    Ok(())
}
