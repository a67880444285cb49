use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use groupfree3d::ablation::{ablate, AblationAxis};
use groupfree3d::decoder::write_attention_csv;
use groupfree3d::diffcore::Graph;
use groupfree3d::evalkit::{
    evaluate, parse_ground_truth, read_detections, svg_line_plot, write_detections, EvalReport, EVAL_THRESHOLDS,
};
use groupfree3d::geometry::IouMode;
use groupfree3d::scenegen::{read_dataset, read_scene, write_dataset, Dataset, Scene};
use groupfree3d::train::{load_run, metrics_line, predict, predict_scene, train, RunConfig};
use groupfree3d::{Error, Result};

#[derive(Parser)]
#[command(name = "gf3d", version, about = "Attention-based 3D object detection on synthetic point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML). Overrides --preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in configuration: default, overfit or ablation.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Number of seeds to run, starting at --seed.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a detector and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset directory; generated from the config when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a trained run, or a detections file against ground truth.
    Eval {
        /// Run directory to predict with.
        #[arg(long, value_name = "DIR", conflicts_with = "dets")]
        run: Option<PathBuf>,
        /// Dataset directory (with --run); regenerated from the run config when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Detections text file.
        #[arg(long, value_name = "PATH", requires = "gt")]
        dets: Option<PathBuf>,
        /// Ground truth: a dataset directory or a text file.
        #[arg(long, value_name = "PATH")]
        gt: Option<PathBuf>,
        /// Class names for text ground truth, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// Use yawed IoU for text ground truth.
        #[arg(long)]
        oriented: bool,
        /// Merge all decoder stages before evaluation.
        #[arg(long)]
        ensemble: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Detect objects in one scene file.
    Detect {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long)]
        ensemble: bool,
        /// Output detections file; stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Sweep one design axis over seeds and report validation mAP.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// sampling, encoding, layers, aggregation or ensemble.
        #[arg(long)]
        axis: String,
        /// Values to sweep: a comma list, or a range such as 0..6 for layers.
        values: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Dump cross-attention weights for one scene as CSV.
    Inspect {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Plot CSV columns as SVG line charts.
    Plot {
        input: PathBuf,
        #[arg(long, default_value = "epoch")]
        x: String,
        /// Columns to plot, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "mAP@0.25,mAP@0.5")]
        y: Vec<String>,
        /// Split series by the values of this column.
        #[arg(long)]
        by: Option<String>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { run, out } => {
            let cfg = run.load()?;
            let ds = cfg.generate_dataset()?;
            write_dataset(&out, &ds)?;
            println!("wrote {} train and {} val scenes to {}", ds.train.len(), ds.val.len(), out.display());
        }
        Command::Train { run, data, out } => {
            let mut cfg = run.load()?;
            let given = data.as_deref().map(read_dataset).transpose()?;
            if let Some(ds) = &given {
                cfg.generator = ds.generator.clone();
            }
            let first = cfg.seed;
            for k in 0..cfg.trials as u64 {
                let mut c = cfg.clone();
                c.seed = first + k;
                let dir = if cfg.trials == 1 { out.clone() } else { out.join(format!("seed{}", c.seed)) };
                let generated;
                let ds = match &given {
                    Some(ds) => ds,
                    None => {
                        generated = c.generate_dataset()?;
                        &generated
                    }
                };
                let outcome = train(&c, ds, Some(&dir))?;
                println!("seed {} -> {}", c.seed, dir.display());
                for row in &outcome.metrics {
                    println!("{}", metrics_line(row));
                }
            }
        }
        Command::Eval {
            run,
            data,
            split,
            dets,
            gt,
            classes,
            oriented,
            ensemble,
            out,
        } => {
            let report = match (run, dets) {
                (Some(run), _) => {
                    let (mut cfg, det, store) = load_run(&run)?;
                    cfg.ensemble |= ensemble;
                    let ds = match data.as_deref().or(gt.as_deref()) {
                        Some(d) => read_dataset(d)?,
                        None => cfg.generate_dataset()?,
                    };
                    let scenes = ds.split(&split)?;
                    let results = predict(&det, &store, scenes, cfg.ensemble, cfg.iou_mode())?;
                    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
                    write_detections(&out.join("detections.txt"), &results)?;
                    evaluate(&results, scenes, &class_names(&ds), &EVAL_THRESHOLDS, iou_mode(&ds))?
                }
                (None, Some(dets)) => {
                    let gt = gt.expect("clap enforces --gt with --dets");
                    let results = read_detections(&dets)?;
                    let (scenes, names, mode) = if gt.is_dir() {
                        let ds = read_dataset(&gt)?;
                        (ds.split(&split)?.to_vec(), class_names(&ds), iou_mode(&ds))
                    } else {
                        let text = std::fs::read_to_string(&gt).map_err(|e| io_err(&gt, e))?;
                        let scenes = parse_ground_truth(&text)?;
                        let names = classes.unwrap_or_else(|| default_class_names(&scenes, &results));
                        let mode = if oriented { IouMode::Oriented } else { IouMode::AxisAligned };
                        (scenes, names, mode)
                    };
                    evaluate(&results, &scenes, &names, &EVAL_THRESHOLDS, mode)?
                }
                (None, None) => return Err(Error::Argument("eval needs --run or --dets with --gt".into())),
            };
            write_report(&report, &out)?;
        }
        Command::Detect { run, scene, ensemble, out } => {
            let (cfg, det, store) = load_run(&run)?;
            let s = read_scene(&scene)?;
            let r = predict_scene(&det, &store, &s, cfg.ensemble || ensemble, cfg.iou_mode())?;
            match out {
                Some(p) => write_detections(&p, &[r])?,
                None => print!("{}", groupfree3d::evalkit::format_detections(&[r])),
            }
        }
        Command::Ablate { run, axis, values, out } => {
            let cfg = run.load()?;
            let axis: AblationAxis = axis.parse()?;
            let rows = ablate(&cfg, axis, values.as_deref(), &out, |r| {
                println!("{} {} seed {}: mAP@0.25 {:.4} mAP@0.5 {:.4}", axis.name(), r.label, r.seed, r.map[0], r.map[1]);
            })?;
            println!("{},runs,mAP@0.25,se@0.25,mAP@0.5,se@0.5", axis.name());
            for r in rows {
                println!("{},{},{:.6},{:.6},{:.6},{:.6}", r.label, r.runs, r.mean[0], r.se[0], r.mean[1], r.se[1]);
            }
        }
        Command::Inspect { run, scene, out } => {
            let (_, det, store) = load_run(&run)?;
            let s = read_scene(&scene)?;
            let mut g = Graph::new();
            let fwd = det.forward(&mut g, &store, &s.points, s.features.as_ref())?;
            let f = File::create(&out).map_err(|e| io_err(&out, e))?;
            write_attention_csv(&mut BufWriter::new(f), &fwd.stages)?;
        }
        Command::Plot { input, x, y, by, title, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| io_err(&input, e))?;
            let series = csv_series(&text, &x, &y, by.as_deref())?;
            let title = title.unwrap_or_else(|| input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let svg = svg_line_plot(&title, &x, &y.join(", "), &series);
            std::fs::write(&out, svg).map_err(|e| io_err(&out, e))?;
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn class_names(ds: &Dataset) -> Vec<String> {
    ds.generator.categories.iter().map(|c| c.name.clone()).collect()
}

fn iou_mode(ds: &Dataset) -> IouMode {
    if ds.generator.yaw {
        IouMode::Oriented
    } else {
        IouMode::AxisAligned
    }
}

fn default_class_names(scenes: &[Scene], results: &[groupfree3d::evalkit::DetectionResult]) -> Vec<String> {
    let max = scenes
        .iter()
        .flat_map(|s| &s.boxes)
        .chain(results.iter().flat_map(|r| &r.boxes))
        .map(|b| b.class_id + 1)
        .max()
        .unwrap_or(0);
    (0..max).map(|c| format!("class{c}")).collect()
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    report.write(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Series of `(x, y)` pairs from a CSV with a header row.
fn csv_series(text: &str, x: &str, ys: &[String], by: Option<&str>) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Argument(format!("CSV has no column {name:?}")))
    };
    let xi = col(x)?;
    let yi: Vec<usize> = ys.iter().map(|y| col(y)).collect::<Result<_>>()?;
    let bi = by.map(col).transpose()?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("CSV row {}: bad value in column {}", n + 2, header[i])))
        };
        let xv = num(xi)?;
        for (k, &i) in yi.iter().enumerate() {
            let name = match bi {
                Some(b) => format!("{} {}", ys[k], f.get(b).copied().unwrap_or("")),
                None => ys[k].clone(),
            };
            let yv = num(i)?;
            match series.iter_mut().find(|s| s.0 == name) {
                Some(s) => s.1.push((xv, yv)),
                None => series.push((name, vec![(xv, yv)])),
            }
        }
    }
    Ok(series)
}
