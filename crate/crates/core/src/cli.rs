//! Command line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::metrics::{bpip_bytes, chamfer, d1_psnr, d2_psnr};
use crate::model::Model;
use crate::pcio::{load_points, save_kitti_bin, save_ply, PointCloud, PointFormat};
use crate::pipeline::{bit_breakdown, compress, decompress, train, CompressedFrame, TrainFile};
use crate::synth::corpus;

#[derive(Debug, Parser)]
#[command(name = "lpcc", version, about = "Learned octree geometry codec for LiDAR point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a point cloud (.bin or .ply) into a frame file.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        depth: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decompress a frame into an ASCII PLY.
    Decode {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on every .bin/.ply file in a directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML file with optional [model] and [train] tables.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate and distortion per frame. Each line of the list holds
    /// `original reconstructed frame`.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// PSNR peak; defaults to the largest bounding-box side of each original.
        #[arg(long)]
        peak: Option<f64>,
    },
    /// Average rate and distortion of each model over a set of clouds. Each
    /// line of the list holds `checkpoint depth`.
    RdCurve {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Directory of .bin/.ply clouds to code.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        peak: Option<f64>,
    },
    /// Bits per segment of a frame.
    Breakdown {
        #[arg(long)]
        frame: PathBuf,
    },
    /// Write seeded synthetic scenes as KITTI .bin files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1000)]
        min_points: usize,
        #[arg(long, default_value_t = 4000)]
        max_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    let cloud = load_points(path, PointFormat::from_path(path)?)?;
    cloud.validate()?;
    Ok(cloud)
}

fn cloud_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| PointFormat::from_path(p).is_ok());
    files.sort();
    if files.is_empty() {
        return invalid(format!("no .bin or .ply files in {}", dir.display()));
    }
    Ok(files)
}

fn read_frame(path: &Path) -> Result<CompressedFrame> {
    CompressedFrame::from_bytes(&fs::read(path)?)
}

fn default_peak(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if side > 0.0 {
        side
    } else {
        1.0
    }
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Distortion of `rec` against `orig`: D1 and D2 in dB, then chamfer.
fn distortion(orig: &[[f64; 3]], rec: &[[f64; 3]], peak: f64) -> Result<(f64, f64, f64)> {
    Ok((d1_psnr(orig, rec, peak)?, d2_psnr(orig, rec, peak)?, chamfer(orig, rec)?))
}

fn whitespace_lines(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if parts.len() != fields {
            return invalid(format!("{}:{}: expected {fields} fields", path.display(), n + 1));
        }
        out.push(parts);
    }
    Ok(out)
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Encode { input, model, depth, output } => {
            let cloud = load_cloud(&input)?;
            let model = Model::load(&model)?;
            let frame = compress(&cloud, &model, depth)?;
            let bytes = frame.to_bytes();
            fs::write(&output, &bytes)?;
            writeln!(out, "{} points -> {} bytes, {:.4} bpip", cloud.len(), bytes.len(), bpip_bytes(bytes.len(), cloud.len())?)?;
        }
        Command::Decode { frame, model, output } => {
            let frame = read_frame(&frame)?;
            let model = Model::load(&model)?;
            let cloud = decompress(&frame, &model)?;
            save_ply(&output, &cloud.points, None)?;
            writeln!(out, "{} points", cloud.len())?;
        }
        Command::Train { corpus, config, out: path } => {
            let file = TrainFile::from_text(&fs::read_to_string(&config)?)?;
            let clouds = cloud_files(&corpus)?
                .iter()
                .map(|p| load_cloud(p))
                .collect::<Result<Vec<_>>>()?;
            let mut log = String::new();
            let (model, _) = train(&clouds, &file.model, &file.train, |r| {
                let nodes: usize = r.rates.layers.iter().map(|l| l.nodes).sum::<usize>().max(1);
                let _ = writeln!(
                    log,
                    "epoch {:>4}  steps {:>5}  alpha {:.2}  lr {:.2e}  loss {:.4}  occupancy {:.4} b/node  latent {:.4} b/node",
                    r.epoch,
                    r.steps,
                    r.alpha,
                    r.lr,
                    r.loss,
                    r.rates.learned_occupancy_bits() / nodes as f64,
                    r.rates.residual_bits() / nodes as f64
                );
            })?;
            out.write_all(log.as_bytes())?;
            model.save(&path)?;
            writeln!(out, "saved {}", path.display())?;
        }
        Command::Eval { pairs, csv, peak } => {
            let mut text = String::from("frame,bpip,d1_db,d2_db,chamfer\n");
            for row in whitespace_lines(&pairs, 3)? {
                let orig = load_cloud(Path::new(&row[0]))?;
                let rec = load_cloud(Path::new(&row[1]))?;
                let bytes = fs::metadata(&row[2])?.len() as usize;
                let peak = peak.unwrap_or_else(|| default_peak(&orig.points));
                let (d1, d2, cd) = distortion(&orig.points, &rec.points, peak)?;
                let rate = bpip_bytes(bytes, orig.len())?;
                let _ = writeln!(text, "{},{},{},{},{}", row[2], fmt_num(rate), fmt_num(d1), fmt_num(d2), fmt_num(cd));
            }
            fs::write(&csv, &text)?;
            out.write_all(text.as_bytes())?;
        }
        Command::RdCurve { models, csv, inputs, peak } => {
            let clouds = cloud_files(&inputs)?
                .iter()
                .map(|p| load_cloud(p))
                .collect::<Result<Vec<_>>>()?;
            let mut text = String::from("model,depth,bpip,d1_db,d2_db,chamfer\n");
            for row in whitespace_lines(&models, 2)? {
                let model = Model::load(&row[0])?;
                let depth: u32 = row[1].parse().map_err(|_| Error::Invalid(format!("bad depth {}", row[1])))?;
                let (mut rate, mut d1, mut d2, mut cd) = (0.0, 0.0, 0.0, 0.0);
                for cloud in &clouds {
                    let frame = compress(cloud, &model, depth)?;
                    let rec = decompress(&frame, &model)?;
                    let p = peak.unwrap_or_else(|| default_peak(&cloud.points));
                    let d = distortion(&cloud.points, &rec.points, p)?;
                    rate += bpip_bytes(frame.total_len(), cloud.len())?;
                    d1 += d.0;
                    d2 += d.1;
                    cd += d.2;
                }
                let n = clouds.len() as f64;
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{}",
                    row[0],
                    depth,
                    fmt_num(rate / n),
                    fmt_num(d1 / n),
                    fmt_num(d2 / n),
                    fmt_num(cd / n)
                );
            }
            fs::write(&csv, &text)?;
            out.write_all(text.as_bytes())?;
        }
        Command::Breakdown { frame } => {
            let frame = read_frame(&frame)?;
            let r = bit_breakdown(&frame);
            writeln!(out, "header            {:>10} bits", r.header_bits)?;
            writeln!(out, "top occupancy     {:>10} bits", r.top_occupancy_bits)?;
            writeln!(out, "coarsest latent   {:>10} bits", r.root_latent_bits)?;
            for l in &r.layers {
                writeln!(out, "layer {:>2} residual {:>10} bits", l.layer, l.residual_bits)?;
                writeln!(out, "layer {:>2} occupancy{:>10} bits", l.layer, l.occupancy_bits)?;
            }
            writeln!(out, "total             {:>10} bits", r.total_bits())?;
            writeln!(out, "latent share      {:>10.2} %", r.latent_share())?;
        }
        Command::Synth { out: dir, count, min_points, max_points, seed } => {
            if min_points == 0 || min_points > max_points {
                return invalid("need 0 < min-points <= max-points");
            }
            fs::create_dir_all(&dir)?;
            let clouds = corpus(&mut ChaCha8Rng::seed_from_u64(seed), count, (min_points, max_points));
            for (i, c) in clouds.iter().enumerate() {
                save_kitti_bin(dir.join(format!("{i:06}.bin")), c)?;
            }
            writeln!(out, "wrote {count} clouds to {}", dir.display())?;
        }
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
