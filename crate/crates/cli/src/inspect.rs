//! Summaries of a finished run: operation usage per importance bin and,
//! optionally, a Grad-CAM overlay for one probe image.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};
use image::RgbImage;
use paa_core::augment::{OpKind, PatchGrid};
use paa_core::trainer::{
    bin_patch_importance, checkpoint_path, grad_cam, load_datasets, Checkpoint, ImportanceBin, TrainConfig, Trainer,
    CONFIG_FILE, EPOCHS_FILE, USAGE_FILE,
};

use crate::error::{runtime, CliError, Result};

pub fn command() -> Command {
    Command::new("inspect")
        .about("Aggregate a run's policy usage per epoch, importance bin and operation")
        .arg(
            Arg::new("run")
                .long("run")
                .value_name("DIR")
                .required(true)
                .help("run directory written by `train`"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("FILE")
                .help("write the aggregated CSV here instead of stdout"),
        )
        .arg(
            Arg::new("gradcam")
                .long("gradcam")
                .value_name("DIR")
                .help("write a Grad-CAM overlay PNG and its patch bins for one probe image"),
        )
        .arg(
            Arg::new("image")
                .long("image")
                .value_name("INDEX")
                .value_parser(value_parser!(usize))
                .help("probe image for --gradcam (default: chosen by --seed)"),
        )
}

type Usage = BTreeMap<(usize, usize, usize), (f64, usize)>;

fn read_usage(path: &Path) -> Result<Usage> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut usage = Usage::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let bad = || CliError::Data(format!("{}: malformed row {}", path.display(), line + 2));
        let epoch: usize = record.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let bin: ImportanceBin = record.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let op: OpKind = record.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let fraction: f64 = record.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let slot = usage.entry((epoch, bin.index(), op.index())).or_insert((0.0, 0));
        slot.0 += fraction;
        slot.1 += 1;
    }
    Ok(usage)
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let dir = PathBuf::from(m.get_one::<String>("run").expect("required"));
    if !dir.is_dir() {
        return Err(CliError::Data(format!("run directory {} not found", dir.display())));
    }
    let usage = read_usage(&dir.join(USAGE_FILE))?;

    let mut csv_out = String::from("epoch,bin,op,fraction\n");
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(epoch, bin, op), &(total, count)) in &usage {
        let fraction = total / count as f64;
        *sums.entry((epoch, bin)).or_default() += fraction;
        writeln!(
            csv_out,
            "{epoch},{},{},{fraction}",
            ImportanceBin::ALL[bin],
            OpKind::ALL[op]
        )
        .expect("writing to a String");
    }
    match m.get_one::<String>("out") {
        Some(path) => fs::write(path, &csv_out).map_err(|e| runtime(format!("{path}: {e}")))?,
        None => print!("{csv_out}"),
    }
    let off: Vec<String> = sums
        .iter()
        .filter(|(_, &s)| (s - 1.0).abs() > 1e-6)
        .map(|(&(e, b), s)| format!("epoch {e} bin {}: {s}", ImportanceBin::ALL[b]))
        .collect();
    eprintln!(
        "{} (epoch, bin) groups over {} epochs; fractions sum to 1 in {} of them",
        sums.len(),
        sums.keys()
            .map(|k| k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        sums.len() - off.len()
    );
    if let Ok(text) = fs::read_to_string(dir.join(EPOCHS_FILE)) {
        if let Some(last) = text.lines().skip(1).last() {
            eprintln!("last epoch (epoch,test_accuracy,mean_reward,mean_loss_aug): {last}");
        }
    }
    if !off.is_empty() {
        return Err(runtime(format!("fractions do not sum to 1: {}", off.join("; "))));
    }

    if let Some(out) = m.get_one::<String>("gradcam") {
        gradcam_overlay(&dir, Path::new(out), m.get_one::<usize>("image").copied(), seed)?;
    }
    Ok(())
}

fn latest_checkpoint(dir: &Path, epochs: usize) -> Option<PathBuf> {
    (1..=epochs).rev().map(|e| checkpoint_path(dir, e)).find(|p| p.exists())
}

fn gradcam_overlay(dir: &Path, out: &Path, image: Option<usize>, seed: u64) -> Result<()> {
    let snapshot = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&snapshot).map_err(|e| CliError::Data(format!("{}: {e}", snapshot.display())))?;
    let config = TrainConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let ckpt_path = latest_checkpoint(dir, config.epochs)
        .ok_or_else(|| CliError::Data(format!("no checkpoint in {}", dir.display())))?;
    let (train, _) = load_datasets(&config)?;
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&ckpt_path)?, train.image_size())?;
    let probe = train.head(config.probe_size.max(1));
    let index = image.unwrap_or((seed % probe.len() as u64) as usize);
    if index >= probe.len() {
        return Err(CliError::Usage(format!(
            "--image {index} is outside the {} probe images",
            probe.len()
        )));
    }
    let (x, _) = probe.batch(&[index]);
    let cam = grad_cam(&trainer.target, &x, &[probe.classes[index]]).map_err(runtime)?;
    let (mh, mw) = (cam.shape()[1], cam.shape()[2]);
    let (h, w) = probe.image_size();
    let grid = PatchGrid::new(config.patches).map_err(runtime)?;
    let bins = bin_patch_importance(cam.data(), (mh, mw), (h, w), &grid);

    let peak = cam.data().iter().cloned().fold(0.0f32, f32::max);
    let plane = h * w;
    let img = RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let (px, py) = (px as usize, py as usize);
        let heat = cam.data()[(py * mh / h) * mw + px * mw / w] / if peak > 0.0 { peak } else { 1.0 };
        let at = |c: usize| {
            let base = x.data()[c * plane + py * w + px];
            let tint = if c == 0 { heat } else { 0.0 };
            ((0.6 * base + 0.4 * tint).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let png = out.join(format!("gradcam_{index}.png"));
    img.save(&png).map_err(|e| runtime(format!("{}: {e}", png.display())))?;
    let mut listing = format!(
        "# image {index} class {} checkpoint {}\n# patch bin\n",
        probe.classes[index],
        ckpt_path.display()
    );
    for (i, b) in bins.iter().enumerate() {
        writeln!(listing, "{i} {b}").expect("writing to a String");
    }
    let txt = out.join(format!("gradcam_{index}_bins.txt"));
    fs::write(&txt, listing).map_err(|e| runtime(format!("{}: {e}", txt.display())))?;
    eprintln!("wrote {} and {}", png.display(), txt.display());
    Ok(())
}
