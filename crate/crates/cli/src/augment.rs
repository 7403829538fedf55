//! Offline augmentation of a directory of PNG images with a trained (or
//! random) policy. Each output image gets a sidecar listing the operation
//! map: one line per patch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};
use image::RgbImage;
use paa_core::augment::{draw_actions, execute_plan, split_patches, PatchGrid, Plan};
use paa_core::autodiff::Tape;
use paa_core::marl::{PolicyBundle, PolicyKind, SelectMode};
use paa_core::nn::Pass;
use paa_core::rng::{purpose, stream};
use paa_core::tensor::Tensor;
use paa_core::trainer::{checkpoint_config, Checkpoint};

use crate::error::{runtime, CliError, Result};

pub fn command() -> Command {
    Command::new("augment")
        .about("Apply a policy to every PNG in a directory and write the operation maps")
        .arg(
            Arg::new("checkpoint")
                .long("checkpoint")
                .value_name("CKPT")
                .help("trained policy; without it a fresh policy is used"),
        )
        .arg(
            Arg::new("images")
                .long("images")
                .value_name("DIR")
                .required(true)
                .help("directory of input PNG files"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .required(true)
                .help("directory for augmented images and sidecars"),
        )
        .arg(
            Arg::new("patches")
                .long("patches")
                .value_name("N")
                .value_parser(value_parser!(usize))
                .help("patches per image (default: the checkpoint's, else 4)"),
        )
        .arg(
            Arg::new("mode")
                .long("mode")
                .value_name("MODE")
                .value_parser(["sample", "greedy"])
                .default_value("sample")
                .help("sample from the policy or take its most likely operation"),
        )
        .arg(
            Arg::new("policy")
                .long("policy")
                .value_name("KIND")
                .value_parser(["marl", "random", "independent"])
                .help("policy kind (default: the checkpoint's, else random)"),
        )
        .arg(
            Arg::new("schedule")
                .long("schedule")
                .value_name("FRAC")
                .value_parser(value_parser!(f64))
                .help("position in the magnitude schedule, 0 mild to 1 severe (default: the checkpoint's)"),
        )
}

struct Loaded {
    name: String,
    pixels: Vec<f32>,
    size: (usize, usize),
}

fn read_png(path: &Path) -> std::result::Result<Loaded, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    Ok(Loaded {
        name,
        pixels,
        size: (h, w),
    })
}

/// Writes the `index`-th image of a `[B,3,H,W]` tensor as PNG.
pub fn write_png(images: &Tensor<f32>, index: usize, path: &Path) -> Result<()> {
    let [_, _, h, w] = images.shape()[..] else {
        return Err(runtime("expected a [B,3,H,W] tensor"));
    };
    let plane = h * w;
    let data = &images.data()[index * 3 * plane..(index + 1) * 3 * plane];
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (data[c * plane + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn sidecar(plan: &Plan, image: usize, names: &[String]) -> String {
    let mut out = String::from("# patch op applied p magnitude lambda partner\n");
    for patch in 0..plan.patches() {
        let a = plan.action(image, patch);
        let partner = match a.partner {
            Some(p) => format!("{}:{}", names[p.image], p.patch),
            None => "-".into(),
        };
        writeln!(
            out,
            "{patch} {} {} {:.4} {:.4} {:.4} {partner}",
            a.op,
            if a.applied { "yes" } else { "no" },
            a.p,
            a.magnitude,
            a.lambda
        )
        .expect("writing to a String");
    }
    out
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let images_dir = PathBuf::from(m.get_one::<String>("images").expect("required"));
    let out_dir = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let greedy = m.get_one::<String>("mode").map(String::as_str) == Some("greedy");

    let ckpt = match m.get_one::<String>("checkpoint") {
        Some(p) => Some(Checkpoint::load(Path::new(p))?),
        None => None,
    };
    let saved = ckpt.as_ref().map(checkpoint_config).transpose()?;
    let kind = match (m.get_one::<String>("policy"), &saved) {
        (Some(k), _) => k.parse::<PolicyKind>().map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(c)) => c.policy,
        (None, None) => PolicyKind::Random,
    };
    if kind == PolicyKind::Off {
        return Err(CliError::Config("the checkpoint was trained without a policy".into()));
    }
    let patches = match (m.get_one::<usize>("patches"), &saved) {
        (Some(&n), Some(c)) if n != c.patches => {
            return Err(CliError::Config(format!(
                "--patches {n} conflicts with the checkpoint's {}",
                c.patches
            )))
        }
        (Some(&n), _) => n,
        (None, Some(c)) => c.patches,
        (None, None) => 4,
    };
    let grid = PatchGrid::new(patches).map_err(|e| CliError::Config(e.to_string()))?;
    let frac = match (m.get_one::<f64>("schedule"), &saved, &ckpt) {
        (Some(&f), ..) if (0.0..=1.0).contains(&f) => f,
        (Some(f), ..) => return Err(CliError::Config(format!("--schedule {f} is outside [0,1]"))),
        (None, Some(c), Some(k)) => {
            let epoch = k.u64s("progress")?.first().copied().unwrap_or(0) as f64;
            (epoch / (c.epochs.max(2) - 1) as f64).min(1.0)
        }
        _ => 0.0,
    };

    let entries = fs::read_dir(&images_dir).map_err(|e| CliError::Data(format!("{}: {e}", images_dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no PNG files in {}", images_dir.display())));
    }
    fs::create_dir_all(&out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;

    // Same-sized images are augmented together so mixing operations can
    // draw partners from each other.
    let mut groups: BTreeMap<(usize, usize), Vec<Loaded>> = BTreeMap::new();
    for path in &paths {
        match read_png(path) {
            Ok(img) => groups.entry(img.size).or_default().push(img),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    let mut written = 0;
    for (group, (size, members)) in groups.into_iter().enumerate() {
        match augment_group(
            &members,
            size,
            kind,
            &grid,
            ckpt.as_ref(),
            greedy,
            frac,
            seed,
            group as u64,
            &out_dir,
        ) {
            Ok(n) => written += n,
            Err(e) => log::warn!("skipping {} image(s) of size {}x{}: {e}", members.len(), size.1, size.0),
        }
    }
    if written == 0 {
        return Err(CliError::Data("no image could be augmented".into()));
    }
    println!(
        "augmented {written} of {} images into {}",
        paths.len(),
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn augment_group(
    members: &[Loaded],
    size: (usize, usize),
    kind: PolicyKind,
    grid: &PatchGrid,
    ckpt: Option<&Checkpoint>,
    greedy: bool,
    frac: f64,
    seed: u64,
    group: u64,
    out_dir: &Path,
) -> Result<usize> {
    let b = members.len();
    let mut bundle =
        PolicyBundle::<f32>::new(kind, grid.count(), size, &mut stream(seed, &[purpose::INIT, 1])).map_err(runtime)?;
    if let Some(ckpt) = ckpt {
        // Only the encoder and actor act; the critic depends on the image
        // size and is not needed here.
        let nets = [
            ("encoder.trunk", &mut bundle.encoder.trunk),
            ("encoder.projection", &mut bundle.encoder.projection),
            ("actor", &mut bundle.actor),
        ];
        for (prefix, net) in nets {
            net.load_named(|name| ckpt.f32_tensor(&format!("{prefix}.{name}")).ok())
                .map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
        }
    }
    let (h, w) = size;
    let pixels: Vec<f32> = members.iter().flat_map(|m| m.pixels.iter().copied()).collect();
    let images = Tensor::new(&[b, 3, h, w], pixels).map_err(runtime)?;
    let labels = Tensor::full(&[b, 1], 1.0f32).map_err(runtime)?;

    let state = bundle.extract_state(&images).map_err(runtime)?;
    let obs = bundle
        .extract_observations(&split_patches(&images, grid).map_err(runtime)?)
        .map_err(runtime)?;
    let tape = Tape::new();
    let mode = if greedy { SelectMode::Greedy } else { SelectMode::Sample };
    let selection = bundle
        .select_actions(
            &tape,
            &state,
            &obs,
            mode,
            Pass::Eval,
            &mut stream(seed, &[purpose::ACTIONS, group]),
        )
        .map_err(runtime)?;
    let actions = draw_actions(&selection.ops, grid.count(), frac, seed, group);
    let (plan, exec) = execute_plan(
        &images,
        &labels,
        actions,
        grid,
        &mut stream(seed, &[purpose::PARTNERS, group]),
    )
    .map_err(runtime)?;

    let names: Vec<String> = members.iter().map(|m| m.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        write_png(&exec.images, i, &out_dir.join(format!("{name}.png")))?;
        let path = out_dir.join(format!("{name}.ops.txt"));
        fs::write(&path, sidecar(&plan, i, &names)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(b)
}
