use std::time::Instant;

use clap::{value_parser, Arg, ArgMatches, Command};
use paa_core::augment::{assign_partners, draw_actions, execute_sequential, run_grouped, OpKind, PatchGrid};
use paa_core::rng::stream;
use paa_core::tensor::Tensor;
use rand::Rng;

use crate::error::{runtime, CliError, Result};

pub fn command() -> Command {
    let count = |name: &'static str, default: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("N")
            .value_parser(value_parser!(usize))
            .default_value(default)
            .help(help)
    };
    Command::new("bench")
        .about("Time the grouped executor against the per-patch reference")
        .arg(count("batch", "64", "images per batch"))
        .arg(count("patches", "4", "patches per image (perfect square)"))
        .arg(count("iters", "10", "timed repetitions of each executor"))
        .arg(count("size", "32", "image side in pixels"))
}

pub fn run(m: &ArgMatches) -> Result<()> {
    let get = |k: &str| *m.get_one::<usize>(k).expect("defaulted");
    let (batch, patches, iters, size) = (get("batch"), get("patches"), get("iters"), get("size"));
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    if iters == 0 || batch == 0 {
        return Err(CliError::Usage("--iters and --batch must be at least 1".into()));
    }
    let grid = PatchGrid::new(patches).map_err(|e| CliError::Usage(e.to_string()))?;
    grid.patch_size(size, size)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let mut rng = stream(seed, &[]);
    let n = batch * 3 * size * size;
    let images =
        Tensor::new(&[batch, 3, size, size], (0..n).map(|_| rng.random::<f32>()).collect()).map_err(runtime)?;
    let mut labels = vec![0.0f32; batch * 10];
    for b in 0..batch {
        labels[b * 10 + rng.random_range(0..10)] = 1.0;
    }
    let labels = Tensor::new(&[batch, 10], labels).map_err(runtime)?;
    let ops: Vec<OpKind> = (0..batch * patches)
        .map(|_| OpKind::ALL[rng.random_range(0..OpKind::COUNT)])
        .collect();
    let actions = draw_actions(&ops, patches, 0.5, seed, 0);
    let plan = assign_partners(actions, batch, patches, &mut rng).map_err(runtime)?;

    let grouped = run_grouped(&images, &labels, &plan, &grid).map_err(runtime)?;
    let reference = execute_sequential(&images, &labels, &plan, &grid).map_err(runtime)?;
    let diff = grouped.images.max_abs_diff(&reference.images).map_err(runtime)?;
    let label_diff = grouped.labels.max_abs_diff(&reference.labels).map_err(runtime)?;
    if diff != 0.0 || label_diff != 0.0 {
        return Err(runtime(format!(
            "grouped and sequential outputs differ (images {diff}, labels {label_diff})"
        )));
    }
    println!("equality: grouped == sequential on {batch}x{patches} patches");

    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / iters as f64)
    };
    let g = time(&|| run_grouped(&images, &labels, &plan, &grid).map(|_| ()).map_err(runtime))?;
    let s = time(&|| {
        execute_sequential(&images, &labels, &plan, &grid)
            .map(|_| ())
            .map_err(runtime)
    })?;
    let speedup = s / g;
    println!("grouped:    {g:.3} ms/iter ({} kernel launches)", grouped.launches);
    println!("sequential: {s:.3} ms/iter ({} kernel launches)", reference.launches);
    println!("speedup:    {speedup:.2}x");
    if speedup < 1.0 {
        println!("regression: grouped execution is slower than the per-patch reference");
    }
    Ok(())
}
