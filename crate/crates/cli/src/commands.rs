//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rehit::checkpoint::load_store;
use rehit::data::{
    evaluate_dir, list_images, load_image, save_decomposition, save_image, synth_shadow_pair, DatasetManifest,
    ManifestEntry, ShadowConfig,
};
use rehit::model::{build_model, count_params, estimate_flops, param_breakdown, ReHiTModel, SPATIAL_MULTIPLE};
use rehit::real::Real;
use rehit::tape::OpKind;
use rehit::training::{train_loop, LogRecord};
use rehit::verify::{gradient_suite, SCOPES};

use crate::config::{NumericMode, RunConfig, RESOLVED_CONFIG};
use crate::error::{as_checkpoint, CliError, CliResult};
use crate::pad::{crop, reflect_pad};

/// Parameter count the default configuration is calibrated against.
pub const REFERENCE_PARAMS: f64 = 17.5e6;

pub const TRAIN_LOG: &str = "train_log.txt";

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

pub fn train(cfg: &RunConfig) -> CliResult {
    match cfg.mode {
        NumericMode::Fast => train_as::<f32>(cfg),
        NumericMode::Verify => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> CliResult {
    let manifest_path = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::config("paths.manifest is required for train"))?;
    let out_dir = cfg
        .paths
        .output_dir
        .as_deref()
        .ok_or_else(|| CliError::config("paths.output_dir is required for train"))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data = manifest.load_pairs::<T>()?;
    let mut model = build_model::<T>(&cfg.model, cfg.train.seed)?;
    if let Some(ckpt) = &cfg.paths.checkpoint {
        load_store(ckpt, &mut model.store).map_err(as_checkpoint)?;
    }
    create_dir(out_dir)?;
    write_file(&out_dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::data(format!("{}: {e}", log_path.display())))?;
    let mut write_err = None;
    let mut on_log = |r: &LogRecord| {
        println!("{r}");
        if let Err(e) = writeln!(log, "{r}") {
            write_err.get_or_insert(e);
        }
    };
    let outcome = train_loop(&mut model, &data, &cfg.train, Some(out_dir), &mut on_log)?;
    if let Some(e) = write_err {
        return Err(CliError::data(format!("{}: {e}", log_path.display())));
    }
    if let Some(last) = outcome.checkpoints.last() {
        println!("checkpoint {}", last.display());
    }
    Ok(())
}

/// Model config for a checkpoint: an explicit file, else the one saved beside it.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> CliResult<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG),
    };
    if !path.is_file() {
        return Err(CliError::config(format!(
            "no model config: {} does not exist (pass --config)",
            path.display()
        )));
    }
    RunConfig::load(&path, &[])
}

pub fn load_model<T: Real>(cfg: &RunConfig, ckpt: &Path) -> CliResult<ReHiTModel<T>> {
    let mut model = build_model::<T>(&cfg.model, 0)?;
    load_store(ckpt, &mut model.store).map_err(as_checkpoint)?;
    Ok(model)
}

pub fn infer(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path) -> CliResult {
    match cfg.mode {
        NumericMode::Fast => infer_as::<f32>(cfg, ckpt, input, output),
        NumericMode::Verify => infer_as::<f64>(cfg, ckpt, input, output),
    }
}

fn infer_as<T: Real>(cfg: &RunConfig, ckpt: &Path, input: &Path, output: &Path) -> CliResult {
    let model = load_model::<T>(cfg, ckpt)?;
    let images = list_images(input)?;
    if images.is_empty() {
        eprintln!("warning: no images in {}", input.display());
        return Ok(());
    }
    create_dir(output)?;
    for path in &images {
        let x = load_image::<T>(path)?;
        let (h, w) = (x.h(), x.w());
        let y = model.infer(&reflect_pad(&x, SPATIAL_MULTIPLE))?;
        let y = crop(&y, h, w).clamp01();
        let name = path.file_name().expect("listed files have names");
        save_image(&y, &output.join(name))?;
    }
    println!("wrote {} images to {}", images.len(), output.display());
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, csv: Option<&Path>) -> CliResult {
    let report = evaluate_dir(pred, gt)?;
    print!("{}", report.to_table());
    if let Some(csv) = csv {
        write_file(csv, report.to_csv())?;
    }
    Ok(())
}

pub fn synth(n: usize, size: usize, seed: u64, out: &Path, shadow: &ShadowConfig) -> CliResult {
    if n == 0 {
        return Err(CliError::config("--n must be at least 1"));
    }
    shadow.validate()?;
    for sub in ["input", "target", "decomp"] {
        create_dir(&out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    let width = n.to_string().len().max(4);
    for i in 0..n {
        let id = format!("synth_{i:0width$}");
        let pair = synth_shadow_pair(size, &mut rng, shadow)?;
        let input = PathBuf::from("input").join(format!("{id}.png"));
        let target = PathBuf::from("target").join(format!("{id}.png"));
        save_image(&pair.i_sh, &out.join(&input))?;
        save_image(&pair.i_gt, &out.join(&target))?;
        let g = pair
            .gt_decomp
            .as_ref()
            .expect("synthetic pairs carry their decomposition");
        save_decomposition(g, &out.join("decomp").join(format!("{id}.rehd")))?;
        entries.push(ManifestEntry { input, target, id });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
        split: "train".into(),
    };
    write_file(&out.join("manifest.tsv"), manifest.to_text())?;
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

pub fn inspect(cfg: &RunConfig, h: usize, w: usize) -> CliResult {
    let model = build_model::<f32>(&cfg.model, 0)?;
    let total = count_params(&model);
    let flops = estimate_flops(&model, h, w)?;
    println!("# model config");
    print!("{}", toml::to_string(&cfg.model).expect("model config serializes"));
    println!();
    println!("{:<12} {:>12}", "module", "params");
    for (name, count) in param_breakdown(&model) {
        println!("{name:<12} {count:>12}");
    }
    println!("{:<12} {:>12}", "total", total);
    println!("params_m = {:.3}", total as f64 / 1e6);
    println!("ratio_to_17.5M = {:.4}", total as f64 / REFERENCE_PARAMS);
    println!(
        "flops_g = {:.3} (at {h}x{w}, multiply-adds counted as 2)",
        flops as f64 / 1e9
    );
    Ok(())
}

pub fn gradcheck(scope: &str, fault: Option<&str>) -> CliResult {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::config(format!(
                "unknown operator {name:?}; expected one of {}",
                names.join(", ")
            ))
        })?),
        None => None,
    };
    if scope != "all" && !SCOPES.contains(&scope) {
        return Err(CliError::config(format!(
            "unknown scope {scope:?}; expected all or one of {}",
            SCOPES.join(", ")
        )));
    }
    let start = std::time::Instant::now();
    let results = gradient_suite(scope, fault, |c| {
        println!(
            "{} {}/{} max_rel_err={:.3e} tol={:.0e} entries={}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.scope,
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.entries_checked
        );
    })?;
    let failed: Vec<String> = results.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            CliError::NUMERIC,
            format!("gradient check failed: {}", failed.join(", ")),
        ))
    }
}
