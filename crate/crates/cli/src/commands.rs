use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::RngCore;
use voxelfill_core::augment::{apply_augment, sample_augment, AugmentSpec, Interpolation};
use voxelfill_core::checkpoint::{load_checkpoint, save_checkpoint};
use voxelfill_core::config::KeyValues;
use voxelfill_core::io::{read_mask, read_vol, write_mask, write_vol, DTYPE_LABEL};
use voxelfill_core::losses::LossConfig;
use voxelfill_core::maskgen::{build_augmented_set, MaskGenParams};
use voxelfill_core::metrics::{aggregate_report, eval_metrics, read_metrics_dir, PSNR_CAP};
use voxelfill_core::patch::{
    check_divisible, inference_input, prediction_volume, stitch, TrainingPair,
};
use voxelfill_core::phantom::{synth_phantom, PhantomSpec};
use voxelfill_core::train::{kfold_split, train_loop, AugmentedScans, ScanRecord, TrainConfig};
use voxelfill_core::unet::{build_unet, predict};
use voxelfill_core::volume::{scale_by, validation_normalizer, void_image};
use voxelfill_core::LabelMask;
use voxelfill_tensor::rng::stream;

use crate::args::{
    AugmentArgs, EvalArgs, GenMasksArgs, InferArgs, ReportArgs, SynthArgs, TrainArgs,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn synth_data(a: &SynthArgs, seed: u64) -> Result<()> {
    create_dir(&a.out_dir)?;
    for i in 0..a.count {
        let spec = PhantomSpec {
            dims: a.dims,
            shells: a.shells,
            noise: a.noise,
            tumor: !a.no_tumor,
            seed: stream(seed, "phantom", i as u64).next_u64(),
        };
        let ph = synth_phantom(&spec)?;
        let id = format!("{}{:03}", a.prefix, i);
        write_vol(a.out_dir.join(format!("{id}_t1n.vol")), &ph.t1n)?;
        write_mask(a.out_dir.join(format!("{id}_brain.vol")), &ph.brain)?;
        write_mask(a.out_dir.join(format!("{id}_unhealthy.vol")), &ph.unhealthy)?;
        info!("wrote phantom {id}");
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn gen_masks(a: &GenMasksArgs, seed: u64) -> Result<()> {
    let brain = read_mask(&a.brain)?;
    let unhealthy = read_mask(&a.unhealthy)?;
    let d = MaskGenParams::default();
    let params = MaskGenParams {
        frac_min: a.frac_min.unwrap_or(d.frac_min),
        frac_max: a.frac_max.unwrap_or(d.frac_max),
        blobs_min: a.blobs_min.unwrap_or(d.blobs_min),
        blobs_max: a.blobs_max.unwrap_or(d.blobs_max),
        safety_radius: a.safety_radius.unwrap_or(d.safety_radius),
        max_attempts: a.max_attempts.unwrap_or(d.max_attempts),
    };
    params.validate()?;
    let scan = a.scan.clone().unwrap_or_else(|| {
        let stem = file_stem(&a.brain);
        stem.strip_suffix("_brain")
            .map(str::to_string)
            .unwrap_or(stem)
    });
    let image = a.t1n.as_ref().map(read_vol).transpose()?;
    create_dir(&a.out_dir)?;
    let set = build_augmented_set(&brain, &unhealthy, a.count, &params, seed)?;
    for (k, (mask, _)) in set.iter().enumerate() {
        write_mask(a.out_dir.join(format!("{scan}_healthy_{k}.vol")), mask)?;
        if let Some(t1n) = &image {
            let combined = LabelMask::combine(mask, &unhealthy)?;
            write_vol(
                a.out_dir.join(format!("{scan}_voided_{k}.vol")),
                &void_image(t1n, &combined)?,
            )?;
            write_mask(a.out_dir.join(format!("{scan}_mask_{k}.vol")), &combined)?;
        }
    }
    info!("wrote {} masks for {scan}", set.len());
    Ok(())
}

fn is_mask_file(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(bytes.get(4) == Some(&DTYPE_LABEL))
}

fn parse_mirror(s: &str) -> Result<[bool; 3]> {
    let mut flags = [false; 3];
    for c in s.chars() {
        match c {
            'x' => flags[0] = true,
            'y' => flags[1] = true,
            'z' => flags[2] = true,
            _ => {
                return Err(CliError::Usage(format!(
                    "mirror axes must be drawn from `xyz`, got `{s}`"
                )))
            }
        }
    }
    Ok(flags)
}

pub fn augment(a: &AugmentArgs, seed: u64) -> Result<()> {
    let sampled = sample_augment(&mut stream(seed, "augment", a.index));
    let spec = AugmentSpec {
        mirror: a
            .mirror
            .as_deref()
            .map(parse_mirror)
            .transpose()?
            .unwrap_or(sampled.mirror),
        theta_xy: a.theta_xy.unwrap_or(sampled.theta_xy),
        theta_yz: a.theta_yz.unwrap_or(sampled.theta_yz),
    };
    if is_mask_file(&a.input)? {
        let m = read_mask(&a.input)?;
        let interp = a.interp.unwrap_or(Interpolation::Nearest);
        write_mask(&a.out, &apply_augment(&m, &spec, interp)?)?;
    } else {
        let v = read_vol(&a.input)?;
        let interp = a.interp.unwrap_or(Interpolation::Trilinear);
        write_vol(&a.out, &apply_augment(&v, &spec, interp)?)?;
    }
    info!(
        "mirror {:?}, rotation {} / {} degrees",
        spec.mirror, spec.theta_xy, spec.theta_yz
    );
    Ok(())
}

/// Healthy mask files of `id`, ordered by their index.
fn healthy_mask_paths(dir: &Path, id: &str) -> Result<Vec<PathBuf>> {
    let prefix = format!("{id}_healthy_");
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = file_stem(&path);
        if let Some(k) = name
            .strip_prefix(&prefix)
            .and_then(|k| k.parse::<usize>().ok())
        {
            if path.extension().is_some_and(|e| e == "vol") {
                found.push((k, path));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Every `<id>_t1n.vol` in `dir` with its brain, unhealthy and healthy
/// masks. Scans without mask files get `masks_per_scan` generated ones.
fn load_scans(dir: &Path, cfg: &TrainConfig) -> Result<Vec<ScanRecord>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(id) = name.strip_suffix("_t1n.vol") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Data(format!(
            "no `*_t1n.vol` scans in {}",
            dir.display()
        )));
    }
    let mut scans = Vec::with_capacity(ids.len());
    for id in ids {
        let t1n = read_vol(dir.join(format!("{id}_t1n.vol")))?;
        let brain = read_mask(dir.join(format!("{id}_brain.vol")))?;
        let unhealthy = read_mask(dir.join(format!("{id}_unhealthy.vol")))?;
        let paths = healthy_mask_paths(dir, &id)?;
        let healthy_masks = if paths.is_empty() {
            let key = format!("scan-masks/{id}");
            let mask_seed = stream(cfg.seed, &key, 0).next_u64();
            build_augmented_set(
                &brain,
                &unhealthy,
                cfg.masks_per_scan,
                &cfg.maskgen,
                mask_seed,
            )?
            .into_iter()
            .map(|(m, _)| m)
            .collect()
        } else {
            paths
                .iter()
                .map(read_mask)
                .collect::<std::result::Result<_, _>>()?
        };
        scans.push(ScanRecord {
            id,
            t1n,
            brain,
            unhealthy,
            healthy_masks,
        });
    }
    Ok(scans)
}

pub fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => KeyValues::default(),
    };
    if let Some(s) = seed {
        kv.push("seed", s);
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    check_divisible(cfg.patch, &cfg.unet)?;
    let scans = load_scans(&a.data_dir, &cfg)?;
    let (train_scans, val_scans) = match a.fold {
        None => (scans, Vec::new()),
        Some(k) => {
            let mut splits = kfold_split(&scans, cfg.folds, cfg.seed)?;
            if k >= splits.len() {
                return Err(CliError::Usage(format!(
                    "fold {k} is out of range for {} folds",
                    cfg.folds
                )));
            }
            let s = splits.swap_remove(k);
            (s.train, s.val)
        }
    };
    let val: Vec<TrainingPair> = val_scans
        .iter()
        .map(|s| s.pairs(cfg.patch))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    info!(
        "training on {} scans, validating on {}",
        train_scans.len(),
        val_scans.len()
    );
    let source = AugmentedScans {
        scans: &train_scans,
        patch: cfg.patch,
        seed: cfg.seed,
        augment: cfg.augment,
    };
    let init = build_unet(&cfg.unet, cfg.seed)?;
    let out = train_loop(init, &source, &val, &cfg)?;
    create_dir(&a.out_dir)?;
    for (rank, c) in out.retained.iter().enumerate() {
        save_checkpoint(a.out_dir.join(format!("best_{}.unck", rank + 1)), c)?;
    }
    let mut history = String::from("# epoch train_loss val_loss\n");
    for (e, (t, v)) in out
        .history
        .train_loss
        .iter()
        .zip(&out.history.val_loss)
        .enumerate()
    {
        history.push_str(&format!("{} {t:.17e} {v:.17e}\n", e + 1));
    }
    write_text(&a.out_dir.join("history.txt"), &history)?;
    info!("kept {} checkpoints", out.retained.len());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint, None)?;
    let unet = ckpt.unet_config()?;
    let patch = match a.patch_dims {
        Some(p) => p,
        None => TrainConfig::from_kv(&ckpt.config)?.patch,
    };
    check_divisible(patch, &unet)?;
    let voided = read_vol(&a.voided)?;
    let mask = read_mask(&a.mask)?;
    let (input, spec) = inference_input(&voided, &mask, patch)?;
    let out = predict(&ckpt.params, &unet, &input)?;
    let pred = prediction_volume(&out)?;
    let filled = stitch(&voided, &pred, &spec, &mask)?;
    write_vol(&a.out, &filled)?;
    info!("inpainted {} voxels", mask.count_masked());
    Ok(())
}

fn shown_psnr(p: f64) -> f64 {
    if p.is_finite() {
        p
    } else {
        PSNR_CAP
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let pred = read_vol(&a.pred)?;
    let gt = read_vol(&a.gt)?;
    let mask = read_mask(&a.mask)?;
    let m = validation_normalizer(&gt, &mask)?;
    let id = a.id.clone().unwrap_or_else(|| file_stem(&a.pred));
    let metrics = eval_metrics(
        &id,
        &scale_by(&pred, m)?,
        &scale_by(&gt, m)?,
        &mask,
        &LossConfig::evaluation(),
    )?;
    println!("SSIM {}", metrics.ssim);
    println!("MSE {}", metrics.mse);
    println!("PSNR {}", shown_psnr(metrics.psnr));
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        metrics.write(out)?;
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let scans = read_metrics_dir(&a.dir)?;
    if scans.is_empty() {
        warn!("no metric files in {}", a.dir.display());
    }
    let text = aggregate_report(&scans)?.to_string();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}
