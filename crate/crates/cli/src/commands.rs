use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anomaly_ddpm::anomaly::{DetectConfig, Detector, GridMode, ThresholdMap, Variant};
use anomaly_ddpm::checkpoint::{file_sha256, write_atomic, Checkpoint};
use anomaly_ddpm::data::{
    corrupt_with_sprite, list_png_ids, load_corpus, write_gray16, write_mask, write_synthetic_corpus,
    CorruptedSample, Image, SplitManifest, SpriteParams,
};
use anomaly_ddpm::ddpm::{DdpmTraining, LatentDdpm};
use anomaly_ddpm::diffusion::LatentStandardizer;
use anomaly_ddpm::metrics::{auprc, auroc, bench, best_dice, to_csv, BenchResult, MetricsRow, PixelEval};
use anomaly_ddpm::vqvae::{VqVae, VqVaeTraining};
use anomaly_ddpm::{derive_seed, Error};
use candle_core::Device;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, CliResult, ConfigError};

/// Evenly spaced thresholds used for the reported best Dice.
pub const BEST_DICE_THRESHOLDS: usize = 200;

pub const SPLITS_FILE: &str = "splits.json";
pub const VQVAE_FILE: &str = "vqvae.safetensors";
pub const DDPM_FILE: &str = "ddpm.safetensors";

pub fn threshold_file(grid: GridMode) -> String {
    match grid {
        GridMode::Full => "threshold_full.safetensors".into(),
        GridMode::Fast => "threshold_fast.safetensors".into(),
    }
}

fn method_name(c: &DetectConfig) -> String {
    if c.fast && c.variant != Variant::D {
        format!("{}-fast", c.variant.tag())
    } else {
        c.variant.tag().to_string()
    }
}

/// Resolved configuration, device and output directory shared by commands.
pub struct Context {
    pub config: RunConfig,
    pub device: Device,
    pub out: PathBuf,
    started: Instant,
}

impl Context {
    pub fn new(config: RunConfig, device: Device) -> CliResult<Self> {
        let out = config.paths.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            config,
            device,
            out,
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Loads images from the data root, spreading files over `workers` threads.
    pub fn load_images(&self, ids: &[String]) -> CliResult<Vec<Image>> {
        let root = self.config.paths.data_root.as_path();
        let mut sorted = ids.to_vec();
        sorted.sort();
        let workers = self.config.workers.clamp(1, sorted.len().max(1));
        let chunk = sorted.len().div_ceil(workers).max(1);
        let parts: Vec<anomaly_ddpm::Result<Vec<Image>>> = std::thread::scope(|s| {
            let handles: Vec<_> = sorted.chunks(chunk).map(|c| s.spawn(move || load_corpus(root, c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("image loader thread panicked"))
                .collect()
        });
        let mut images = Vec::with_capacity(sorted.len());
        for p in parts {
            images.extend(p?);
        }
        Ok(images)
    }

    pub fn splits(&self) -> CliResult<SplitManifest> {
        let path = self.path(SPLITS_FILE);
        if !path.is_file() {
            return Err(CliError::Other(format!(
                "no split manifest at {}; run `prepare` first",
                path.display()
            )));
        }
        Ok(SplitManifest::load(&path)?)
    }

    /// Test images in id order: the first `n_corrupted` carry a sprite.
    pub fn test_set(&self) -> CliResult<(Vec<CorruptedSample>, Vec<Image>)> {
        let splits = self.splits()?;
        let images = self.load_images(&splits.test)?;
        let n = self.config.data.n_corrupted.min(images.len());
        let corrupted = images[..n]
            .iter()
            .map(|im| corrupt_with_sprite(im, derive_seed(self.config.seed, &format!("sprite/{}", im.id))))
            .collect::<anomaly_ddpm::Result<Vec<_>>>()?;
        Ok((corrupted, images[n..].to_vec()))
    }

    /// Writes `provenance/<command>.json` (config hash, seed, checkpoint
    /// hashes, hashes of the files this command produced) and the resolved
    /// configuration of the last successful command.
    pub fn record(&self, command: &str, artifacts: &[PathBuf]) -> CliResult<()> {
        write_atomic(&self.path("resolved_config.toml"), self.config.to_toml().as_bytes())?;
        let mut checkpoints = BTreeMap::new();
        for name in [VQVAE_FILE, DDPM_FILE] {
            let p = self.path(name);
            if p.is_file() {
                checkpoints.insert(name.to_string(), file_sha256(&p)?);
            }
        }
        let mut outputs = BTreeMap::new();
        for a in artifacts {
            if a.is_file() {
                outputs.insert(a.display().to_string(), file_sha256(a)?);
            }
        }
        let doc = serde_json::json!({
            "command": command,
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "workers": self.config.workers,
            "checkpoints": checkpoints,
            "outputs": outputs,
            "elapsed_s": self.started.elapsed().as_secs_f64(),
            "finished_unix_s": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            "version": env!("CARGO_PKG_VERSION"),
        });
        write_atomic(
            &self.path(&format!("provenance/{command}.json")),
            serde_json::to_string_pretty(&doc)?.as_bytes(),
        )?;
        Ok(())
    }
}

/// Writes `n` synthetic head slices to `dir`.
pub fn phantoms(dir: &Path, n: usize, size: usize, seed: u64) -> CliResult<()> {
    if n == 0 || size < 16 {
        return Err(ConfigError(format!("need n >= 1 and size >= 16, got n = {n}, size = {size}")).into());
    }
    write_synthetic_corpus(dir, n, size, seed)?;
    eprintln!("wrote {n} phantoms of {size}x{size} to {}", dir.display());
    Ok(())
}

/// Splits the corpus and materialises the corrupted test images with their masks.
pub fn prepare(ctx: &Context) -> CliResult<()> {
    let d = &ctx.config.data;
    let ids = list_png_ids(&ctx.config.paths.data_root)?;
    let splits = SplitManifest::split(&ids, d.n_train, d.n_val, d.n_test, ctx.config.seed)?;
    let splits_path = ctx.path(SPLITS_FILE);
    splits.save(&splits_path)?;

    let (corrupted, clean) = ctx.test_set()?;
    let dir = ctx.path("test");
    let mut sprites: BTreeMap<String, SpriteParams> = BTreeMap::new();
    for s in &corrupted {
        let im = &s.image;
        write_gray16(&dir.join(format!("{}.png", im.id)), im.height, im.width, &im.pixels)?;
        write_mask(&dir.join(format!("{}_mask.png", im.id)), im.height, im.width, &s.gt_mask)?;
        sprites.insert(im.id.clone(), s.sprite.clone());
    }
    for im in &clean {
        write_gray16(&dir.join(format!("{}.png", im.id)), im.height, im.width, &im.pixels)?;
    }
    let sprites_path = dir.join("sprites.json");
    write_atomic(&sprites_path, serde_json::to_string_pretty(&sprites)?.as_bytes())?;
    eprintln!(
        "split {} images: {} train, {} val, {} test ({} corrupted)",
        ids.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        corrupted.len()
    );
    ctx.record("prepare", &[splits_path, sprites_path])
}

fn same_except_epochs<T: Clone + PartialEq>(a: &T, b: &T, set: impl Fn(&mut T)) -> bool {
    let (mut a, mut b) = (a.clone(), b.clone());
    set(&mut a);
    set(&mut b);
    a == b
}

/// Trains (or resumes) the autoencoder, checkpointing after every epoch.
pub fn train_vqvae(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.vqvae;
    let splits = ctx.splits()?;
    let train = ctx.load_images(&splits.train)?;
    let val = ctx.load_images(&splits.val)?;
    let first = train
        .first()
        .ok_or_else(|| ConfigError("training split is empty".into()))?;
    let size = (first.height, first.width);
    let path = ctx.path(VQVAE_FILE);
    let mut t = if path.is_file() {
        let t = VqVaeTraining::from_checkpoint(&Checkpoint::load(&path, &ctx.device)?, &ctx.device)?;
        if !same_except_epochs(t.model.config(), cfg, |c| c.epochs = 0) || t.image_size != size {
            return Err(ConfigError(format!(
                "{} was trained with different settings; restore them or use a new output_dir",
                path.display()
            ))
            .into());
        }
        eprintln!("resuming VQ-VAE at epoch {}", t.epoch);
        t
    } else {
        VqVaeTraining::new(cfg.clone(), size, &ctx.device)?
    };
    let x = Image::batch_tensor(&train, &ctx.device)?;
    let curve = ctx.path("vqvae_curve.csv");
    let mut trained = false;
    while t.epoch < cfg.epochs {
        let r = t.run_epoch(&x)?;
        trained = true;
        t.to_checkpoint()?.save(&path)?;
        write_vqvae_curve(&curve, &t)?;
        eprintln!(
            "vqvae epoch {}/{}: recon {:.5} commit {:.5}",
            t.epoch, cfg.epochs, r.recon, r.commit
        );
    }
    if trained || t.val_recon_error.is_none() {
        if !val.is_empty() {
            t.val_recon_error = Some(t.model.reconstruction_error(&val)?);
        }
        t.to_checkpoint()?.save(&path)?;
    }
    println!(
        "vqvae: {} epochs, validation recon MAE {}",
        t.epoch,
        t.val_recon_error.map(|e| format!("{e:.5}")).unwrap_or_else(|| "n/a".into())
    );
    ctx.record("train-vqvae", &[path, curve])
}

fn write_vqvae_curve(path: &Path, t: &VqVaeTraining) -> CliResult<()> {
    let mut s = String::from("epoch,recon,codebook,commit,total\n");
    for (i, r) in t.history.iter().enumerate() {
        s.push_str(&format!("{},{},{},{},{}\n", i + 1, r.recon, r.codebook, r.commit, r.stepped));
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Loads the autoencoder and checks it against the configured `f` and `n_z`.
fn load_vqvae(ctx: &Context) -> CliResult<(VqVae, String)> {
    let path = ctx.path(VQVAE_FILE);
    if !path.is_file() {
        return Err(CliError::Other(format!("no VQ-VAE at {}; run `train-vqvae` first", path.display())));
    }
    let sha = file_sha256(&path)?;
    let t = VqVaeTraining::from_checkpoint(&Checkpoint::load(&path, &ctx.device)?, &ctx.device)?;
    let (have, want) = (t.model.config(), &ctx.config.vqvae);
    if have.downsample != want.downsample || have.latent_channels != want.latent_channels {
        return Err(ConfigError(format!(
            "VQ-VAE checkpoint has f = {}, n_z = {}; configuration asks for f = {}, n_z = {}",
            have.downsample, have.latent_channels, want.downsample, want.latent_channels
        ))
        .into());
    }
    if t.epoch < want.epochs {
        eprintln!("warning: VQ-VAE trained for {} of {} epochs", t.epoch, want.epochs);
    }
    Ok((t.model, sha))
}

/// Trains (or resumes) the latent diffusion model on encoded training images.
pub fn train_ddpm(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config.ddpm;
    let (vq, vq_sha) = load_vqvae(ctx)?;
    let splits = ctx.splits()?;
    let train = ctx.load_images(&splits.train)?;
    if train.is_empty() {
        return Err(ConfigError("training split is empty".into()).into());
    }
    let z = vq.encode_images(&train, ctx.config.anomaly.max_batch)?.values;
    let (_, _, h, w) = z.dims4()?;
    let path = ctx.path(DDPM_FILE);
    let mut t = if path.is_file() {
        let t = DdpmTraining::from_checkpoint(&Checkpoint::load(&path, &ctx.device)?, &ctx.device)?;
        if t.vqvae_sha256 != vq_sha {
            return Err(ConfigError(format!(
                "{} was trained on a different VQ-VAE; delete it to retrain",
                path.display()
            ))
            .into());
        }
        if !same_except_epochs(&t.config, cfg, |c| c.epochs = 0) {
            return Err(ConfigError(format!(
                "{} was trained with different settings; restore them or use a new output_dir",
                path.display()
            ))
            .into());
        }
        eprintln!("resuming diffusion model at epoch {}", t.epoch);
        t
    } else {
        let st = LatentStandardizer::fit(&z)?;
        DdpmTraining::new(cfg.clone(), st, (h, w), vq.config().downsample, vq_sha, &ctx.device)
            .map_err(|e| match e {
                Error::Parameter(m) => CliError::Config(ConfigError(m)),
                other => other.into(),
            })?
    };
    let zs = t.ddpm.standardizer.standardize(&z)?;
    let curve = ctx.path("ddpm_curve.csv");
    while t.epoch < cfg.epochs {
        let loss = t.run_epoch(&zs)?;
        t.to_checkpoint()?.save(&path)?;
        let mut s = String::from("epoch,loss\n");
        for (i, l) in t.history.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        write_atomic(&curve, s.as_bytes())?;
        eprintln!("ddpm epoch {}/{}: loss {loss:.5}", t.epoch, cfg.epochs);
    }
    println!(
        "ddpm: {} epochs, final loss {}",
        t.epoch,
        t.history.last().map(|l| format!("{l:.5}")).unwrap_or_else(|| "n/a".into())
    );
    ctx.record("train-ddpm", &[path, curve])
}

/// Both trained models plus the checksums calibrations are tied to.
pub struct Models {
    pub vqvae: VqVae,
    pub ddpm: LatentDdpm,
    pub vqvae_sha256: String,
    pub ddpm_sha256: String,
}

impl Models {
    pub fn load(ctx: &Context) -> CliResult<Self> {
        let (vqvae, vqvae_sha256) = load_vqvae(ctx)?;
        let path = ctx.path(DDPM_FILE);
        if !path.is_file() {
            return Err(CliError::Other(format!(
                "no diffusion model at {}; run `train-ddpm` first",
                path.display()
            )));
        }
        let ddpm_sha256 = file_sha256(&path)?;
        let t = DdpmTraining::from_checkpoint(&Checkpoint::load(&path, &ctx.device)?, &ctx.device)?;
        if t.vqvae_sha256 != vqvae_sha256 {
            return Err(ConfigError(format!(
                "diffusion model was trained on VQ-VAE {}, loaded VQ-VAE is {vqvae_sha256}",
                t.vqvae_sha256
            ))
            .into());
        }
        if t.downsample != vqvae.config().downsample || t.config.unet.latent_channels != vqvae.config().latent_channels {
            return Err(ConfigError("diffusion model does not match the VQ-VAE latent shape".into()).into());
        }
        Ok(Self {
            vqvae,
            ddpm: t.ddpm,
            vqvae_sha256,
            ddpm_sha256,
        })
    }

    pub fn detector(&self) -> Detector<'_, LatentDdpm> {
        Detector::new(&self.vqvae, &self.ddpm, &self.ddpm.schedule, &self.ddpm.standardizer)
    }

    /// Detector with the threshold maps `configs` need, refusing stale ones.
    pub fn detector_for(&self, ctx: &Context, configs: &[DetectConfig]) -> CliResult<Detector<'_, LatentDdpm>> {
        let mut det = self.detector();
        let mut grids: Vec<GridMode> = configs.iter().filter(|c| c.needs_kl_mask()).map(|c| c.grid()).collect();
        grids.sort();
        grids.dedup();
        for g in grids {
            let path = ctx.path(&threshold_file(g));
            if !path.is_file() {
                return Err(CliError::Other(format!(
                    "no {g:?} threshold map at {}; run `calibrate` first",
                    path.display()
                )));
            }
            let th = ThresholdMap::load(&path)?;
            th.check_models(&self.vqvae_sha256, &self.ddpm_sha256)
                .map_err(|e| ConfigError(format!("stale threshold map {}: {e}; rerun `calibrate`", path.display())))?;
            det = det.with_threshold(th);
        }
        Ok(det)
    }
}

/// Calibrates threshold maps for `grids` on the validation split.
pub fn calibrate(ctx: &Context, grids: &[GridMode]) -> CliResult<()> {
    let models = Models::load(ctx)?;
    let val = ctx.load_images(&ctx.splits()?.val)?;
    let det = models.detector();
    let a = &ctx.config.anomaly;
    let mut written = Vec::new();
    for &g in grids {
        let start = Instant::now();
        let th = det
            .calibrate(&val, g, a.percentile, ctx.config.seed, a.max_batch)?
            .with_checksums(models.vqvae_sha256.clone(), models.ddpm_sha256.clone());
        let path = ctx.path(&threshold_file(g));
        th.save(&path)?;
        println!(
            "calibrated {g:?} grid on {} images at the {} percentile ({:.1}s)",
            val.len(),
            a.percentile,
            start.elapsed().as_secs_f64()
        );
        written.push(path);
    }
    ctx.record("calibrate", &written)
}

#[derive(Serialize)]
struct ReportSummary {
    id: String,
    image_score: Option<f64>,
    mask_cells: usize,
    mean_v: Option<f64>,
    max_pixel_score: f32,
    wall_time_s: BTreeMap<String, f64>,
}

/// Scores a directory of PNGs, or the test split when `input` is `None`.
pub fn detect(ctx: &Context, input: Option<&Path>) -> CliResult<()> {
    let images = match input {
        Some(dir) => load_corpus(dir, &list_png_ids(dir)?)?,
        None => {
            let (corrupted, clean) = ctx.test_set()?;
            corrupted.into_iter().map(|s| s.image).chain(clean).collect()
        }
    };
    let cfg = ctx.config.detect_config();
    let models = Models::load(ctx)?;
    let det = models.detector_for(ctx, std::slice::from_ref(&cfg))?;
    let run = det.detect(&images, &cfg)?;
    let dir = ctx.path(&format!("detect/{}", method_name(&cfg)));
    let mut summaries = Vec::with_capacity(run.reports.len());
    for r in &run.reports {
        let h = &r.healed;
        write_gray16(&dir.join(format!("{}_healed.png", r.input_id)), h.height, h.width, &h.pixels)?;
        write_gray16(&dir.join(format!("{}_score.png", r.input_id)), h.height, h.width, &r.pixel_scores)?;
        write_mask(
            &dir.join(format!("{}_latent_mask.png", r.input_id)),
            r.mask.height,
            r.mask.width,
            &r.mask.values,
        )?;
        summaries.push(ReportSummary {
            id: r.input_id.clone(),
            image_score: r.image_score,
            mask_cells: r.mask.count(),
            mean_v: r.v.as_ref().map(|v| v.mean()),
            max_pixel_score: r.pixel_scores.iter().copied().fold(0.0, f32::max),
            wall_time_s: r.wall_time_s.clone(),
        });
    }
    let reports = dir.join("reports.json");
    write_atomic(&reports, serde_json::to_string_pretty(&summaries)?.as_bytes())?;
    let total: f64 = run.stage_seconds.values().sum();
    println!(
        "variant {}: {} images in {total:.1}s, outputs in {}",
        method_name(&cfg),
        images.len(),
        dir.display()
    );
    ctx.record("detect", &[reports])
}

fn configs_for(ctx: &Context, variants: &[Variant]) -> Vec<DetectConfig> {
    let base = ctx.config.detect_config();
    variants
        .iter()
        .map(|&variant| DetectConfig { variant, ..base.clone() })
        .collect()
}

/// Pixel metrics of `variants` on the corrupted test images, image AUROC
/// against the clean ones.
pub fn evaluate(ctx: &Context, variants: &[Variant]) -> CliResult<Vec<MetricsRow>> {
    let (corrupted, clean) = ctx.test_set()?;
    if corrupted.is_empty() {
        return Err(ConfigError("evaluation needs n_corrupted >= 1".into()).into());
    }
    let configs = configs_for(ctx, variants);
    let models = Models::load(ctx)?;
    let det = models.detector_for(ctx, &configs)?;
    let images: Vec<Image> = corrupted.iter().map(|s| s.image.clone()).collect();
    let runs = det.run_many(&images, &configs)?;

    let clean_scores = match (clean.is_empty(), configs[0].image_score) {
        (false, Some(sc)) => {
            let mut out = Vec::with_capacity(clean.len());
            for chunk in clean.chunks(ctx.config.anomaly.max_batch) {
                out.extend(det.image_scores(&det.latents(chunk)?, chunk, sc, ctx.config.seed)?);
            }
            Some(out)
        }
        _ => None,
    };
    let dataset = ctx
        .config
        .paths
        .data_root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string();

    let mut rows = Vec::with_capacity(runs.len());
    for run in &runs {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (r, s) in run.reports.iter().zip(&corrupted) {
            scores.extend(r.pixel_scores.iter().map(|&v| v as f64));
            labels.extend_from_slice(&s.gt_mask);
        }
        let eval = PixelEval::new(scores, labels)?;
        let (dice_best, threshold) = best_dice(&eval, Some(BEST_DICE_THRESHOLDS))?;
        let image_auroc = match &clean_scores {
            Some(neg) => {
                let pos: Vec<f64> = run.reports.iter().filter_map(|r| r.image_score).collect();
                let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
                let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
                Some(auroc(&all, &labels)?)
            }
            None => None,
        };
        rows.push(MetricsRow {
            method: method_name(&run.config),
            dataset: dataset.clone(),
            dice_best,
            auprc: auprc(&eval),
            auroc: image_auroc,
            threshold,
            wall_time_s: run.stage_seconds.values().sum::<f64>() / images.len() as f64,
        });
    }
    let csv = ctx.path("metrics.csv");
    let json = ctx.path("metrics.json");
    write_atomic(&csv, to_csv(&rows).as_bytes())?;
    let doc = serde_json::json!({
        "config_hash": ctx.config.hash(),
        "n_corrupted": corrupted.len(),
        "n_clean": clean.len(),
        "rows": rows,
    });
    write_atomic(&json, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    print!("{}", to_csv(&rows));
    ctx.record("evaluate", &[csv, json])?;
    Ok(rows)
}

/// Times `variants` on the first `bench_images` test images. The image-level
/// score is a separate output and is left out of the timing.
pub fn run_bench(ctx: &Context, variants: &[Variant]) -> CliResult<Vec<BenchResult>> {
    let (corrupted, clean) = ctx.test_set()?;
    let images: Vec<Image> = corrupted
        .into_iter()
        .map(|s| s.image)
        .chain(clean)
        .take(ctx.config.anomaly.bench_images)
        .collect();
    let mut configs = configs_for(ctx, variants);
    for c in &mut configs {
        c.image_score = None;
    }
    let models = Models::load(ctx)?;
    let det = models.detector_for(ctx, &configs)?;
    let mut results = Vec::with_capacity(configs.len());
    for c in &configs {
        let mut r = bench(&det, &images, c)?;
        r.method = method_name(c);
        println!(
            "{}: {} images in {:.2}s ({:.3}s/image){}",
            r.method,
            r.n_images,
            r.total_s,
            r.total_s / r.n_images as f64,
            if r.micro_batched { ", micro-batched" } else { "" }
        );
        results.push(r);
    }
    let path = ctx.path("bench.json");
    let doc = serde_json::json!({
        "config_hash": ctx.config.hash(),
        "results": results,
    });
    write_atomic(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    ctx.record("bench", &[path])?;
    Ok(results)
}
