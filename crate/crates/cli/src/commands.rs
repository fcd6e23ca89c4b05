//! The five subcommands. Each takes a validated, override-applied config and
//! writes its outputs under `out_dir`.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use ddc_core::consistency::{self, ConsistencyModel, ResidualModel, Strategy};
use ddc_core::ddc_train::{self};
use ddc_core::denoiser::{self, DenoiserModel};
use ddc_core::error::{Error, Result};
use ddc_core::features::FeatureExtractor;
use ddc_core::metrics::{self, ImageMetrics, KurtosisPoint, MetricsReport};
use ddc_core::rng;
use ddc_core::schedule::NoiseSchedule;
use ddc_core::Tensor;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{config_hash, RunConfig, StrategyChoice};
use crate::dataset::{self, NamedImage};

pub const DENOISER_FILE: &str = "denoiser.ddck";
pub const DDC_FILE: &str = "ddc.ddck";

/// Which sweep axis to vary; the other is held at its config value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Steps,
    Sigma,
}

pub const STEP_SWEEP: [usize; 5] = [2, 5, 10, 20, 50];
pub const SIGMA_SWEEP: [f64; 4] = [0.0, 0.05, 0.1, 0.25];

fn build_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.schedule.t, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

fn training_dataset(cfg: &RunConfig) -> Result<Vec<Tensor>> {
    let images = match &cfg.dataset {
        Some(dir) => dataset::load_dataset(dir, cfg.image_size)?,
        None => dataset::synthesize(cfg.synthetic.unwrap_or(64), cfg.image_size, cfg.seed),
    };
    Ok(images.into_iter().map(|i| i.image).collect())
}

fn evaluation_images(cfg: &RunConfig) -> Result<Vec<NamedImage>> {
    let mut images = match &cfg.dataset {
        Some(dir) => dataset::load_dataset(dir, cfg.image_size)?,
        None => {
            dataset::synthesize(cfg.synthetic.unwrap_or(cfg.eval_images), cfg.image_size, cfg.seed)
        }
    };
    images.truncate(cfg.eval_images);
    Ok(images)
}

fn base_meta(cfg: &RunConfig, step_count: u64) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: config_hash(cfg),
        revision: env!("CARGO_PKG_VERSION").into(),
        step_count,
        schedule: cfg.schedule,
        feature_seed: cfg.feature_seed,
        denoiser_net: None,
        denoiser_variance: None,
        consistency_net: None,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

/// Incremental JSON-lines writer; IO failures are captured and surfaced at
/// the end so the logging closure stays infallible.
struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    err: Option<std::io::Error>,
}

impl JsonlWriter {
    fn create(path: &Path) -> Result<JsonlWriter> {
        let file = File::create(path)
            .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
        Ok(JsonlWriter { path: path.to_path_buf(), out: BufWriter::new(file), err: None })
    }

    fn write<T: serde::Serialize>(&mut self, value: &T) {
        if self.err.is_some() {
            return;
        }
        let line = serde_json::to_string(value).expect("log record serializes");
        if let Err(e) =
            self.out.write_all(line.as_bytes()).and_then(|_| self.out.write_all(b"\n"))
        {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if self.err.is_none() {
            if let Err(e) = self.out.flush() {
                self.err = Some(e);
            }
        }
        match self.err {
            Some(e) => Err(Error::invalid(format!("cannot write {}: {e}", self.path.display()))),
            None => Ok(()),
        }
    }
}

fn require_checkpoint(path: &Option<PathBuf>, field: &str) -> Result<Checkpoint> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("this command needs {field} in the config")))?;
    Checkpoint::load(path)
}

fn check_schedule(meta: &CheckpointMeta, cfg: &RunConfig, what: &str) -> Result<()> {
    if meta.schedule != cfg.schedule {
        return Err(Error::invalid(format!(
            "{what} was trained under schedule {:?} but the config says {:?}",
            meta.schedule, cfg.schedule
        )));
    }
    Ok(())
}

/// Rebuilds the deployed denoiser from a checkpoint, preferring the averaged
/// parameters.
fn denoiser_from(ck: &Checkpoint, cfg: &RunConfig) -> Result<DenoiserModel> {
    let spec = ck.meta.denoiser_net.clone().unwrap_or_else(|| cfg.denoiser_net.clone());
    let variance = ck.meta.denoiser_variance.unwrap_or(cfg.denoiser_variance);
    let mut net_cfg = spec.to_net_config();
    net_cfg.in_channels = denoiser::IMAGE_CHANNELS;
    net_cfg.out_channels = variance.out_channels();
    let prefix = if ck.has_prefix("denoiser_ema") { "denoiser_ema" } else { "denoiser" };
    DenoiserModel::new(ck.backbone(prefix, net_cfg)?, variance)
}

fn consistency_from(ck: &Checkpoint, cfg: &RunConfig) -> Result<ConsistencyModel> {
    let spec = ck.meta.consistency_net.clone().unwrap_or_else(|| cfg.consistency_net.clone());
    let mut net_cfg = spec.to_net_config();
    net_cfg.in_channels = 2 * denoiser::IMAGE_CHANNELS;
    net_cfg.out_channels = denoiser::IMAGE_CHANNELS;
    ConsistencyModel::new(ck.backbone("consistency", net_cfg)?)
}

pub fn train_denoiser_cmd(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let sched = build_schedule(cfg)?;
    let data = training_dataset(cfg)?;
    log::info!(
        "training denoiser: {} images, {} steps, batch {}",
        data.len(),
        cfg.train_denoiser.steps,
        cfg.train_denoiser.batch_size
    );
    let model =
        DenoiserModel::init(cfg.denoiser_net.to_net_config(), cfg.denoiser_variance, cfg.seed)?;
    let mut log_file = JsonlWriter::create(&cfg.out_dir.join("denoiser_loss.jsonl"))?;
    let every = (cfg.train_denoiser.steps / 10).max(1);
    let trained = denoiser::train_denoiser(
        &data,
        &sched,
        &cfg.train_denoiser,
        model,
        cfg.seed,
        &mut |entry| {
            if entry.step % every == 0 || entry.step + 1 == cfg.train_denoiser.steps {
                log::info!("denoiser step {}: loss {:.6}", entry.step, entry.loss);
            }
            log_file.write(&entry);
        },
    )?;
    log_file.finish()?;

    let mut meta = base_meta(cfg, cfg.train_denoiser.steps as u64);
    meta.denoiser_net = Some(cfg.denoiser_net.clone());
    meta.denoiser_variance = Some(cfg.denoiser_variance);
    let mut ck = Checkpoint::new(meta);
    ck.insert_backbone("denoiser", trained.raw.net());
    ck.insert_backbone("denoiser_ema", trained.model.net());
    let path = cfg.out_dir.join(DENOISER_FILE);
    ck.save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn train_ddc_cmd(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let sched = build_schedule(cfg)?;
    let ck_denoiser = require_checkpoint(&cfg.denoiser_checkpoint, "denoiser_checkpoint")?;
    check_schedule(&ck_denoiser.meta, cfg, "the denoiser")?;
    let frozen = denoiser_from(&ck_denoiser, cfg)?;
    let features = FeatureExtractor::new(cfg.feature_seed);
    let pool = cfg.effective_pool()?;
    let data = training_dataset(cfg)?;
    log::info!(
        "training consistency residual: {} images, {} steps, batch {} x accum {}, {} tasks",
        data.len(),
        cfg.train_ddc.steps,
        cfg.train_ddc.batch_size,
        cfg.train_ddc.grad_accum,
        pool.tasks.len()
    );
    let mut train_cfg = cfg.train_ddc.clone();
    train_cfg.weights = cfg.weights;
    let model = ConsistencyModel::init(cfg.consistency_net.to_net_config(), cfg.seed)?;
    let mut log_file = JsonlWriter::create(&cfg.out_dir.join("ddc_loss.jsonl"))?;
    let every = (train_cfg.steps / 10).max(1);
    let trained = ddc_train::train_ddc(
        &data,
        &sched,
        &frozen,
        &features,
        &pool,
        &train_cfg,
        model,
        cfg.seed,
        &mut |entry| {
            if entry.step % every == 0 || entry.step + 1 == train_cfg.steps {
                log::info!(
                    "ddc step {}: mse {:.6} perc {:.6} kl {:.6} total {:.6}",
                    entry.step,
                    entry.l_mse,
                    entry.l_perc,
                    entry.l_kl,
                    entry.total
                );
            }
            log_file.write(&entry);
        },
    )?;
    log_file.finish()?;

    if cfg.empirical_kl_samples > 0 {
        report_kl_cross_check(cfg, &sched, &frozen, &trained, &pool, &data)?;
    }

    let mut meta = base_meta(cfg, train_cfg.steps as u64);
    meta.denoiser_net =
        ck_denoiser.meta.denoiser_net.clone().or_else(|| Some(cfg.denoiser_net.clone()));
    meta.denoiser_variance =
        ck_denoiser.meta.denoiser_variance.or(Some(cfg.denoiser_variance));
    meta.consistency_net = Some(cfg.consistency_net.clone());
    let mut ck = Checkpoint::new(meta);
    ck.insert_backbone("consistency", trained.net());
    ck.copy_prefix_from(&ck_denoiser, "denoiser");
    ck.copy_prefix_from(&ck_denoiser, "denoiser_ema");
    ck.insert_features(&features);
    let path = cfg.out_dir.join(DDC_FILE);
    ck.save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Monte Carlo sanity check of the analytic KL term on one fresh training
/// instance, reported to the log only.
fn report_kl_cross_check(
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    frozen: &DenoiserModel,
    trained: &ConsistencyModel,
    pool: &ddc_train::TaskPool,
    data: &[Tensor],
) -> Result<()> {
    // The draw index right after the last one training used.
    let next = (cfg.train_ddc.steps * cfg.train_ddc.batch_size * cfg.train_ddc.grad_accum) as u64;
    let mut r = rng::stream(cfg.seed, rng::salt::TRAIN_DDC, next);
    let x0 = data[0].affine(2.0, -1.0);
    let inst = ddc_train::sample_training_instance(pool, &x0, frozen, sched, &mut r)?;
    if inst.t <= 1 {
        log::info!("KL cross-check skipped: drew the final step, where the term is zero");
        return Ok(());
    }
    let delta = trained.residual(&inst.x0_hat, &inst.y_lifted, inst.t)?;
    let x0_hat_y = inst.x0_hat.sub(&delta)?;
    let analytic = ddc_train::loss_kl(&x0_hat_y, &inst.x_t, &x0, sched, inst.t)?;
    let empirical = ddc_train::loss_kl_empirical(
        &x0_hat_y,
        &inst.x_t,
        &x0,
        sched,
        inst.t,
        cfg.empirical_kl_samples,
        &mut r,
    )?;
    log::info!(
        "KL cross-check at t={}: analytic {:.6e}, empirical {:.6e} ({} draws/element)",
        inst.t,
        analytic,
        empirical,
        cfg.empirical_kl_samples
    );
    Ok(())
}

struct Models {
    denoiser: DenoiserModel,
    ddc: Option<ConsistencyModel>,
}

/// Loads the models a strategy needs. The consistency strategy reads
/// everything from the combined checkpoint; the rest need only a denoiser and
/// fall back to the combined file when no denoiser path is set.
fn load_models(cfg: &RunConfig, choice: StrategyChoice) -> Result<Models> {
    match choice {
        StrategyChoice::Ddc => {
            let ck = require_checkpoint(&cfg.ddc_checkpoint, "ddc_checkpoint")?;
            check_schedule(&ck.meta, cfg, "the checkpoint")?;
            Ok(Models {
                denoiser: denoiser_from(&ck, cfg)?,
                ddc: Some(consistency_from(&ck, cfg)?),
            })
        }
        _ => {
            let ck = match (&cfg.denoiser_checkpoint, &cfg.ddc_checkpoint) {
                (Some(path), _) => Checkpoint::load(path)?,
                (None, Some(path)) => Checkpoint::load(path)?,
                (None, None) => {
                    return Err(Error::invalid(
                        "this command needs denoiser_checkpoint (or ddc_checkpoint) in the config",
                    ))
                }
            };
            check_schedule(&ck.meta, cfg, "the checkpoint")?;
            Ok(Models { denoiser: denoiser_from(&ck, cfg)?, ddc: None })
        }
    }
}

fn strategy_for<'a>(
    cfg: &RunConfig,
    choice: StrategyChoice,
    sigma: f64,
    models: &'a Models,
) -> Result<Strategy<'a>> {
    Ok(match choice {
        StrategyChoice::Ddc => {
            let model = models
                .ddc
                .as_ref()
                .ok_or_else(|| Error::invalid("consistency model not loaded"))?;
            Strategy::Ddc(model)
        }
        StrategyChoice::Dps => Strategy::Dps { zeta: cfg.zeta },
        StrategyChoice::Ddnm => Strategy::Ddnm { sigma_scale: cfg.effective_ddnm_scale(sigma) },
        StrategyChoice::None => Strategy::None,
    })
}

struct SolvedImage {
    name: String,
    restored: Tensor,
    measurement: Tensor,
    metrics: ImageMetrics,
}

struct Evaluation {
    report: MetricsReport,
    images: Vec<SolvedImage>,
}

/// Restores every evaluation image under one strategy and collects metrics.
/// Measurement and sampler randomness are per-image streams, so the result
/// does not depend on the worker count.
fn evaluate(
    cfg: &RunConfig,
    choice: StrategyChoice,
    steps: usize,
    sigma: f64,
    models: &Models,
    truth: &[NamedImage],
) -> Result<Evaluation> {
    let sched = build_schedule(cfg)?;
    let respaced = sched.evenly_spaced(steps)?;
    let solved: Result<Vec<SolvedImage>> = truth
        .par_iter()
        .enumerate()
        .map(|(i, gt)| {
            let (_, h, w) = gt.image.dims3()?;
            let mut measure_rng = rng::stream(cfg.seed, rng::salt::MEASUREMENT, i as u64);
            let op = cfg.task.instantiate(h, w, &mut measure_rng)?;
            let clean = op.apply(&gt.image)?;
            let y = op.add_noise(&clean, sigma, &mut measure_rng)?;
            let strategy = strategy_for(cfg, choice, sigma, models)?;
            let mut solve_rng = rng::stream(cfg.seed, rng::salt::SOLVE, i as u64);
            let out =
                consistency::solve(&y, &op, &strategy, &models.denoiser, &respaced, &mut solve_rng)?;
            let scores = ImageMetrics {
                name: gt.name.clone(),
                psnr: metrics::psnr(&out.image, &gt.image)?,
                ssim: metrics::ssim(&out.image, &gt.image)?,
            };
            Ok(SolvedImage {
                name: gt.name.clone(),
                restored: out.image,
                measurement: y,
                metrics: scores,
            })
        })
        .collect();
    let solved = solved?;

    let n = solved.len() as f64;
    let psnr_mean = solved.iter().map(|s| s.metrics.psnr).sum::<f64>() / n;
    let ssim_mean = solved.iter().map(|s| s.metrics.ssim).sum::<f64>() / n;
    let frechet = if solved.len() >= 2 {
        let restored: Vec<Tensor> = solved.iter().map(|s| s.restored.clone()).collect();
        let reference: Vec<Tensor> = truth.iter().map(|i| i.image.clone()).collect();
        Some(metrics::frechet_proxy(&restored, &reference, &FeatureExtractor::new(cfg.feature_seed))?)
    } else {
        None
    };
    let report = MetricsReport {
        task: cfg.task.label(),
        strategy: choice.label().into(),
        sigma_y: sigma,
        steps,
        seed: cfg.seed,
        images: solved.iter().map(|s| s.metrics.clone()).collect(),
        psnr_mean,
        ssim_mean,
        frechet_proxy: frechet,
        kurtosis: None,
    };
    Ok(Evaluation { report, images: solved })
}

pub fn solve_cmd(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let truth = evaluation_images(cfg)?;
    let models = load_models(cfg, cfg.strategy)?;
    log::info!(
        "solving {} with {} on {} images, {} steps, sigma_y {}",
        cfg.task.label(),
        cfg.strategy.label(),
        truth.len(),
        cfg.solve_steps,
        cfg.sigma_y
    );
    let eval = evaluate(cfg, cfg.strategy, cfg.solve_steps, cfg.sigma_y, &models, &truth)?;
    for img in &eval.images {
        dataset::write_png(&cfg.out_dir.join(format!("restored_{}.png", img.name)), &img.restored)?;
        if cfg.save_measurements {
            dataset::write_png(
                &cfg.out_dir.join(format!("measurement_{}.png", img.name)),
                &img.measurement,
            )?;
        }
    }
    write_json(&cfg.out_dir.join("report.json"), &eval.report)?;
    log::info!(
        "psnr {:.3} dB, ssim {:.4}{}",
        eval.report.psnr_mean,
        eval.report.ssim_mean,
        eval.report
            .frechet_proxy
            .map(|f| format!(", frechet proxy {f:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct StrategyTrajectory {
    strategy: String,
    points: Vec<KurtosisPoint>,
}

/// Mean per-step excess kurtosis of the predicted noise for each baseline
/// strategy, on identical measurements and identical initial noise.
pub fn diagnose_cmd(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let truth = evaluation_images(cfg)?;
    let models = load_models(cfg, StrategyChoice::None)?;
    let sched = build_schedule(cfg)?;
    let respaced = sched.evenly_spaced(cfg.solve_steps)?;
    let mut trajectories = Vec::new();
    for choice in [StrategyChoice::Dps, StrategyChoice::Ddnm, StrategyChoice::None] {
        log::info!("kurtosis trajectory under {}", choice.label());
        let per_image: Result<Vec<Vec<KurtosisPoint>>> = truth
            .par_iter()
            .enumerate()
            .map(|(i, gt)| {
                let (_, h, w) = gt.image.dims3()?;
                let mut measure_rng = rng::stream(cfg.seed, rng::salt::MEASUREMENT, i as u64);
                let op = cfg.task.instantiate(h, w, &mut measure_rng)?;
                let clean = op.apply(&gt.image)?;
                let y = op.add_noise(&clean, cfg.sigma_y, &mut measure_rng)?;
                let strategy = strategy_for(cfg, choice, cfg.sigma_y, &models)?;
                let mut solve_rng = rng::stream(cfg.seed, rng::salt::SOLVE, i as u64);
                consistency::kurtosis_trajectory(
                    &y,
                    &op,
                    &strategy,
                    &models.denoiser,
                    &respaced,
                    &mut solve_rng,
                )
            })
            .collect();
        let per_image = per_image?;
        let steps = per_image[0].len();
        let mut points = Vec::with_capacity(steps);
        for s in 0..steps {
            let mean =
                per_image.iter().map(|tr| tr[s].kurtosis).sum::<f64>() / per_image.len() as f64;
            points.push(KurtosisPoint {
                step_index: per_image[0][s].step_index,
                t: per_image[0][s].t,
                kurtosis: mean,
            });
        }
        trajectories.push(StrategyTrajectory { strategy: choice.label().into(), points });
    }
    write_json(&cfg.out_dir.join("kurtosis.json"), &trajectories)?;
    let mut csv = String::from("strategy,step_index,t,kurtosis\n");
    for tr in &trajectories {
        for p in &tr.points {
            csv.push_str(&format!("{},{},{},{}\n", tr.strategy, p.step_index, p.t, p.kurtosis));
        }
    }
    let csv_path = cfg.out_dir.join("kurtosis.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", csv_path.display())))?;
    log::info!("wrote {} and kurtosis.csv", cfg.out_dir.join("kurtosis.json").display());
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig, axis: SweepAxis) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let truth = evaluation_images(cfg)?;
    let models = load_models(cfg, cfg.strategy)?;
    let cells: Vec<(usize, f64)> = match axis {
        SweepAxis::Steps => STEP_SWEEP.iter().map(|&s| (s, cfg.sigma_y)).collect(),
        SweepAxis::Sigma => SIGMA_SWEEP.iter().map(|&s| (cfg.solve_steps, s)).collect(),
    };
    let mut reports = Vec::with_capacity(cells.len());
    for (steps, sigma) in cells {
        log::info!("sweep cell: {} steps, sigma_y {}", steps, sigma);
        let eval = evaluate(cfg, cfg.strategy, steps, sigma, &models, &truth)?;
        log::info!("  psnr {:.3} dB, ssim {:.4}", eval.report.psnr_mean, eval.report.ssim_mean);
        reports.push(eval.report);
    }
    write_json(&cfg.out_dir.join("sweep.json"), &reports)?;
    let mut csv = String::from("strategy,steps,sigma_y,psnr_mean,ssim_mean,frechet_proxy\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy,
            r.steps,
            r.sigma_y,
            r.psnr_mean,
            r.ssim_mean,
            r.frechet_proxy.map(|f| f.to_string()).unwrap_or_default()
        ));
    }
    let csv_path = cfg.out_dir.join("sweep.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", csv_path.display())))?;
    log::info!("wrote {} and sweep.csv", cfg.out_dir.join("sweep.json").display());
    Ok(())
}
