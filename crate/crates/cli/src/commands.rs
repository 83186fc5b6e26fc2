//! The `gen`, `train`, `eval`, `sweep` and `visualize` commands.
//!
//! On-disk layout under the configured output directory:
//!
//! ```text
//! data/manifest.txt                      generation summary
//! data/{train,test}/images.f64           little-endian [N,3,S,S] doubles
//! data/{train,test}/labels.txt           index label gt_box patch_box
//! data/{train,test}/masks.u8             object masks, one byte per pixel
//! data/preview.ppm
//! <variant>/seed<k>/config.txt           effective configuration
//! <variant>/seed<k>/train_log.csv
//! <variant>/seed<k>/checkpoints/epoch_NNN.ckpt
//! <variant>/seed<k>/report.csv, summary.txt
//! <variant>/seed<k>/vis/sample_NNNN.ppm, legend.txt
//! sweep/curves.csv, curves.svg, summary.txt
//! run.log                                timestamps (never compared)
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use rfga_core::backbone::{
    cam, predict, top1_from_predictions, train_epoch, BackboneParams, ModelConfig, Prediction,
    Sgd, Variant, IMAGE_CHANNELS,
};
use rfga_core::rfga::attention_summary;
use rfga_core::synth::{generate_dataset, Manifest, SynthDataset};
use rfga_core::wsol::{extract_box, max_box_acc, normalize_map, BoundingBox, EvalSample, Upsample, WsolReport};
use rfga_core::{GtSample, Mode, Tape, Tensor};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::csv::{emit_curves, emit_epoch_row, emit_report, EpochRow, TRAIN_LOG_HEADER};
use crate::render::{gray, heat, line_plot_svg, Raster, GT_COLOR, PRED_COLOR};

/// Paths of every artifact for one configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.out.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.root.join(variant.name()).join(format!("seed{seed}"))
    }

    pub fn checkpoint(&self, variant: Variant, seed: u64, epoch: usize) -> PathBuf {
        self.run_dir(variant, seed)
            .join("checkpoints")
            .join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

/// Appends a timestamped line to `run.log`; failures only warn.
fn sidecar(root: &Path, msg: &str) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let res = fs::create_dir_all(root).and_then(|_| {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(root.join("run.log"))
            .and_then(|mut f| writeln!(f, "{secs:.3} {msg}"))
    });
    if let Err(e) = res {
        log::warn!("cannot write run.log: {e}");
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn model_config(cfg: &ExperimentConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        n_classes: cfg.data.n_classes,
        image_size: cfg.data.image_size,
        rfga: variant.rfga_config(cfg.kernel_size),
    }
}

// ---------------------------------------------------------------- gen

fn box_fields(b: &BoundingBox) -> String {
    format!("{} {} {} {}", b.x_min, b.y_min, b.x_max, b.y_max)
}

fn write_split(dir: &Path, samples: &[GtSample]) -> Result<()> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        images.extend(s.image.data().iter().flat_map(|v| v.to_le_bytes()));
        masks.extend(s.mask.iter().map(|&m| u8::from(m)));
        labels += &format!(
            "{i} {} {} {}\n",
            s.label,
            box_fields(&s.gt_box),
            box_fields(&s.patch_box)
        );
    }
    write(&dir.join("images.f64"), images)?;
    write(&dir.join("masks.u8"), masks)?;
    write(&dir.join("labels.txt"), labels)
}

/// First sample of every class with up to `per_class` columns.
fn preview(samples: &[GtSample], n_classes: usize, per_class: usize) -> Raster {
    let mut panels = Vec::new();
    for c in 0..n_classes {
        let row: Vec<&GtSample> = samples.iter().filter(|s| s.label == c).take(per_class).collect();
        for k in 0..per_class {
            let mut p = match row.get(k) {
                Some(s) => Raster::from_image(&s.image),
                None => continue,
            };
            p.draw_box(&row[k].gt_box, GT_COLOR);
            panels.push(p);
        }
    }
    Raster::grid(&panels, per_class, 2)
}

/// Generates the dataset and writes it under `<out>/data`.
pub fn cmd_gen(cfg: &ExperimentConfig, force: bool) -> Result<Manifest> {
    let dir = Layout::new(cfg).data_dir();
    let manifest_path = dir.join("manifest.txt");
    if manifest_path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", dir.display());
    }
    let data = generate_dataset(&cfg.data)?;
    write_split(&dir.join("train"), &data.train)?;
    write_split(&dir.join("test"), &data.test)?;
    write(&dir.join("preview.ppm"), preview(&data.test, cfg.data.n_classes, 8).to_ppm())?;
    write(&manifest_path, data.manifest.to_text())?;
    sidecar(&cfg.out, &format!("gen {}", dir.display()));
    log::info!(
        "wrote {} train / {} test samples to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(data.manifest)
}

fn parse_box(f: &[&str]) -> Result<BoundingBox> {
    let v: Vec<usize> = f.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    Ok(BoundingBox::new(v[0], v[1], v[2], v[3])?)
}

fn read_split(dir: &Path, image_size: usize) -> Result<Vec<GtSample>> {
    let labels = fs::read_to_string(dir.join("labels.txt"))
        .with_context(|| format!("reading {}/labels.txt (run `gen` first)", dir.display()))?;
    let images = fs::read(dir.join("images.f64"))?;
    let masks = fs::read(dir.join("masks.u8"))?;
    let px = image_size * image_size;
    let per_image = IMAGE_CHANNELS * px * 8;
    let n = labels.lines().count();
    ensure!(
        images.len() == n * per_image && masks.len() == n * px,
        "{}: {} labels do not match image/mask sizes for {image_size} px images",
        dir.display(),
        n
    );
    labels
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            ensure!(f.len() == 10 && f[0] == i.to_string(), "{}/labels.txt line {}: malformed", dir.display(), i + 1);
            let data = images[i * per_image..(i + 1) * per_image]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mask: Vec<bool> = masks[i * px..(i + 1) * px].iter().map(|&b| b != 0).collect();
            let patch_box = parse_box(&f[6..10])?;
            let body_mask = mask
                .iter()
                .enumerate()
                .map(|(j, &m)| m && !patch_box.contains(j % image_size, j / image_size))
                .collect();
            Ok(GtSample {
                image: Tensor::new(vec![IMAGE_CHANNELS, image_size, image_size], data)?,
                label: f[1].parse()?,
                gt_box: parse_box(&f[2..6])?,
                mask,
                patch_box,
                body_mask,
            })
        })
        .collect()
}

/// Loads the dataset written by `gen`, checking it matches the config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SynthDataset> {
    let dir = Layout::new(cfg).data_dir();
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .with_context(|| format!("no dataset at {} (run `gen` first)", dir.display()))?;
    let manifest = Manifest::parse(&text).with_context(|| format!("{}/manifest.txt", dir.display()))?;
    let d = &cfg.data;
    let expected_counts = |per_class| vec![per_class; d.n_classes];
    ensure!(
        manifest.n_classes == d.n_classes
            && manifest.image_size == d.image_size
            && manifest.seed == d.seed
            && manifest.train_counts == expected_counts(d.train_per_class)
            && manifest.test_counts == expected_counts(d.test_per_class),
        "dataset at {} was generated with a different [data] section; regenerate with --force",
        dir.display()
    );
    let train = read_split(&dir.join("train"), d.image_size)?;
    let test = read_split(&dir.join("test"), d.image_size)?;
    Ok(SynthDataset {
        train,
        test,
        manifest,
    })
}

// ---------------------------------------------------------------- eval helpers

/// Localization samples using the CAM of each sample's true class.
pub fn cam_samples(data: &[GtSample], preds: &[Prediction]) -> Result<Vec<EvalSample>> {
    data.iter()
        .zip(preds)
        .map(|(s, p)| {
            let s_img = s.image.shape()[1];
            Ok(EvalSample::new(cam(&p.score_maps, s.label)?, s.gt_box, (s_img, s_img))?)
        })
        .collect()
}

/// Samples whose activation is the ground-truth object mask.
pub fn oracle_samples(data: &[GtSample]) -> Result<Vec<EvalSample>> {
    data.iter()
        .map(|s| {
            let n = s.image.shape()[1];
            let map = Tensor::new(vec![n, n], s.mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;
            Ok(EvalSample::new(map, s.gt_box, (n, n))?)
        })
        .collect()
}

fn upsample_mode(cfg: &ExperimentConfig) -> Upsample {
    if cfg.bilinear {
        Upsample::Bilinear
    } else {
        Upsample::Nearest
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<EpochRow>,
    pub params: BackboneParams,
}

pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg);
    let (variant, seed) = (cfg.variant, cfg.train.seed);
    let run_dir = layout.run_dir(variant, seed);
    let log_path = run_dir.join("train_log.csv");
    if log_path.exists() && !force {
        bail!("{} already exists; pass --force to retrain", run_dir.display());
    }
    if run_dir.exists() {
        fs::remove_dir_all(&run_dir).with_context(|| format!("clearing {}", run_dir.display()))?;
    }
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    write(&run_dir.join("config.txt"), cfg.to_text())?;
    sidecar(&cfg.out, &format!("train {variant} seed={seed} start"));

    let mut params = BackboneParams::init(model_config(cfg, variant), seed)?;
    let mut sgd = Sgd::new(&mut params, cfg.train.momentum);
    let probe = &data.test[..cfg.log_eval_samples.min(data.test.len())];
    let mut log = fs::File::create(&log_path)?;
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    let mut rows = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let stats = train_epoch(&data.train, &mut params, &mut sgd, &cfg.train, epoch)
            .with_context(|| format!("training {variant} seed {seed}, epoch {}; partial log kept at {}", epoch + 1, log_path.display()))?;
        let (test_top1, test_max_box_acc) = if probe.is_empty() {
            (None, None)
        } else {
            let preds = predict(probe, &params)?;
            let report = max_box_acc(&cam_samples(probe, &preds)?, &cfg.deltas, upsample_mode(cfg))?;
            (
                Some(top1_from_predictions(probe, &preds)?),
                Some(report.mean_max_box_acc()),
            )
        };
        let row = EpochRow {
            epoch: epoch + 1,
            lr: stats.lr,
            loss: stats.mean_loss,
            train_top1: stats.top1,
            test_top1,
            test_max_box_acc,
            last: epoch + 1 == cfg.train.epochs,
        };
        log.write_all(emit_epoch_row(&row).as_bytes())?;
        log.flush()?;
        checkpoint::save(&layout.checkpoint(variant, seed, epoch + 1), &params)?;
        log::info!(
            "{variant} seed {seed} epoch {}/{}: loss {:.4} train top-1 {:.3}{}",
            epoch + 1,
            cfg.train.epochs,
            row.loss,
            row.train_top1,
            row.test_max_box_acc
                .map(|m| format!(" probe MaxBoxAcc {m:.3}"))
                .unwrap_or_default()
        );
        rows.push(row);
    }
    sidecar(&cfg.out, &format!("train {variant} seed={seed} done"));
    Ok(TrainOutcome {
        run_dir,
        rows,
        params,
    })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub variant: Variant,
    pub report: WsolReport,
    pub top1: f64,
    /// Mean of MaxBoxAcc over δ (the "Avg." column).
    pub avg: f64,
}

/// Loads a model for `variant` from `checkpoint` or, when absent, from the
/// last epoch of the configured run.
pub fn load_model(cfg: &ExperimentConfig, variant: Variant, checkpoint: Option<&Path>) -> Result<BackboneParams> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Layout::new(cfg).checkpoint(variant, cfg.train.seed, cfg.train.epochs));
    let mut params = BackboneParams::init(model_config(cfg, variant), cfg.train.seed)?;
    checkpoint::load_into(&path, &mut params)?;
    Ok(params)
}

pub fn evaluate(cfg: &ExperimentConfig, data: &[GtSample], variant: Variant, params: &BackboneParams) -> Result<EvalOutcome> {
    let preds = predict(data, params)?;
    let report = max_box_acc(&cam_samples(data, &preds)?, &cfg.deltas, upsample_mode(cfg))?;
    Ok(EvalOutcome {
        variant,
        top1: top1_from_predictions(data, &preds)?,
        avg: report.mean_max_box_acc(),
        report,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Table-style summary: MaxBoxAcc per δ, their average, mIoU and top-1, in percent.
pub fn summary_table(rows: &[EvalOutcome]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = String::from("| variant |");
    for d in &first.report.deltas {
        s += &format!(" δ={d} |");
    }
    s += " Avg. | mIoU | τ* | top-1 |\n|---|";
    s += &"---|".repeat(first.report.deltas.len() + 4);
    s.push('\n');
    for r in rows {
        s += &format!("| {} |", r.variant);
        for m in &r.report.max_box_acc {
            s += &format!(" {} |", pct(*m));
        }
        s += &format!(
            " {} | {} | {} | {} |\n",
            pct(r.avg),
            pct(r.report.miou_at_optimal_tau),
            r.report.overall_optimal_tau,
            pct(r.top1)
        );
    }
    s
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let data = load_dataset(cfg)?;
    let params = load_model(cfg, cfg.variant, checkpoint)?;
    let outcome = evaluate(cfg, &data.test, cfg.variant, &params)?;
    let dir = Layout::new(cfg).run_dir(cfg.variant, cfg.train.seed);
    write(&dir.join("report.csv"), emit_report(&outcome.report))?;
    let mut summary = summary_table(std::slice::from_ref(&outcome));
    summary += "\nper-δ optimal τ:";
    for (d, t) in outcome.report.deltas.iter().zip(&outcome.report.optimal_tau) {
        summary += &format!(" {d}→{t}");
    }
    summary.push('\n');
    write(&dir.join("summary.txt"), &summary)?;
    sidecar(&cfg.out, &format!("eval {} seed={}", cfg.variant, cfg.train.seed));
    println!("{summary}");
    Ok(outcome)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub evaluated: Vec<EvalOutcome>,
    pub skipped: Vec<Variant>,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let data = load_dataset(cfg)?;
    let layout = Layout::new(cfg);
    let mut evaluated = Vec::new();
    let mut skipped = Vec::new();
    for &variant in &cfg.sweep_variants {
        let path = layout.checkpoint(variant, cfg.train.seed, cfg.train.epochs);
        if !path.exists() {
            log::warn!("skipping {variant}: no checkpoint at {}", path.display());
            skipped.push(variant);
            continue;
        }
        let params = load_model(cfg, variant, Some(&path))?;
        evaluated.push(evaluate(cfg, &data.test, variant, &params)?);
    }
    ensure!(!evaluated.is_empty(), "no trained variant found under {}", layout.root.display());
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for e in &evaluated {
        let curve = e.report.mean_curve();
        rows.extend(
            e.report
                .tau_grid
                .iter()
                .zip(&curve)
                .map(|(&t, &a)| (e.variant.name().to_string(), t, a)),
        );
        series.push((
            e.variant.name().to_string(),
            e.report.tau_grid.iter().copied().zip(curve).collect(),
        ));
    }
    let dir = layout.sweep_dir();
    write(&dir.join("curves.csv"), emit_curves(&rows))?;
    write(
        &dir.join("curves.svg"),
        line_plot_svg("Box accuracy vs. threshold", "τ", "mean box accuracy over δ", &series),
    )?;
    let mut summary = summary_table(&evaluated);
    if !skipped.is_empty() {
        let names: Vec<&str> = skipped.iter().map(|v| v.name()).collect();
        summary += &format!("\nskipped (no checkpoint): {}\n", names.join(", "));
    }
    write(&dir.join("summary.txt"), &summary)?;
    sidecar(&cfg.out, "sweep");
    println!("{summary}");
    Ok(SweepOutcome { evaluated, skipped })
}

// ---------------------------------------------------------------- visualize

/// Panel names in display order.
pub const PANELS: [&str; 10] = ["input", "cam", "z_c", "z_h", "z_w", "M", "A(X)", "X_hat", "D", "boxes"];

#[derive(Debug, Clone)]
pub struct SampleFigure {
    pub id: usize,
    /// `(panel name, raster)`; `None` marks an omitted panel.
    pub panels: Vec<(&'static str, Option<Raster>)>,
}

/// Renders every panel for one test sample.
pub fn figure(cfg: &ExperimentConfig, params: &BackboneParams, sample: &GtSample, id: usize) -> Result<SampleFigure> {
    let s = cfg.data.image_size;
    let f = params.config.feature_size();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(Tensor::stack(&[&sample.image])?);
    let trace = params.forward_on_tape(&mut tape, &vars, x, Mode::Eval)?;
    let score_maps = tape.value(trace.score_maps).index_axis0(0)?;
    let cam_map = cam(&score_maps, sample.label)?;
    let norm_cam = normalize_map(&cam_map);
    let mut panels: Vec<(&'static str, Option<Raster>)> = vec![
        ("input", Some(Raster::from_image(&sample.image))),
        ("cam", Some(Raster::from_map(&norm_cam, s, heat))),
    ];
    let summary = |t: &Tensor| -> Result<Option<Raster>> {
        Ok(Some(Raster::from_map(&attention_summary(t, (f, f))?, s, gray)))
    };
    match &trace.rfga {
        Some(r) => {
            let first = |v: rfga_core::Var| tape.value(v).index_axis0(0);
            for (name, v) in [("z_c", r.z_channel), ("z_h", r.z_height), ("z_w", r.z_width)] {
                let p = match v {
                    Some(v) => summary(&first(v)?)?,
                    None => None,
                };
                panels.push((name, p));
            }
            let feats = first(trace.features)?;
            let out = first(r.out)?;
            let diff = Tensor::new(
                out.shape().to_vec(),
                out.data().iter().zip(feats.data()).map(|(a, b)| a - b).collect(),
            )?;
            panels.push(("M", summary(&first(r.m)?)?));
            panels.push(("A(X)", summary(&first(r.attended)?)?));
            panels.push(("X_hat", summary(&out)?));
            panels.push(("D", summary(&diff)?));
        }
        None => {
            for name in ["z_c", "z_h", "z_w", "M", "A(X)", "X_hat", "D"] {
                panels.push((name, None));
            }
        }
    }
    let mut boxes = Raster::from_image(&sample.image);
    boxes.draw_box(&sample.gt_box, GT_COLOR);
    let optimal = best_tau(cfg);
    if let Some(b) = extract_box(&norm_cam, optimal, (s, s), upsample_mode(cfg))? {
        boxes.draw_box(&b, PRED_COLOR);
    }
    panels.push(("boxes", Some(boxes)));
    Ok(SampleFigure { id, panels })
}

/// Threshold for the predicted box overlay: the run's overall optimal τ when
/// an evaluation report exists, else 0.5.
fn best_tau(cfg: &ExperimentConfig) -> f64 {
    let path = Layout::new(cfg).run_dir(cfg.variant, cfg.train.seed).join("report.csv");
    fs::read_to_string(path)
        .ok()
        .and_then(|text| crate::csv::parse_report(&text).ok())
        .map_or(0.5, |r| r.overall_optimal_tau)
}

pub fn cmd_visualize(cfg: &ExperimentConfig, checkpoint: Option<&Path>, ids: &[usize]) -> Result<Vec<SampleFigure>> {
    let data = load_dataset(cfg)?;
    let params = load_model(cfg, cfg.variant, checkpoint)?;
    let dir = Layout::new(cfg).run_dir(cfg.variant, cfg.train.seed).join("vis");
    let mut figures = Vec::new();
    let mut legend = format!("panels, left to right: {}\n", PANELS.join(", "));
    legend += "input: image; cam: normalized CAM of the true class (heat ramp); other maps: \
               channel-averaged, min-max normalized (gray); boxes: ground truth red, prediction green\n";
    for &id in ids {
        let Some(sample) = data.test.get(id) else {
            bail!("sample id {id} out of range (test set has {} samples)", data.test.len());
        };
        let fig = figure(cfg, &params, sample, id)?;
        let s = cfg.data.image_size;
        let rasters: Vec<Raster> = fig
            .panels
            .iter()
            .map(|(_, p)| p.clone().unwrap_or_else(|| Raster::filled(s, s, [0; 3])))
            .collect();
        write(
            &dir.join(format!("sample_{id:04}.ppm")),
            Raster::grid(&rasters, rasters.len(), 2).to_ppm(),
        )?;
        let omitted: Vec<&str> = fig.panels.iter().filter(|(_, p)| p.is_none()).map(|(n, _)| *n).collect();
        legend += &format!("sample {id}: label {}", sample.label);
        if !omitted.is_empty() {
            legend += &format!("; omitted (no attention module): {}", omitted.join(", "));
        }
        legend.push('\n');
        figures.push(fig);
    }
    write(&dir.join("legend.txt"), legend)?;
    sidecar(&cfg.out, &format!("visualize {} {:?}", cfg.variant, ids));
    Ok(figures)
}
