//! One function per subcommand. Inputs are read and hashed before the run
//! directory is created, so bad inputs leave nothing behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use prospectr::clf::{map_from_features, map_pixels, predict_map, Classifier, ProspectivityMap};
use prospectr::mae::{pretrain as mae_pretrain, EpochRecord, MaeModel, Reconstruction};
use prospectr::metrics::{EvalReport, MethodSummary, Metrics, SeedRow, IMBALANCE_CAVEAT};
use prospectr::nn::{checkpoint, Complexity, Encoder};
use prospectr::preprocess::run_pipeline;
use prospectr::raster::{
    load_labels, load_raster, read_records, save_labels, save_raster, write_records, Label, LabelRaster, MultiBandRaster,
};
use prospectr::synth::generate_world;
use prospectr::xai::attribution_maps;
use prospectr::RngStream;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{write_history, write_scores, Dataset, Scene};
use crate::render::{render, render_png, Image, Style, NODATA};
use crate::rundir::{Inputs, RunDir};
use crate::{Arch, Command, FeatureKind};

/// Map PNGs are enlarged by this factor.
const PNG_SCALE: usize = 4;
/// Per-pixel attribution PNGs are written for at most this many pixels.
const MAX_PIXEL_PNGS: usize = 16;

pub struct Ctx {
    pub cfg: RunConfig,
    /// Seed of single-run subcommands.
    pub seed: u64,
    pub out: PathBuf,
    pub name: String,
}

impl Ctx {
    fn run_dir(&self, inputs: &Inputs) -> CliResult<RunDir> {
        let dir = RunDir::create(&self.out, &self.name, &self.cfg, inputs)?;
        log::info!("run directory {}", dir.path.display());
        Ok(dir)
    }
}

pub fn dispatch(ctx: &Ctx, cmd: &Command) -> CliResult<PathBuf> {
    match cmd {
        Command::Synth => synth(ctx),
        Command::Preprocess { raster } => preprocess(ctx, raster),
        Command::Pretrain { raster } => pretrain(ctx, raster),
        Command::SampleNegatives {
            raster,
            deposits,
            encoder,
        } => sample_negatives(ctx, raster, deposits, encoder.as_deref()),
        Command::Train {
            raster,
            labels,
            encoder,
            no_pretrain,
            features,
            arch,
        } => {
            let method = train_method(encoder.is_some(), *no_pretrain, *features, *arch)?;
            train(ctx, raster, labels, encoder.as_deref(), method)
        }
        Command::Predict { raster, model } => predict(ctx, raster, model),
        Command::Explain {
            raster,
            model,
            pixels,
            labels,
            grid,
        } => explain(ctx, raster, model, pixels, labels.as_deref(), *grid),
        Command::Evaluate {
            raster,
            deposits,
            encoder,
        } => evaluate(ctx, raster, deposits, encoder.as_deref()),
        Command::AblateSparsity {
            raster,
            deposits,
            encoder,
        } => ablate_sparsity(ctx, raster, deposits, encoder.as_deref()),
        Command::AblateFilterRange {
            raster,
            deposits,
            encoder,
        } => ablate_filter_range(ctx, raster, deposits, encoder.as_deref()),
        Command::Report { inputs } => report(ctx, inputs),
    }
}

fn train_method(has_encoder: bool, no_pretrain: bool, features: FeatureKind, arch: Arch) -> CliResult<Method> {
    match (features, arch) {
        (FeatureKind::Raw, Arch::Mlp) => {
            if has_encoder || no_pretrain {
                return Err(CliError::Config("--features raw --arch mlp takes neither --encoder nor --no-pretrain".into()));
            }
            Ok(Method::Ann)
        }
        (FeatureKind::Encoder, Arch::Vit) => match (has_encoder, no_pretrain) {
            (true, false) => Ok(Method::Ssl),
            (false, true) => Ok(Method::Vit),
            (true, true) => Err(CliError::Config("--encoder and --no-pretrain are exclusive".into())),
            (false, false) => Err(CliError::Config(
                "train needs --encoder, --no-pretrain, or --features raw --arch mlp".into(),
            )),
        },
        _ => Err(CliError::Config("--features raw goes with --arch mlp, encoder features with --arch vit".into())),
    }
}

fn load_encoder(path: Option<&Path>) -> CliResult<Option<Encoder<f32>>> {
    path.map(|p| Encoder::load(p).map(|(e, _)| e)).transpose().map_err(Into::into)
}

fn hash_encoder(inputs: &mut Inputs, path: Option<&Path>) -> CliResult<()> {
    if let Some(p) = path {
        inputs.add_checkpoint("encoder", p)?;
    }
    Ok(())
}

fn fmt_pct(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

fn write_report(dir: &RunDir, stem: &str, report: &EvalReport) -> CliResult<()> {
    dir.write_text(&format!("{stem}.json"), &report.to_json()?)?;
    report.summary_csv(&dir.file(&format!("{stem}_summary.csv")))?;
    report.seeds_csv(&dir.file(&format!("{stem}_seeds.csv")))?;
    Ok(())
}

fn summaries(rows: BTreeMap<usize, (String, Vec<SeedRow>, Option<Complexity>)>) -> CliResult<Vec<MethodSummary>> {
    rows.into_values()
        .map(|(name, rows, c)| MethodSummary::new(name, rows, c).map_err(Into::into))
        .collect()
}

fn synth(ctx: &Ctx) -> CliResult<PathBuf> {
    let world = generate_world(&ctx.cfg.synth)?;
    let dir = ctx.run_dir(&Inputs::default())?;
    save_raster(&world.raster, &dir.file("world.mbr"))?;
    save_raster(&world.truth, &dir.file("truth.mbr"))?;
    write_records(&world.deposits, &dir.file("deposits.csv"))?;
    let burned = world.raster.rasterize(&world.deposits)?;
    save_labels(&burned.labels, world.raster.transform(), &dir.file("labels.mbr"))?;
    let (rows, cols) = (world.truth.rows(), world.truth.cols());
    render_png(&dir.file("truth.png"), Style::Quantile5, &[world.truth.band(0)], rows, cols, PNG_SCALE)?;
    dir.write_json(
        "summary.json",
        &json!({
            "rows": rows,
            "cols": cols,
            "bands": world.raster.bands(),
            "deposits": world.deposits.len(),
            "deposit_pixels": burned.placed,
        }),
    )?;
    log::info!("{} layers, {} deposits on {} pixels", world.raster.bands(), world.deposits.len(), burned.placed);
    Ok(dir.path)
}

fn preprocess(ctx: &Ctx, raster: &Path) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    let r = load_raster(raster)?;
    let (out, report) = run_pipeline(&r, &ctx.cfg.preprocess)?;
    let dir = ctx.run_dir(&inputs)?;
    save_raster(&out, &dir.file("features.mbr"))?;
    dir.write_json("preprocess_report.json", &report)?;
    log::info!("{} of {} bands kept", out.bands(), r.bands());
    Ok(dir.path)
}

/// Band 0 of each window as a grayscale mosaic: one row per sample with the
/// original, the masked input and the reconstruction side by side.
fn recon_mosaic(rec: &Reconstruction, patch: usize) -> Image {
    let s = rec.original.shape();
    let (n, w) = (s[0], s[2]);
    let plane = s[1] * w * w;
    let g = w / patch;
    let gap = 1;
    let (width, height) = (3 * w + 2 * gap, n * w + (n.saturating_sub(1)) * gap);
    let orig = rec.original.data();
    let recon = rec.recon.data();
    let range = orig
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let gray = |v: f32| -> [u8; 3] {
        if !v.is_finite() {
            return NODATA;
        }
        let t = if range.1 > range.0 { ((v - range.0) / (range.1 - range.0)).clamp(0.0, 1.0) } else { 0.5 };
        let b = (t * 255.0).round() as u8;
        [b, b, b]
    };
    let mut rgb = vec![255u8; 3 * width * height];
    for k in 0..n {
        let masked = &rec.plans[k].masked;
        for i in 0..w {
            for j in 0..w {
                let idx = k * plane + i * w + j;
                let hidden = masked.contains(&((i / patch) * g + j / patch));
                let tiles = [gray(orig[idx]), if hidden { NODATA } else { gray(orig[idx]) }, gray(recon[idx])];
                for (t, px) in tiles.iter().enumerate() {
                    let (r, c) = (k * (w + gap) + i, t * (w + gap) + j);
                    rgb[3 * (r * width + c)..3 * (r * width + c) + 3].copy_from_slice(px);
                }
            }
        }
    }
    Image { width, height, rgb }
}

fn pretrain(ctx: &Ctx, raster: &Path) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    let r = load_raster(raster)?;
    let mut cfg = ctx.cfg.mae.clone();
    cfg.encoder.bands = r.bands();
    cfg.encoder.validate()?;
    if cfg.encoder.window > r.rows().min(r.cols()) {
        return Err(CliError::Data(format!("{}px windows do not fit a {}x{} raster", cfg.encoder.window, r.rows(), r.cols())));
    }
    let centers = r.valid_pixels();
    let mut model = MaeModel::<f32>::new(cfg.encoder.clone(), cfg.decoder.clone(), &mut RngStream::from_seed(ctx.seed).derive("mae-init"))?;
    let dir = ctx.run_dir(&inputs)?;
    let recon_dir = dir.subdir("reconstructions")?;
    let mut png_error = None;
    let patch = cfg.encoder.patch;
    let mut observer = |e: &EpochRecord, rec: Option<&Reconstruction>| {
        if let Some(rec) = rec {
            let path = recon_dir.join(format!("epoch{:03}.png", e.epoch));
            if let Err(err) = recon_mosaic(rec, patch).scaled(PNG_SCALE).save(&path) {
                png_error.get_or_insert(err);
            }
        }
    };
    let report = mae_pretrain(&mut model, &r, &centers, &cfg, ctx.seed, &mut observer)?;
    if let Some(err) = png_error {
        return Err(err);
    }
    model.encoder.save(&dir.file("encoder.json"), ctx.seed)?;
    checkpoint::save(
        &dir.file("mae.json"),
        &model.arch(),
        ctx.seed,
        &[("encoder", &model.encoder.store), ("decoder", &model.decoder.store)],
    )?;
    let mut w = csv::Writer::from_path(dir.file("history.csv"))?;
    w.write_record(["epoch", "loss", "ssim", "psnr"])?;
    for e in &report.history {
        w.write_record([e.epoch.to_string(), format!("{:.17}", e.loss), format!("{:.17}", e.ssim), format!("{:.17}", e.psnr)])?;
    }
    w.flush()?;
    dir.write_json("pretrain_report.json", &report)?;
    log::info!("kept epoch {} (held-out PSNR {:.2} dB)", report.best_epoch, report.best_psnr);
    Ok(dir.path)
}

fn sample_negatives(ctx: &Ctx, raster: &Path, deposits: &Path, encoder: Option<&Path>) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    inputs.add("deposits", deposits)?;
    hash_encoder(&mut inputs, encoder)?;
    let r = load_raster(raster)?;
    let records = read_records(deposits)?;
    let enc = load_encoder(encoder)?;
    let scene = Scene::new(&r, &ctx.cfg, enc.as_ref())?;
    let positives = scene.positives(&records)?;
    let scale = scene.similarity(&positives)?;
    let ds = scene.dataset(&scale, &positives, ctx.cfg.pu.filter_range, ctx.seed)?;
    let dir = ctx.run_dir(&inputs)?;

    let mut labels = LabelRaster::unknown(r.rows(), r.cols());
    for &p in &positives {
        let (row, col) = scene.centers[p];
        labels.set(row, col, Label::Present);
    }
    for &n in &ds.negatives {
        let (row, col) = scene.centers[n];
        labels.set(row, col, Label::Absent);
    }
    save_labels(&labels, r.transform(), &dir.file("labels.mbr"))?;

    let ranks = scale.ranks();
    let mut plane = vec![f32::NAN; r.pixels()];
    let mut w = csv::Writer::from_path(dir.file("similarity.csv"))?;
    w.write_record(["sample_id", "row", "col", "distance", "rank"])?;
    for &i in &scale.order {
        let id = scale.unknown_ids[i];
        let (row, col) = scene.centers[id];
        plane[id] = scale.distance[i] as f32;
        w.write_record([id.to_string(), row.to_string(), col.to_string(), format!("{:.17}", scale.distance[i]), ranks[i].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.file("negatives.csv"))?;
    w.write_record(["sample_id", "row", "col"])?;
    for &id in &ds.negatives {
        let (row, col) = scene.centers[id];
        w.write_record([id.to_string(), row.to_string(), col.to_string()])?;
    }
    w.flush()?;
    dir.write_json("split.json", &ds)?;
    render_png(&dir.file("similarity.png"), Style::Quantile5, &[&plane], r.rows(), r.cols(), PNG_SCALE)?;
    log::info!("{} positives, {} negatives from {} unknowns", positives.len(), ds.negatives.len(), scale.unknown_ids.len());
    Ok(dir.path)
}

fn train(ctx: &Ctx, raster: &Path, labels: &Path, encoder: Option<&Path>, method: Method) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    inputs.add("labels", labels)?;
    hash_encoder(&mut inputs, encoder)?;
    let r = load_raster(raster)?;
    let lab = load_labels(labels)?;
    let enc = load_encoder(encoder)?;
    let scene = Scene::new(&r, &ctx.cfg, enc.as_ref())?;
    let items = scene.labeled_in(&lab)?;
    let negatives: Vec<usize> = items.iter().filter(|t| !t.1).map(|t| t.0).collect();
    if negatives.is_empty() || negatives.len() == items.len() {
        return Err(CliError::Data(
            "label raster needs both Present and Absent pixels (run sample-negatives first)".into(),
        ));
    }
    let ds = scene.dataset_from(items, ctx.cfg.pu.filter_range, negatives, ctx.seed)?;
    let trial = scene.trial(method, &ds, ctx.seed, None)?;
    let complexity = scene.complexity(&trial.clf)?;
    let dir = ctx.run_dir(&inputs)?;
    trial.clf.save(&dir.file("classifier.json"), ctx.seed)?;
    write_history(&dir.file("history.csv"), &trial.history)?;
    dir.write_json("split.json", &ds)?;
    write_scores(&dir.file("test_scores.csv"), &scene, &ds.split.test, &trial.scores)?;
    dir.write_json(
        "metrics.json",
        &json!({
            "method": method.name(),
            "seed": ctx.seed,
            "threshold": ctx.cfg.clf.threshold,
            "metrics": trial.row.metrics,
            "counts": trial.row.counts,
            "best_epoch": trial.history.best_epoch,
            "best_val_f1": trial.history.best_val_f1,
            "complexity": complexity,
        }),
    )?;
    log::info!("{} test F1 {:.3}", method.name(), trial.row.metrics.f1);
    Ok(dir.path)
}

fn load_classifier(path: &Path, r: &MultiBandRaster) -> CliResult<Classifier<f32>> {
    let (clf, _) = Classifier::<f32>::load(path)?;
    let bands_ok = match &clf.encoder {
        Some(e) => e.cfg.bands == r.bands() && e.cfg.window <= r.rows().min(r.cols()),
        None => clf.mlp.d_in % r.bands() == 0 && clf.window(r.bands()).pow(2) * r.bands() == clf.mlp.d_in,
    };
    if !bands_ok {
        return Err(CliError::Data(format!("model {} does not fit a {}-band raster", path.display(), r.bands())));
    }
    Ok(clf)
}

fn map_summary(map: &ProspectivityMap) -> serde_json::Value {
    let vals: Vec<f64> = map.mean.iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
    let stds: Vec<f64> = map.std.iter().filter(|v| v.is_finite()).map(|&v| v as f64).collect();
    let avg = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    json!({
        "rows": map.rows,
        "cols": map.cols,
        "evaluated": map.evaluated_count(),
        "mean_likelihood": avg(&vals),
        "max_likelihood": vals.iter().copied().fold(f64::NAN, f64::max),
        "mean_std": avg(&stds),
    })
}

fn mean_likelihood(map: &ProspectivityMap) -> f64 {
    let (s, n) = map
        .mean
        .iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    s / n.max(1) as f64
}

fn save_map_pngs(dir: &RunDir, stem: &str, map: &ProspectivityMap) -> CliResult<()> {
    render_png(&dir.file(&format!("{stem}.png")), Style::HeatOverGray, &[&map.mean, &map.std], map.rows, map.cols, PNG_SCALE)?;
    render_png(&dir.file(&format!("{stem}_quantiles.png")), Style::Quantile5, &[&map.mean], map.rows, map.cols, PNG_SCALE)
}

fn predict(ctx: &Ctx, raster: &Path, model: &Path) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    inputs.add_checkpoint("model", model)?;
    let r = load_raster(raster)?;
    let clf = load_classifier(model, &r)?;
    let map = predict_map(&clf, &r, ctx.cfg.raster.map_stride, ctx.cfg.clf.mc_passes, ctx.seed, ctx.cfg.raster.batch)?;
    let dir = ctx.run_dir(&inputs)?;
    save_raster(&map.to_raster(&r)?, &dir.file("prospectivity.mbr"))?;
    save_map_pngs(&dir, "prospectivity", &map)?;
    dir.write_json("summary.json", &map_summary(&map))?;
    log::info!("{} pixels mapped", map.evaluated_count());
    Ok(dir.path)
}

fn parse_pixel(s: &str, r: &MultiBandRaster) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("--pixel `{s}` is not `row,col` inside the raster"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let (row, col) = (a.trim().parse::<usize>().map_err(|_| bad())?, b.trim().parse::<usize>().map_err(|_| bad())?);
    if row >= r.rows() || col >= r.cols() {
        return Err(bad());
    }
    Ok((row, col))
}

#[derive(Serialize)]
struct AttributionRecord {
    row: usize,
    col: usize,
    steps: usize,
    f_input: f64,
    f_baseline: f64,
    completeness_gap: f64,
    baseline_sha256: String,
    band_totals: BTreeMap<String, f64>,
}

fn baseline_hash(baseline: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in baseline {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn explain(ctx: &Ctx, raster: &Path, model: &Path, pixels: &[String], labels: Option<&Path>, grid: bool) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    inputs.add("raster", raster)?;
    inputs.add_checkpoint("model", model)?;
    if let Some(l) = labels {
        inputs.add("labels", l)?;
    }
    let r = load_raster(raster)?;
    let mut targets: Vec<(usize, usize)> = pixels.iter().map(|s| parse_pixel(s, &r)).collect::<CliResult<_>>()?;
    if let Some(l) = labels {
        let lab = load_labels(l)?;
        if lab.rows() != r.rows() || lab.cols() != r.cols() {
            return Err(CliError::Data("label raster does not match the feature grid".into()));
        }
        targets.extend(lab.pixels_with(Label::Present));
    }
    if grid {
        targets.extend(map_pixels(&r, ctx.cfg.xai.stride)?);
    }
    targets.retain(|&(row, col)| !r.is_nodata(row, col));
    targets.sort_unstable();
    targets.dedup();
    if targets.is_empty() {
        return Err(CliError::Config("explain needs --pixel, --labels or --grid with at least one valid pixel".into()));
    }
    let clf = load_classifier(model, &r)?;
    let w = clf.window(r.bands());
    let (maps, attrs) = attribution_maps(&clf, &r, &targets, w, &ctx.cfg.xai)?;
    let dir = ctx.run_dir(&inputs)?;
    save_raster(&maps, &dir.file("attributions.mbr"))?;

    let plane = w * w;
    let names = r.band_names();
    let records: Vec<AttributionRecord> = targets
        .iter()
        .zip(&attrs)
        .map(|(&(row, col), a)| AttributionRecord {
            row,
            col,
            steps: a.steps,
            f_input: a.f_input,
            f_baseline: a.f_baseline,
            completeness_gap: a.completeness_gap,
            baseline_sha256: baseline_hash(&a.baseline),
            band_totals: names.iter().enumerate().map(|(b, n)| (n.clone(), a.band_total(b, plane))).collect(),
        })
        .collect();
    dir.write_json("attributions.json", &records)?;

    // Sum over bands: one signed map of where the evidence sits.
    let mut total = vec![f32::NAN; r.pixels()];
    for (&(row, col), a) in targets.iter().zip(&attrs) {
        total[row * r.cols() + col] = (0..r.bands()).map(|b| a.band_total(b, plane)).sum::<f64>() as f32;
    }
    render_png(&dir.file("attribution_total.png"), Style::SignedGreen, &[&total], r.rows(), r.cols(), PNG_SCALE)?;
    let png_dir = dir.subdir("pixels")?;
    for (&(row, col), a) in targets.iter().zip(&attrs).take(MAX_PIXEL_PNGS) {
        // Bands side by side, each a w x w tile.
        let bands = r.bands();
        let mut tile = vec![0f32; bands * plane];
        for b in 0..bands {
            for i in 0..w {
                for j in 0..w {
                    tile[i * bands * w + b * w + j] = a.scores[b * plane + i * w + j] as f32;
                }
            }
        }
        render(Style::SignedGreen, &[&tile], w, bands * w)?
            .scaled(2 * PNG_SCALE)
            .save(&png_dir.join(format!("r{row}_c{col}.png")))?;
    }
    let worst = attrs.iter().map(|a| a.completeness_gap).fold(0.0, f64::max);
    log::info!("{} pixels explained, worst completeness gap {worst:.3e}", attrs.len());
    Ok(dir.path)
}

/// Shared setup of the multi-seed subcommands.
struct Experiment {
    raster: MultiBandRaster,
    encoder: Option<Encoder<f32>>,
    records: Vec<prospectr::raster::DepositRecord>,
    inputs: Inputs,
}

impl Experiment {
    fn load(raster: &Path, deposits: &Path, encoder: Option<&Path>, methods: &[Method]) -> CliResult<Self> {
        if encoder.is_none() && methods.contains(&Method::Ssl) {
            return Err(CliError::Config("method ssl needs a pretrained encoder (--encoder)".into()));
        }
        let mut inputs = Inputs::default();
        inputs.add("raster", raster)?;
        inputs.add("deposits", deposits)?;
        hash_encoder(&mut inputs, encoder)?;
        Ok(Self {
            raster: load_raster(raster)?,
            encoder: load_encoder(encoder)?,
            records: read_records(deposits)?,
            inputs,
        })
    }
}

fn save_trial(seed_dir: &Path, method: Method, scene: &Scene, ds: &Dataset, history: &prospectr::clf::ClfHistory, scores: &[f64]) -> CliResult<()> {
    write_scores(&seed_dir.join(format!("{}_test_scores.csv", method.name())), scene, &ds.split.test, scores)?;
    write_history(&seed_dir.join(format!("{}_history.csv", method.name())), history)
}

fn evaluate(ctx: &Ctx, raster: &Path, deposits: &Path, encoder: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let ex = Experiment::load(raster, deposits, encoder, &cfg.eval.methods)?;
    let scene = Scene::new(&ex.raster, cfg, ex.encoder.as_ref())?;
    let positives = scene.positives(&ex.records)?;
    let scale = scene.similarity(&positives)?;
    let dir = ctx.run_dir(&ex.inputs)?;
    let mut rows = BTreeMap::new();
    for &seed in &cfg.seeds {
        let ds = scene.dataset(&scale, &positives, cfg.pu.filter_range, seed)?;
        let seed_dir = dir.subdir(&format!("seed-{seed}"))?;
        crate::rundir::write_json(&seed_dir.join("split.json"), &ds)?;
        for (k, &method) in cfg.eval.methods.iter().enumerate() {
            let t = scene.trial(method, &ds, seed, None)?;
            save_trial(&seed_dir, method, &scene, &ds, &t.history, &t.scores)?;
            let entry = rows.entry(k).or_insert_with(|| (method.name().to_string(), Vec::new(), None));
            if entry.2.is_none() {
                entry.2 = Some(scene.complexity(&t.clf)?);
            }
            log::info!("seed {seed} {}: F1 {:.3}", method.name(), t.row.metrics.f1);
            entry.1.push(t.row);
        }
    }
    let report = EvalReport::new(summaries(rows)?, cfg.clf.threshold, cfg.eval.alpha);
    dir.write_text("report.json", &report.to_json()?)?;
    report.summary_csv(&dir.file("summary.csv"))?;
    report.seeds_csv(&dir.file("seeds.csv"))?;
    dir.write_text("report.md", &markdown(&[("evaluate".to_string(), report)]))?;
    Ok(dir.path)
}

fn ablate_sparsity(ctx: &Ctx, raster: &Path, deposits: &Path, encoder: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let methods = &cfg.eval.sparsity_methods;
    let frac = cfg.eval.drop_fraction;
    let ex = Experiment::load(raster, deposits, encoder, methods)?;
    let scene = Scene::new(&ex.raster, cfg, ex.encoder.as_ref())?;
    let positives = scene.positives(&ex.records)?;
    let scale = scene.similarity(&positives)?;
    let dir = ctx.run_dir(&ex.inputs)?;
    let mut clean = BTreeMap::new();
    let mut degraded = BTreeMap::new();
    for &seed in &cfg.seeds {
        let ds = scene.dataset(&scale, &positives, cfg.pu.filter_range, seed)?;
        let seed_dir = dir.subdir(&format!("seed-{seed}"))?;
        for (k, &method) in methods.iter().enumerate() {
            let t = scene.trial(method, &ds, seed, None)?;
            save_trial(&seed_dir, method, &scene, &ds, &t.history, &t.scores)?;
            let (row, scores) = scene.test_row(&t.clf, &ds, seed, Some(frac))?;
            write_scores(&seed_dir.join(format!("{}_degraded_scores.csv", method.name())), &scene, &ds.split.test, &scores)?;
            log::info!("seed {seed} {}: F1 {:.3} clean, {:.3} degraded", method.name(), t.row.metrics.f1, row.metrics.f1);
            let c = Some(scene.complexity(&t.clf)?);
            clean.entry(k).or_insert_with(|| (method.name().to_string(), Vec::new(), c)).1.push(t.row);
            degraded.entry(k).or_insert_with(|| (method.name().to_string(), Vec::new(), c)).1.push(row);
        }
    }
    let clean = EvalReport::new(summaries(clean)?, cfg.clf.threshold, cfg.eval.alpha);
    let degraded = EvalReport::new(summaries(degraded)?, cfg.clf.threshold, cfg.eval.alpha);
    write_report(&dir, "report_clean", &clean)?;
    write_report(&dir, "report_degraded", &degraded)?;

    let mut w = csv::Writer::from_path(dir.file("sparsity.csv"))?;
    let mut header = vec!["method".to_string(), "condition".into(), "drop_fraction".into()];
    header.extend(Metrics::NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (report, cond, f) in [(&clean, "clean", 0.0), (&degraded, "degraded", frac)] {
        for m in &report.methods {
            let mut row = vec![m.method.clone(), cond.to_string(), format!("{f}")];
            row.extend(m.mean.values().iter().zip(m.std.values()).map(|(&mu, sd)| fmt_pct(mu, sd)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    dir.write_text(
        "report.md",
        &markdown(&[("clean".to_string(), clean), (format!("{:.0}% of layers dropped", 100.0 * frac), degraded)]),
    )?;
    Ok(dir.path)
}

#[derive(Serialize)]
struct FilterRow {
    filter_range: f64,
    mean: Metrics,
    std: Metrics,
    mean_likelihood: f64,
    likelihood_std: f64,
    likelihood_per_seed: Vec<f64>,
}

fn ablate_filter_range(ctx: &Ctx, raster: &Path, deposits: &Path, encoder: Option<&Path>) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let method = if encoder.is_some() { Method::Ssl } else { Method::Ann };
    let ex = Experiment::load(raster, deposits, encoder, &[method])?;
    let scene = Scene::new(&ex.raster, cfg, ex.encoder.as_ref())?;
    let positives = scene.positives(&ex.records)?;
    let scale = scene.similarity(&positives)?;
    let r = &ex.raster;
    let pixels = map_pixels(r, cfg.eval.map_stride)?;
    // Frozen and raw backbones are not trained, so map features are shared by
    // every filter range and seed.
    let feats = scene.new_classifier(method, cfg.seeds[0])?.features(r, &pixels, cfg.raster.batch)?;
    let dir = ctx.run_dir(&ex.inputs)?;
    let mut rows = BTreeMap::new();
    let mut table = Vec::new();
    for (k, &f) in cfg.eval.filter_ranges.iter().enumerate() {
        let name = format!("filter {:.0}%", 100.0 * f);
        let mut likelihoods = Vec::new();
        for &seed in &cfg.seeds {
            let ds = scene.dataset(&scale, &positives, f, seed)?;
            let t = scene.trial(method, &ds, seed, None)?;
            let seed_dir = dir.subdir(&format!("filter{:.0}/seed-{seed}", 100.0 * f))?;
            save_trial(&seed_dir, method, &scene, &ds, &t.history, &t.scores)?;
            let map = map_from_features(&t.clf.mlp, &feats, &pixels, (r.rows(), r.cols()), cfg.clf.mc_passes, seed, cfg.raster.batch)?;
            let ml = mean_likelihood(&map);
            if seed == cfg.seeds[0] {
                save_map_pngs(&dir, &format!("map_filter{:.0}", 100.0 * f), &map)?;
            }
            log::info!("{name} seed {seed}: F1 {:.3}, mean likelihood {ml:.4}", t.row.metrics.f1);
            likelihoods.push(ml);
            let c = Some(scene.complexity(&t.clf)?);
            rows.entry(k).or_insert_with(|| (name.clone(), Vec::new(), c)).1.push(t.row);
        }
        let n = likelihoods.len() as f64;
        let mu = likelihoods.iter().sum::<f64>() / n;
        let sd = if likelihoods.len() > 1 {
            (likelihoods.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        table.push((f, mu, sd, likelihoods));
    }
    let report = EvalReport::new(summaries(rows)?, cfg.clf.threshold, cfg.eval.alpha);
    dir.write_text("report.json", &report.to_json()?)?;
    report.seeds_csv(&dir.file("seeds.csv"))?;

    let mut w = csv::Writer::from_path(dir.file("filter_range.csv"))?;
    let mut header = vec!["filter_range".to_string()];
    header.extend(Metrics::NAMES.iter().map(|s| s.to_string()));
    header.push("mean_likelihood".into());
    w.write_record(&header)?;
    let mut json_rows = Vec::new();
    for (m, (f, mu, sd, per_seed)) in report.methods.iter().zip(table) {
        let mut row = vec![format!("{:.0}%", 100.0 * f)];
        row.extend(m.mean.values().iter().zip(m.std.values()).map(|(&a, b)| fmt_pct(a, b)));
        row.push(format!("{mu:.4} ± {sd:.4}"));
        w.write_record(&row)?;
        json_rows.push(FilterRow {
            filter_range: f,
            mean: m.mean,
            std: m.std,
            mean_likelihood: mu,
            likelihood_std: sd,
            likelihood_per_seed: per_seed,
        });
    }
    w.flush()?;
    dir.write_json("filter_range.json", &json_rows)?;
    Ok(dir.path)
}

/// Markdown results tables with significance notes.
pub fn markdown(reports: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    for (title, r) in reports {
        let _ = writeln!(s, "## {title}\n");
        let _ = writeln!(s, "| Method | {} | Params | FLOPs |", Metrics::NAMES.join(" | "));
        let _ = writeln!(s, "|---|{}---|---|", "---|".repeat(Metrics::NAMES.len()));
        for m in &r.methods {
            let cells: Vec<String> = m.mean.values().iter().zip(m.std.values()).map(|(&a, b)| fmt_pct(a, b)).collect();
            let (p, f) = m.complexity.map(|c| (c.params.to_string(), c.flops.to_string())).unwrap_or_default();
            let _ = writeln!(s, "| {} | {} | {p} | {f} |", m.method, cells.join(" | "));
        }
        let _ = writeln!(s, "\n{IMBALANCE_CAVEAT}. Threshold {}, {} seeds.\n", r.threshold, r.methods.first().map_or(0, |m| m.rows.len()));
        for (metric, sig) in &r.significance {
            match (&sig.anova, &sig.note) {
                (Some(a), _) => {
                    let pairs: Vec<String> = sig
                        .tukey
                        .iter()
                        .filter(|p| p.significant)
                        .map(|p| format!("{} vs {} ({:+.1})", p.a, p.b, 100.0 * p.diff))
                        .collect();
                    let _ = writeln!(
                        s,
                        "- {metric}: F({}, {}) = {:.2}, p = {:.2e}; significant pairs at α = {}: {}",
                        a.df_between,
                        a.df_within,
                        a.f,
                        a.p,
                        r.alpha,
                        if pairs.is_empty() { "none".to_string() } else { pairs.join(", ") }
                    );
                }
                (None, Some(note)) => {
                    let _ = writeln!(s, "- {metric}: {note}");
                }
                (None, None) => {}
            }
        }
        s.push('\n');
    }
    s
}

fn report(ctx: &Ctx, paths: &[PathBuf]) -> CliResult<PathBuf> {
    let mut inputs = Inputs::default();
    let mut reports = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        inputs.add(&format!("report{i}"), p)?;
        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let r = EvalReport::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let title = p
            .parent()
            .and_then(|d| d.file_name())
            .map(|d| format!("{} / {}", d.to_string_lossy(), p.file_name().unwrap_or_default().to_string_lossy()))
            .unwrap_or_else(|| p.display().to_string());
        reports.push((title, r));
    }
    let dir = ctx.run_dir(&inputs)?;
    for (i, (_, r)) in reports.iter().enumerate() {
        r.summary_csv(&dir.file(&format!("report{i}_summary.csv")))?;
        r.seeds_csv(&dir.file(&format!("report{i}_seeds.csv")))?;
    }
    dir.write_text("report.md", &markdown(&reports))?;
    Ok(dir.path)
}
