//! Experiment building blocks shared by the subcommands: positive and
//! unknown pixels, similarity scale, per-seed datasets, model training and
//! MC-dropout scoring.

use std::collections::HashSet;

use prospectr::clf::{mc_predict, pixel_stream, Backbone, Classifier, ClfHistory, Inputs};
use prospectr::mae::features_at;
use prospectr::metrics::{score_metrics, SeedRow};
use prospectr::nn::{Complexity, Encoder, VitConfig};
use prospectr::pu::{balance_oversample, select_negatives, similarity_scale, split_80_10_10, SimilarityScale, Split};
use prospectr::raster::{DepositRecord, Label, LabelRaster, MultiBandRaster};
use prospectr::synth::degrade_features;
use prospectr::{RngStream, Tensor};
use serde::Serialize;

use crate::config::{Method, RunConfig, SimilarityFeatures};
use crate::error::{CliError, CliResult};

/// A preprocessed raster plus everything derived from the run config.
/// Sample ids are row-major pixel indices.
pub struct Scene<'a> {
    pub raster: &'a MultiBandRaster,
    pub cfg: &'a RunConfig,
    pub encoder: Option<&'a Encoder<f32>>,
    pub centers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    pub filter_range: f64,
    pub negatives: Vec<usize>,
    pub split: Split,
    /// Training split after optional oversampling.
    pub train: Vec<(usize, bool)>,
}

/// One trained model scored on the test split.
pub struct Trial {
    pub clf: Classifier<f32>,
    pub history: ClfHistory,
    pub row: SeedRow,
    pub scores: Vec<f64>,
}

impl<'a> Scene<'a> {
    pub fn new(raster: &'a MultiBandRaster, cfg: &'a RunConfig, encoder: Option<&'a Encoder<f32>>) -> CliResult<Self> {
        if let Some(enc) = encoder {
            if enc.cfg.bands != raster.bands() || enc.cfg.window > raster.rows().min(raster.cols()) {
                return Err(CliError::Data(format!(
                    "encoder expects {} bands and {}px windows, raster has {} bands on a {}x{} grid",
                    enc.cfg.bands,
                    enc.cfg.window,
                    raster.bands(),
                    raster.rows(),
                    raster.cols()
                )));
            }
        }
        let cols = raster.cols();
        let centers = (0..raster.pixels()).map(|i| (i / cols, i % cols)).collect();
        Ok(Self {
            raster,
            cfg,
            encoder,
            centers,
        })
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        row * self.raster.cols() + col
    }

    fn valid(&self, id: usize) -> bool {
        let (r, c) = self.centers[id];
        !self.raster.is_nodata(r, c)
    }

    /// Pixels holding at least one deposit record.
    pub fn positives(&self, records: &[DepositRecord]) -> CliResult<Vec<usize>> {
        let burned = self.raster.rasterize(records)?;
        self.positives_in(&burned.labels)
    }

    pub fn positives_in(&self, labels: &LabelRaster) -> CliResult<Vec<usize>> {
        Ok(self.labeled_in(labels)?.into_iter().filter(|l| l.1).map(|l| l.0).collect())
    }

    /// Present and Absent pixels as `(id, is_present)`, nodata skipped.
    pub fn labeled_in(&self, labels: &LabelRaster) -> CliResult<Vec<(usize, bool)>> {
        if labels.rows() != self.raster.rows() || labels.cols() != self.raster.cols() {
            return Err(CliError::Data("label raster does not match the feature grid".into()));
        }
        Ok(labels
            .labels()
            .iter()
            .enumerate()
            .filter(|&(i, _)| self.valid(i))
            .filter_map(|(i, l)| match l {
                Label::Present => Some((i, true)),
                Label::Absent => Some((i, false)),
                Label::Unknown => None,
            })
            .collect())
    }

    pub fn unknowns(&self, positives: &[usize]) -> Vec<usize> {
        let pos: HashSet<usize> = positives.iter().copied().collect();
        (0..self.centers.len()).filter(|&i| self.valid(i) && !pos.contains(&i)).collect()
    }

    fn uses_encoder(&self) -> CliResult<bool> {
        match (self.cfg.pu.features, self.encoder) {
            (SimilarityFeatures::Raw, _) => Ok(false),
            (SimilarityFeatures::Auto, enc) => Ok(enc.is_some()),
            (SimilarityFeatures::Encoder, Some(_)) => Ok(true),
            (SimilarityFeatures::Encoder, None) => Err(CliError::Config("pu.features = encoder needs --encoder".into())),
        }
    }

    /// Similarity features of `ids`, row-major with their width.
    pub fn similarity_features(&self, ids: &[usize]) -> CliResult<(Vec<f64>, usize)> {
        let centers: Vec<_> = ids.iter().map(|&i| self.centers[i]).collect();
        if self.uses_encoder()? {
            let enc = self.encoder.expect("checked by uses_encoder");
            let f = features_at(enc, self.raster, &centers, self.cfg.raster.batch)?;
            Ok((f.data().iter().map(|&v| v as f64).collect(), enc.cfg.dim))
        } else {
            let w = self.cfg.raster.raw_window;
            let x: Tensor<f64> = self.raster.windows(&centers, w)?;
            Ok((x.data().to_vec(), self.raster.bands() * w * w))
        }
    }

    pub fn similarity(&self, positives: &[usize]) -> CliResult<SimilarityScale> {
        if positives.is_empty() {
            return Err(CliError::Data("no deposit falls on a valid pixel".into()));
        }
        let unknown = self.unknowns(positives);
        let (u, dim) = self.similarity_features(&unknown)?;
        let (p, _) = self.similarity_features(positives)?;
        Ok(similarity_scale(&unknown, &u, &p, dim, self.cfg.pu.metric)?)
    }

    /// Negatives drawn at `filter_range`, the stratified split, and the
    /// (optionally oversampled) training multiset for `seed`.
    pub fn dataset(&self, scale: &SimilarityScale, positives: &[usize], filter_range: f64, seed: u64) -> CliResult<Dataset> {
        let mut sampling = self.cfg.pu.sampling();
        sampling.filter_range = filter_range;
        let root = RngStream::from_seed(seed);
        let negatives = select_negatives(scale, &sampling, positives.len(), &mut root.derive("negatives"))?;
        let items: Vec<(usize, bool)> = positives
            .iter()
            .map(|&i| (i, true))
            .chain(negatives.iter().map(|&i| (i, false)))
            .collect();
        self.dataset_from(items, filter_range, negatives, seed)
    }

    /// Split and oversampling of already labeled `items`.
    pub fn dataset_from(&self, items: Vec<(usize, bool)>, filter_range: f64, negatives: Vec<usize>, seed: u64) -> CliResult<Dataset> {
        let split = split_80_10_10(&items, seed)?;
        let train = if self.cfg.pu.oversample {
            let pos: Vec<usize> = split.train.iter().filter(|t| t.1).map(|t| t.0).collect();
            let neg: Vec<usize> = split.train.iter().filter(|t| !t.1).map(|t| t.0).collect();
            balance_oversample(&pos, &neg, &mut RngStream::from_seed(seed).derive("oversample"))?.labeled()
        } else {
            split.train.clone()
        };
        Ok(Dataset {
            filter_range,
            negatives,
            split,
            train,
        })
    }

    pub fn new_classifier(&self, method: Method, seed: u64) -> CliResult<Classifier<f32>> {
        let mut rng = RngStream::from_seed(seed).derive(method.name());
        let clf = &self.cfg.clf;
        let model = match method {
            Method::Ssl => {
                let enc = self
                    .encoder
                    .ok_or_else(|| CliError::Config("method ssl needs a pretrained encoder (--encoder)".into()))?;
                Classifier::new(Backbone::Frozen, Some(enc.clone()), 0, clf, &mut rng)?
            }
            Method::Vit => {
                let cfg = VitConfig {
                    bands: self.raster.bands(),
                    ..self.cfg.mae.encoder.clone()
                };
                let enc = Encoder::new(cfg, &mut rng.derive("encoder"))?;
                Classifier::new(Backbone::EndToEnd, Some(enc), 0, clf, &mut rng)?
            }
            Method::Ann => {
                let w = self.cfg.raster.raw_window;
                Classifier::new(Backbone::Raw, None, self.raster.bands() * w * w, clf, &mut rng)?
            }
        };
        Ok(model)
    }

    pub fn train(&self, method: Method, ds: &Dataset, seed: u64) -> CliResult<(Classifier<f32>, ClfHistory)> {
        let mut clf = self.new_classifier(method, seed)?;
        let inputs = Inputs::Windows {
            raster: self.raster,
            centers: &self.centers,
        };
        let history = clf.train(&inputs, &ds.train, &ds.split.val, &self.cfg.clf, seed)?;
        log::info!(
            "{} seed {seed}: {} epochs, best epoch {} (val F1 {:.3})",
            method.name(),
            history.epochs.len(),
            history.best_epoch,
            history.best_val_f1
        );
        Ok((clf, history))
    }

    /// MC-dropout mean likelihood of each id. With `drop`, that fraction of
    /// layers is zeroed per sample first; the masks depend only on `seed`
    /// and the id order, so every model sees the same degraded inputs.
    pub fn scores(&self, clf: &Classifier<f32>, ids: &[usize], seed: u64, drop: Option<f64>) -> CliResult<Vec<f64>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let centers: Vec<_> = ids.iter().map(|&i| self.centers[i]).collect();
        let mut x: Tensor<f32> = self.raster.windows(&centers, clf.window(self.raster.bands()))?;
        if let Some(f) = drop {
            degrade_features(&mut x, f, &mut RngStream::from_seed(seed).derive("sparsity"))?;
        }
        let feats = clf.window_features(&x, self.cfg.raster.batch)?;
        let mut rngs: Vec<RngStream> = ids.iter().map(|&i| pixel_stream(seed, i)).collect();
        let (mean, _) = mc_predict(&clf.mlp, &feats, self.cfg.clf.mc_passes, &mut rngs)?;
        Ok(mean)
    }

    /// Test-split metrics of `clf`.
    pub fn test_row(&self, clf: &Classifier<f32>, ds: &Dataset, seed: u64, drop: Option<f64>) -> CliResult<(SeedRow, Vec<f64>)> {
        let ids: Vec<usize> = ds.split.test.iter().map(|t| t.0).collect();
        let labels: Vec<bool> = ds.split.test.iter().map(|t| t.1).collect();
        let scores = self.scores(clf, &ids, seed, drop)?;
        let (metrics, counts) = score_metrics(&scores, &labels, self.cfg.clf.threshold)?;
        Ok((SeedRow { seed, metrics, counts }, scores))
    }

    pub fn trial(&self, method: Method, ds: &Dataset, seed: u64, drop: Option<f64>) -> CliResult<Trial> {
        let (clf, history) = self.train(method, ds, seed)?;
        let (row, scores) = self.test_row(&clf, ds, seed, drop)?;
        Ok(Trial {
            clf,
            history,
            row,
            scores,
        })
    }

    pub fn complexity(&self, clf: &Classifier<f32>) -> CliResult<Complexity> {
        Ok(clf.complexity(self.raster.bands(), clf.window(self.raster.bands()))?)
    }
}

/// `sample_id,row,col,label,score` rows.
pub fn write_scores(path: &std::path::Path, scene: &Scene, items: &[(usize, bool)], scores: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "row", "col", "label", "score"])?;
    for (&(id, y), s) in items.iter().zip(scores) {
        let (r, c) = scene.centers[id];
        w.write_record([id.to_string(), r.to_string(), c.to_string(), (y as u8).to_string(), format!("{s:.17}")])?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,train_loss,val_f1,val_loss` rows.
pub fn write_history(path: &std::path::Path, history: &ClfHistory) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_f1", "val_loss"])?;
    for e in &history.epochs {
        w.write_record([e.epoch.to_string(), format!("{:.17}", e.train_loss), format!("{:.17}", e.val_f1), format!("{:.17}", e.val_loss)])?;
    }
    w.flush()?;
    Ok(())
}
