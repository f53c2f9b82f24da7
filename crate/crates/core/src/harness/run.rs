//! End-to-end pipeline for one experiment: per seed, train every stage,
//! persist the fitted models, then score them on both splits.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.toml
//! seed_<s>/training_groups.txt     group ids whose faces were used for fitting
//! seed_<s>/ensemble/                member_<k>.ckpt + ensemble_order.txt
//! seed_<s>/n<k>/                    aggregator.ckpt, face_svr.ckpt, group_<gem>.ckpt
//! seed_<s>/resnet_all/              extractor.ckpt + n1/ as above
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::table::{Metric, Pipeline, ResultRow, ResultTable, MODEL_FACE, MODEL_VOTE};
use crate::aggregator::{train_aggregator, Lstm, LstmConfig};
use crate::dataset::{balance_subset, read_manifest, synth_generate, DatasetManifest, FaceSample, Split};
use crate::error::{Error, Result};
use crate::extractor::{batched_infer, train_ensemble, train_extractor, vote_from_logits, Ensemble, TrainedExtractor};
use crate::gem::{FaceRecord, GemKind};
use crate::nn::Checkpoint;
use crate::rng::derive_seed;
use crate::svr::{fit, grid_search_cv, rmse, SvrConfig, SvrModel};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAINING_GROUPS_FILE: &str = "training_groups.txt";

const BALANCE_STREAM: u64 = 11;
const ENSEMBLE_STREAM: u64 = 12;
const BASELINE_STREAM: u64 = 13;
const AGGREGATOR_STREAM: u64 = 100;

/// Progress callback; receives one human-readable line per finished stage.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Both splits of the experiment's data.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, validation) = match (&cfg.data.train_manifest, &cfg.data.validation_manifest) {
            (Some(t), Some(v)) => (read_manifest(t)?, read_manifest(v)?),
            _ => (
                synth_generate(&cfg.data.train, Split::Train)?,
                synth_generate(&cfg.data.validation, Split::Validation)?,
            ),
        };
        if train.split != Split::Train || validation.split != Split::Validation {
            return Err(Error::Config("manifests are not a train and a validation split".into()));
        }
        let train_ids: BTreeSet<&str> = train.groups.iter().map(|g| g.group_id.as_str()).collect();
        if let Some(g) = validation.groups.iter().find(|g| train_ids.contains(g.group_id.as_str())) {
            return Err(Error::Config(format!("group {} appears in both splits", g.group_id)));
        }
        Ok(ExperimentData { train, validation })
    }

    fn train_faces(&self) -> Vec<&FaceSample> {
        self.train.faces().collect()
    }

    fn validation_faces(&self) -> Vec<&FaceSample> {
        self.validation.faces().collect()
    }
}

/// Per-face network outputs on the fitting set and on both full splits.
struct Outputs {
    fit: (Vec<Vec<f64>>, Vec<Vec<f64>>),
    train: (Vec<Vec<f64>>, Vec<Vec<f64>>),
    validation: (Vec<Vec<f64>>, Vec<Vec<f64>>),
}

/// Faces of one pipeline's fitting set plus references into the splits.
struct Faces<'a> {
    fit: Vec<&'a FaceSample>,
    data: &'a ExperimentData,
}

impl Faces<'_> {
    fn infer(&self, model: &TrainedExtractor) -> Result<Outputs> {
        Ok(Outputs {
            fit: batched_infer(model, &self.fit)?,
            train: batched_infer(model, &self.data.train_faces())?,
            validation: batched_infer(model, &self.data.validation_faces())?,
        })
    }

    fn fit_labels(&self) -> Vec<f64> {
        self.fit.iter().map(|f| f.label as f64).collect()
    }
}

/// Fitted models for one ensemble size.
struct SizeModels {
    lstm: Lstm,
    face: SvrModel,
    groups: Vec<(GemKind, std::result::Result<SvrModel, String>)>,
}

fn size_dir(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("n{n}"))
}

fn group_file(gem: GemKind) -> String {
    format!("group_{gem}.ckpt")
}

impl SizeModels {
    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lstm.save(dir.join("aggregator.ckpt"))?;
        self.face.save(dir.join("face_svr.ckpt"))?;
        for (gem, model) in &self.groups {
            if let Ok(m) = model {
                m.save(dir.join(group_file(*gem)))?;
            }
        }
        Ok(())
    }

    fn load(dir: &Path, gems: &[GemKind]) -> Result<Self> {
        Ok(SizeModels {
            lstm: Lstm::load(dir.join("aggregator.ckpt"))?,
            face: SvrModel::load(dir.join("face_svr.ckpt"))?,
            groups: gems
                .iter()
                .map(|&g| (g, SvrModel::load(dir.join(group_file(g))).map_err(|e| e.to_string())))
                .collect(),
        })
    }
}

/// Member-`t` feature rows stacked as scan steps, fused by the LSTM.
fn fuse(lstm: &Lstm, members: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
    let rows = members.first().map_or(0, |m| m.len());
    if rows == 0 {
        return Ok(Vec::new());
    }
    let steps: Vec<Tensor> =
        members.iter().map(|m| Tensor::new(vec![rows, m[0].len()], m.concat())).collect::<Result<_>>()?;
    let h = lstm.forward(&steps)?;
    Ok((0..rows).map(|i| h.row(i).to_vec()).collect())
}

fn fit_svr(x: &[Vec<f64>], y: &[f64], base: &SvrConfig, cfg: &ExperimentConfig) -> Result<SvrModel> {
    match &cfg.svr.grid_search {
        Some(spec) => {
            let (best, _) = grid_search_cv(x, y, spec, base)?;
            fit(x, y, &best)
        }
        None => fit(x, y, base),
    }
}

fn group_inputs(
    manifest: &DatasetManifest,
    estimates: &[f64],
    features: &[Vec<f64>],
    gem: GemKind,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::with_capacity(manifest.groups.len());
    let mut y = Vec::with_capacity(manifest.groups.len());
    let mut offset = 0;
    for g in &manifest.groups {
        let records = g
            .faces
            .iter()
            .enumerate()
            .map(|(j, f)| {
                FaceRecord::new(estimates[offset + j], features[offset + j].clone(), f.bbox_area_px(), f.centroid())
            })
            .collect::<Result<Vec<_>>>()?;
        offset += g.faces.len();
        x.push(gem.group_input(&records)?);
        y.push(g.group_label as f64);
    }
    Ok((x, y))
}

fn labels_of(faces: &[&FaceSample]) -> Vec<f64> {
    faces.iter().map(|f| f.label as f64).collect()
}

fn member_features<'o>(
    outputs: &'o [Outputs],
    n: usize,
    pick: impl Fn(&'o Outputs) -> &'o [Vec<f64>],
) -> Vec<&'o [Vec<f64>]> {
    outputs[..n].iter().map(pick).collect()
}

/// Trains aggregator, face regressor and one group regressor per model for
/// the first `n` members.
fn fit_size(
    cfg: &ExperimentConfig,
    faces: &Faces,
    outputs: &[Outputs],
    n: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<SizeModels> {
    let fit_feats = member_features(outputs, n, |o| &o.fit.1);
    let sequences: Vec<Vec<Vec<f64>>> =
        (0..faces.fit.len()).map(|i| fit_feats.iter().map(|m| m[i].clone()).collect()).collect();
    let lstm_cfg = LstmConfig {
        input_dim: cfg.extractor.net.feature_dim,
        hidden_dim,
        num_layers: cfg.aggregator.num_layers,
        sequence_len: n,
    };
    let labels = faces.fit_labels();
    let trained = train_aggregator(&sequences, &labels, &lstm_cfg, &cfg.aggregator.sgd, seed)?;
    let lstm = trained.lstm;
    let face = fit_svr(&fuse(&lstm, &fit_feats)?, &labels, &cfg.svr.face, cfg)?;
    let train_fused = fuse(&lstm, &member_features(outputs, n, |o| &o.train.1))?;
    let estimates = face.predict(&train_fused)?;
    let groups = cfg
        .experiment
        .gems
        .iter()
        .map(|&gem| {
            let model = group_inputs(&faces.data.train, &estimates, &train_fused, gem)
                .and_then(|(x, y)| fit_svr(&x, &y, &cfg.svr.group, cfg))
                .map_err(|e| e.to_string());
            (gem, model)
        })
        .collect();
    Ok(SizeModels { lstm, face, groups })
}

struct RowSink<'a> {
    seed: u64,
    pipeline: Pipeline,
    n: usize,
    rows: &'a mut Vec<ResultRow>,
}

impl RowSink<'_> {
    fn push(&mut self, model: &str, split: Split, metric: Metric, value: std::result::Result<f64, String>) {
        let (value, error) = match value {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        self.rows.push(ResultRow {
            seed: self.seed,
            pipeline: self.pipeline,
            ensemble_size: self.n,
            model: model.to_string(),
            split,
            metric,
            value,
            error,
        });
    }

    fn fail_models(&mut self, gems: &[GemKind], err: &str) {
        for split in [Split::Train, Split::Validation] {
            self.push(MODEL_FACE, split, Metric::Rmse, Err(err.to_string()));
            for gem in gems {
                self.push(gem.name(), split, Metric::Rmse, Err(err.to_string()));
            }
        }
    }

    fn fail_all(&mut self, gems: &[GemKind], err: &str) {
        for split in [Split::Train, Split::Validation] {
            self.push(MODEL_VOTE, split, Metric::Accuracy, Err(err.to_string()));
        }
        self.fail_models(gems, err);
    }
}

fn accuracy(pred: &[usize], faces: &[&FaceSample]) -> f64 {
    let hits = pred.iter().zip(faces).filter(|(p, f)| **p == f.label).count();
    hits as f64 / faces.len().max(1) as f64
}

fn score_votes(sink: &mut RowSink, faces: &Faces, outputs: &[Outputs]) {
    let n = sink.n;
    let val_faces = faces.data.validation_faces();
    for (split, logits, set) in [
        (Split::Train, outputs[..n].iter().map(|o| o.fit.0.clone()).collect::<Vec<_>>(), &faces.fit),
        (Split::Validation, outputs[..n].iter().map(|o| o.validation.0.clone()).collect(), &val_faces),
    ] {
        let acc = vote_from_logits(&logits).map(|p| accuracy(&p, set)).map_err(|e| e.to_string());
        sink.push(MODEL_VOTE, split, Metric::Accuracy, acc);
    }
}

fn score_size(
    sink: &mut RowSink,
    cfg: &ExperimentConfig,
    faces: &Faces,
    outputs: &[Outputs],
    models: &SizeModels,
) -> Result<()> {
    let n = sink.n;
    let data = faces.data;
    let fit_fused = fuse(&models.lstm, &member_features(outputs, n, |o| &o.fit.1))?;
    let train_fused = fuse(&models.lstm, &member_features(outputs, n, |o| &o.train.1))?;
    let val_fused = fuse(&models.lstm, &member_features(outputs, n, |o| &o.validation.1))?;
    let fit_rmse = rmse(&models.face.predict(&fit_fused)?, &faces.fit_labels())?;
    let val_est = models.face.predict(&val_fused)?;
    let val_rmse = rmse(&val_est, &labels_of(&data.validation_faces()))?;
    sink.push(MODEL_FACE, Split::Train, Metric::Rmse, Ok(fit_rmse));
    sink.push(MODEL_FACE, Split::Validation, Metric::Rmse, Ok(val_rmse));
    let train_est = models.face.predict(&train_fused)?;
    for &gem in &cfg.experiment.gems {
        let model = models.groups.iter().find(|(g, _)| *g == gem).map(|(_, m)| m);
        for (split, manifest, est, fused) in [
            (Split::Train, &data.train, &train_est, &train_fused),
            (Split::Validation, &data.validation, &val_est, &val_fused),
        ] {
            let value = match model {
                Some(Ok(m)) => group_inputs(manifest, est, fused, gem)
                    .and_then(|(x, y)| rmse(&m.predict(&x)?, &y))
                    .map_err(|e| e.to_string()),
                Some(Err(e)) => Err(e.clone()),
                None => Err("no group model".to_string()),
            };
            sink.push(gem.name(), split, Metric::Rmse, value);
        }
    }
    Ok(())
}

/// Whether models are fitted now or read back from an earlier run.
#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Train,
    Evaluate,
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.experiment.out_dir.join(format!("seed_{seed}"))
}

fn write_training_groups(dir: &Path, faces: &[&FaceSample], data: &ExperimentData) -> Result<()> {
    let mut ids: BTreeSet<&str> = faces.iter().map(|f| f.group_id.as_str()).collect();
    ids.extend(data.train.groups.iter().map(|g| g.group_id.as_str()));
    let body: String = ids.into_iter().map(|id| format!("{id}\n")).collect();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TRAINING_GROUPS_FILE);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Rows for every ensemble size of one pipeline given member outputs.
fn sizes_stage(
    cfg: &ExperimentConfig,
    mode: Mode,
    pipeline: Pipeline,
    seed: u64,
    faces: &Faces,
    outputs: &[Outputs],
    sizes: &[usize],
    dir: &Path,
    rows: &mut Vec<ResultRow>,
    progress: Option<Progress>,
) {
    let gems = &cfg.experiment.gems;
    let hidden = match pipeline {
        Pipeline::Rrde => cfg.aggregator.hidden_dim,
        Pipeline::ResnetAll => cfg.baseline.hidden_dim,
    };
    for &n in sizes {
        let mut sink = RowSink { seed, pipeline, n, rows };
        score_votes(&mut sink, faces, outputs);
        let sdir = size_dir(dir, n);
        let models = match mode {
            Mode::Train => fit_size(cfg, faces, outputs, n, hidden, derive_seed(seed, AGGREGATOR_STREAM + n as u64))
                .and_then(|m| m.save(&sdir).map(|_| m)),
            Mode::Evaluate => SizeModels::load(&sdir, gems),
        };
        let result = models.and_then(|m| {
            let mut scratch = Vec::new();
            let mut inner = RowSink { seed, pipeline, n, rows: &mut scratch };
            score_size(&mut inner, cfg, faces, outputs, &m)?;
            Ok(scratch)
        });
        match result {
            Ok(scored) => sink.rows.extend(scored),
            Err(e) => sink.fail_models(gems, &e.to_string()),
        }
        if let Some(p) = progress {
            p(&format!("seed {seed}: {pipeline} n={n} done"));
        }
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    mode: Mode,
    progress: Option<Progress>,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let dir = seed_dir(cfg, seed);
    let gems = &cfg.experiment.gems;
    let sizes = &cfg.experiment.ensemble_sizes;
    if mode == Mode::Train {
        // Every fitting stage draws from the training split only.
        if let Err(e) = write_training_groups(&dir, &data.train_faces(), data) {
            fail_sizes(&mut rows, seed, Pipeline::Rrde, sizes, gems, &e);
            if cfg.baseline.enabled {
                fail_sizes(&mut rows, seed, Pipeline::ResnetAll, &[1], gems, &e);
            }
            return rows;
        }
    }

    let rrde = (|| -> Result<(Vec<FaceSample>, Ensemble)> {
        let all: Vec<FaceSample> = data.train.faces().cloned().collect();
        let balanced = balance_subset(&all, cfg.data.per_class, derive_seed(seed, BALANCE_STREAM))?;
        let ens_dir = dir.join("ensemble");
        let ensemble = match mode {
            Mode::Train => {
                let e = train_ensemble(
                    &balanced,
                    cfg.max_ensemble_size(),
                    derive_seed(seed, ENSEMBLE_STREAM),
                    &cfg.extractor,
                )?;
                e.save(&ens_dir)?;
                e
            }
            Mode::Evaluate => Ensemble::load(&ens_dir)?,
        };
        if ensemble.len() < cfg.max_ensemble_size() {
            return Err(Error::Config(format!(
                "ensemble has {} members, {} needed",
                ensemble.len(),
                cfg.max_ensemble_size()
            )));
        }
        Ok((balanced, ensemble))
    })();
    match rrde {
        Ok((balanced, ensemble)) => {
            if let Some(p) = progress {
                p(&format!("seed {seed}: ensemble of {} ready", ensemble.len()));
            }
            let faces = Faces { fit: balanced.iter().collect(), data };
            let outputs: Result<Vec<Outputs>> = ensemble.members.par_iter().map(|m| faces.infer(m)).collect();
            match outputs {
                Ok(outputs) => {
                    sizes_stage(cfg, mode, Pipeline::Rrde, seed, &faces, &outputs, sizes, &dir, &mut rows, progress)
                }
                Err(e) => fail_sizes(&mut rows, seed, Pipeline::Rrde, sizes, gems, &e),
            }
        }
        Err(e) => fail_sizes(&mut rows, seed, Pipeline::Rrde, sizes, gems, &e),
    }

    if cfg.baseline.enabled {
        let bdir = dir.join("resnet_all");
        let faces = Faces { fit: data.train_faces(), data };
        let net = (|| -> Result<TrainedExtractor> {
            let path = bdir.join("extractor.ckpt");
            match mode {
                Mode::Train => {
                    let owned: Vec<FaceSample> = faces.fit.iter().map(|f| (*f).clone()).collect();
                    let net = train_extractor(&owned, &cfg.baseline_extractor(), derive_seed(seed, BASELINE_STREAM))?;
                    fs::create_dir_all(&bdir).map_err(|e| Error::io(&bdir, e))?;
                    net.to_checkpoint().save(&path)?;
                    Ok(net)
                }
                Mode::Evaluate => TrainedExtractor::from_checkpoint(&Checkpoint::load(&path)?),
            }
        })();
        match net.and_then(|n| faces.infer(&n)) {
            Ok(out) => {
                sizes_stage(cfg, mode, Pipeline::ResnetAll, seed, &faces, &[out], &[1], &bdir, &mut rows, progress)
            }
            Err(e) => fail_sizes(&mut rows, seed, Pipeline::ResnetAll, &[1], gems, &e),
        }
    }
    rows
}

fn fail_sizes(
    rows: &mut Vec<ResultRow>,
    seed: u64,
    pipeline: Pipeline,
    sizes: &[usize],
    gems: &[GemKind],
    err: &Error,
) {
    for &n in sizes {
        RowSink { seed, pipeline, n, rows: &mut *rows }.fail_all(gems, &err.to_string());
    }
}

fn run_all(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    mode: Mode,
    progress: Option<Progress>,
) -> Result<ResultTable> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<ResultRow> = pool.install(|| {
        cfg.experiment.seeds.par_iter().map(|&s| run_seed(cfg, data, s, mode, progress)).collect::<Vec<_>>().concat()
    });
    ResultTable::new(rows)
}

/// Trains and scores every (seed, ensemble size, group model) cell, writing
/// checkpoints under `cfg.experiment.out_dir`. Stage failures become failed
/// rows; only configuration and I/O problems at the top level are errors.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    progress: Option<Progress>,
) -> Result<ResultTable> {
    let out = &cfg.experiment.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    run_all(cfg, data, Mode::Train, progress)
}

/// Recomputes the table from the checkpoints of an earlier run without training.
pub fn evaluate(cfg: &ExperimentConfig, data: &ExperimentData, progress: Option<Progress>) -> Result<ResultTable> {
    run_all(cfg, data, Mode::Evaluate, progress)
}

/// Confirms that no validation group was used for fitting in any seed of a run.
pub fn audit_split_isolation(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<()> {
    let val: BTreeSet<&str> = data.validation.groups.iter().map(|g| g.group_id.as_str()).collect();
    let train: BTreeSet<&str> = data.train.groups.iter().map(|g| g.group_id.as_str()).collect();
    for &seed in &cfg.experiment.seeds {
        let path = seed_dir(cfg, seed).join(TRAINING_GROUPS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for id in text.lines().filter(|l| !l.is_empty()) {
            if val.contains(id) || !train.contains(id) {
                return Err(Error::Format(format!("seed {seed}: group {id} used for fitting is not a training group")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SynthSpec;
    use crate::harness::config::ExperimentConfig;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.experiment.seeds = vec![0, 1];
        cfg.experiment.ensemble_sizes = vec![1, 2];
        cfg.experiment.out_dir = out.to_path_buf();
        cfg.data.per_class = 3;
        cfg.data.train = SynthSpec { n_groups: 14, image_size: 12, seed: 5, ..SynthSpec::default() };
        cfg.data.validation = SynthSpec { n_groups: 5, image_size: 12, seed: 6, ..SynthSpec::default() };
        cfg.extractor.net.widths = [2, 2, 4];
        cfg.extractor.net.feature_dim = 4;
        cfg.extractor.sgd.total_iters = 3;
        cfg.extractor.sgd.initial_lr = 0.05;
        cfg.aggregator.hidden_dim = 6;
        cfg.aggregator.sgd.total_iters = 5;
        cfg.baseline.total_iters = 3;
        cfg.baseline.hidden_dim = 3;
        cfg
    }

    fn expected_rows(cfg: &ExperimentConfig) -> usize {
        let per_size = 2 * (2 + cfg.experiment.gems.len());
        cfg.experiment.seeds.len() * per_size * (cfg.experiment.ensemble_sizes.len() + 1)
    }

    #[test]
    fn row_per_requested_cell_and_evaluate_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let data = ExperimentData::load(&cfg).unwrap();
        let table = run_experiment(&cfg, &data, None).unwrap();
        assert_eq!(table.rows.len(), expected_rows(&cfg));
        assert_eq!(table.failed().count(), 0, "{:?}", table.failed().next());
        for n in [1, 2] {
            for gem in GemKind::ALL {
                assert_eq!(table.values(Pipeline::Rrde, n, gem.name(), Split::Validation, Metric::Rmse).len(), 2);
            }
        }
        let again = evaluate(&cfg, &data, None).unwrap();
        assert_eq!(again.to_csv(), table.to_csv());
        audit_split_isolation(&cfg, &data).unwrap();
    }

    #[test]
    fn stage_failures_become_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.experiment.seeds = vec![0];
        // far more faces per class than exist: balancing fails, baseline still runs
        cfg.data.per_class = 1000;
        let data = ExperimentData::load(&cfg).unwrap();
        let table = run_experiment(&cfg, &data, None).unwrap();
        assert_eq!(table.rows.len(), expected_rows(&cfg));
        assert!(table.rows.iter().filter(|r| r.pipeline == Pipeline::Rrde).all(|r| !r.ok()));
        assert!(table.rows.iter().filter(|r| r.pipeline == Pipeline::ResnetAll).all(|r| r.ok()));
    }

    #[test]
    fn evaluate_without_checkpoints_fails_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.experiment.seeds = vec![0];
        let data = ExperimentData::load(&cfg).unwrap();
        let table = evaluate(&cfg, &data, None).unwrap();
        assert!(table.rows.iter().all(|r| !r.ok()));
    }

    #[test]
    fn audit_flags_validation_groups() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.experiment.seeds = vec![0];
        let data = ExperimentData::load(&cfg).unwrap();
        let sdir = seed_dir(&cfg, 0);
        fs::create_dir_all(&sdir).unwrap();
        let leaked = &data.validation.groups[0].group_id;
        fs::write(sdir.join(TRAINING_GROUPS_FILE), format!("{leaked}\n")).unwrap();
        assert!(audit_split_isolation(&cfg, &data).is_err());
        fs::write(sdir.join(TRAINING_GROUPS_FILE), format!("{}\n", data.train.groups[0].group_id)).unwrap();
        audit_split_isolation(&cfg, &data).unwrap();
    }

    #[test]
    fn fuse_matches_single_scans() {
        let lstm = Lstm::new(&LstmConfig { input_dim: 3, hidden_dim: 4, num_layers: 2, sequence_len: 2 }, 1).unwrap();
        let a = vec![vec![0.1, -0.2, 0.3], vec![1.0, 0.5, -0.5]];
        let b = vec![vec![0.7, 0.0, -0.1], vec![-0.3, 0.2, 0.9]];
        let fused = fuse(&lstm, &[&a, &b]).unwrap();
        for i in 0..2 {
            let single = lstm.scan(&[a[i].clone(), b[i].clone()]).unwrap();
            for (x, y) in fused[i].iter().zip(&single) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
