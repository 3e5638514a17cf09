//! The three training stages, their checkpoints and the run log.
//!
//! A [`Run`] owns an output directory. Every stage reads its inputs from
//! files written by earlier stages, so each one can be rerun or resumed on
//! its own:
//!
//! ```text
//! resolved.cfg          full config snapshot
//! data/{train,val,test}.csv
//! stage1.ckpt           denoiser + class prototypes
//! synthetic.csv         generated windows
//! stage2.ckpt           classifier after synthetic pretraining
//! stage3.ckpt           fine-tuned classifier
//! log.csv               per-epoch rows of every stage
//! metrics.csv, radar.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use sha2::{Digest, Sha256};
use usad_autodiff::Container;

use crate::config::{DataSource, ModelKind, RunConfig};
use crate::data::{self, Dataset, Normalizer, Schema};
use crate::diffusion::{self, DenoiserNet, DiffusionTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::Evaluation;
use crate::net::{Classifier, PretrainNet, UsadNet};
use crate::rng;
use crate::stats::PrototypeTable;
use crate::train::{evaluate, train_classifier, ClassifierTrainConfig, EpochRecord, Objective};

/// A 64-bit seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    rng::stream(seed, purpose).next_u64()
}

/// Real splits plus the digest of the training split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub hash: String,
}

pub struct Stage1 {
    pub denoiser: DenoiserNet,
    pub proto: PrototypeTable,
    pub sched: NoiseSchedule,
    pub trace: Vec<f64>,
}

pub struct Outcome {
    pub model: Classifier,
    pub records: Vec<EpochRecord>,
    pub test: Evaluation,
}

/// One row of `log.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub epoch: Option<usize>,
    pub loss: f64,
    pub acc: f64,
    pub omega: [f64; 3],
    pub note: String,
    pub wall_ms: u64,
}

pub const LOG_COLUMNS: [&str; 9] = ["stage", "epoch", "loss", "acc", "w0", "w1", "w2", "note", "wall_ms"];

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

impl LogRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.stage.clone(),
            self.epoch.map_or(String::new(), |e| e.to_string()),
            fmt_opt(self.loss),
            fmt_opt(self.acc),
            fmt_opt(self.omega[0]),
            fmt_opt(self.omega[1]),
            fmt_opt(self.omega[2]),
            self.note.clone(),
            self.wall_ms.to_string(),
        ]
    }

    fn marker(stage: &str, note: &str) -> Self {
        Self {
            stage: stage.into(),
            epoch: None,
            loss: f64::NAN,
            acc: f64::NAN,
            omega: [f64::NAN; 3],
            note: note.into(),
            wall_ms: 0,
        }
    }
}

/// Append-only per-stage log. Rerunning a stage replaces that stage's rows.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    /// Raw rows, header excluded.
    pub fn read(&self) -> Result<Vec<Vec<String>>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(&self.path)?;
        r.records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect()
    }

    fn write_all(&self, rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(&self.path)?;
        w.write_record(LOG_COLUMNS)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn clear_stage(&self, stage: &str) -> Result<()> {
        let rows: Vec<_> = self.read()?.into_iter().filter(|r| r[0] != stage).collect();
        self.write_all(&rows)
    }

    pub fn append(&self, row: &LogRow) -> Result<()> {
        let mut rows = self.read()?;
        rows.push(row.fields());
        self.write_all(&rows)
    }

    /// SHA-256 of every row with the wall-time column dropped.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in self.read()? {
            h.update(r[..r.len() - 1].join(",").as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    seed: u64,
    log: RunLog,
}

impl Run {
    /// Validates the config, creates `dir` and writes `resolved.cfg`.
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        fs::create_dir_all(dir.join("data")).map_err(|e| Error::io(&dir, e))?;
        let snap = dir.join("resolved.cfg");
        fs::write(&snap, cfg.to_text()).map_err(|e| Error::io(&snap, e))?;
        let seed = cfg.seed()?;
        let log = RunLog::new(dir.join("log.csv"));
        Ok(Self { cfg, dir, seed, log })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }

    fn load_source(&self) -> Result<Dataset> {
        let cfg = &self.cfg;
        match cfg.data_source {
            DataSource::Toy => data::make_toy_dataset(&crate::data::ToySpec { seed: self.seed_for("toy"), ..cfg.toy.clone() }),
            DataSource::Windows => Dataset::read_csv(&cfg.data_path),
            DataSource::Csv => {
                let schema = if cfg.data_schema == "wisdm" {
                    Schema { sample_rate: cfg.data_sample_rate, ..Schema::wisdm() }
                } else {
                    let path = Path::new(&cfg.data_path);
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let header = text.lines().next().unwrap_or("");
                    let names: Vec<String> = header.split(',').skip(2).map(|s| s.trim().to_string()).collect();
                    Schema::exported(&names, cfg.data_sample_rate)
                };
                let rec = data::ingest_csv(&cfg.data_path, &schema)?;
                let mut windows = Vec::new();
                for part in rec.split_by_subject() {
                    if part.len() >= cfg.window.len {
                        windows.extend(data::window(&part, &cfg.window)?);
                    }
                }
                Dataset::from_windows(windows, rec.channels.len(), None)
            }
        }
    }

    /// Builds, splits and normalises the real data and writes the splits.
    pub fn prepare(&self) -> Result<Prepared> {
        let full = self.load_source()?;
        let s = data::split(&full, self.cfg.split_ratios, self.seed_for("split"), self.cfg.split_stratify)?;
        let (mut train, mut val, mut test) = (s.train, s.val, s.test);
        if self.cfg.normalize {
            let norm = Normalizer::fit(&train)?;
            for d in [&mut train, &mut val, &mut test] {
                norm.apply(d)?;
            }
        }
        for (name, d) in [("train", &train), ("val", &val), ("test", &test)] {
            d.write_csv(self.path(&format!("data/{name}.csv")))?;
        }
        let hash = train.content_hash();
        Ok(Prepared { train, val, test, hash })
    }

    pub fn load_prepared(&self) -> Result<Prepared> {
        let p = self.path("data/train.csv");
        if !p.exists() {
            return Err(Error::Data(format!("{} not found; run prepare first", p.display())));
        }
        let train = Dataset::read_csv(&p)?;
        let val = Dataset::read_csv(self.path("data/val.csv"))?;
        let test = Dataset::read_csv(self.path("data/test.csv"))?;
        let hash = train.content_hash();
        Ok(Prepared { train, val, test, hash })
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.cfg.diffusion_steps, self.cfg.diffusion_offset, self.cfg.diffusion_schedule)
    }

    fn stamp(&self, c: &mut Container, stage: &str, hash: &str) {
        c.push_text("meta/stage", stage);
        c.push_text("meta/config", &self.cfg.to_text());
        c.push_text("meta/data_hash", hash);
    }

    fn check_hash(&self, c: &Container, hash: &str) -> Result<()> {
        let stored = c.text("meta/data_hash").unwrap_or_default();
        if stored != hash && !self.cfg.force {
            return Err(Error::HashMismatch { expected: stored, found: hash.to_string() });
        }
        Ok(())
    }

    /// A checkpoint that can stand in for rerunning its stage.
    fn resumable(&self, name: &str, hash: &str) -> Option<Container> {
        if !self.cfg.resume {
            return None;
        }
        let c = Container::load(self.path(name)).ok()?;
        let same = c.text("meta/config").as_deref() == Some(&self.cfg.to_text()[..])
            && c.text("meta/data_hash").as_deref() == Some(hash);
        same.then_some(c)
    }

    pub fn train_diffusion(&self, prep: &Prepared) -> Result<Stage1> {
        let train = &prep.train;
        let sched = self.schedule()?;
        let dcfg = self.cfg.denoiser_config(train.channels, train.len, train.n_classes());
        if let Some(c) = self.resumable("stage1.ckpt", &prep.hash) {
            return self.stage1_from(&c, prep);
        }
        let mut denoiser = DenoiserNet::new(dcfg, &sched, self.seed_for("denoiser-init"))?;
        let tcfg = DiffusionTrainConfig {
            epochs: self.cfg.diffusion.epochs,
            lr: self.cfg.diffusion.lr,
            batch_size: self.cfg.diffusion.batch_size,
            weighting: self.cfg.diffusion_weighting,
            seed: self.seed_for("denoiser-train"),
        };
        self.log.clear_stage("diffusion")?;
        let t0 = Instant::now();
        let trace = diffusion::train_denoiser(&mut denoiser, train, &sched, &tcfg)?;
        let per_epoch = t0.elapsed().as_millis() as u64 / trace.len().max(1) as u64;
        for (epoch, loss) in trace.iter().enumerate() {
            self.log.append(&LogRow {
                stage: "diffusion".into(),
                epoch: Some(epoch),
                loss: *loss,
                acc: f64::NAN,
                omega: [f64::NAN; 3],
                note: String::new(),
                wall_ms: per_epoch,
            })?;
        }
        // Prototypes come from real training windows only.
        let proto = PrototypeTable::fit(train.samples.iter().map(|s| (&s.f[..], s.y)))?;
        let mut c = Container::new();
        self.stamp(&mut c, "diffusion", &prep.hash);
        c.push_text("meta/trace", &trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        denoiser.write_to(&mut c);
        proto.write_to(&mut c);
        c.save(self.path("stage1.ckpt"))?;
        Ok(Stage1 { denoiser, proto, sched, trace })
    }

    fn stage1_from(&self, c: &Container, prep: &Prepared) -> Result<Stage1> {
        self.check_hash(c, &prep.hash)?;
        let sched = self.schedule()?;
        let t = &prep.train;
        let denoiser = DenoiserNet::read_from(self.cfg.denoiser_config(t.channels, t.len, t.n_classes()), &sched, c)?;
        let proto = PrototypeTable::read_from(c)?;
        let trace = c
            .text("meta/trace")
            .unwrap_or_default()
            .split(',')
            .filter_map(|v| v.parse().ok())
            .collect();
        Ok(Stage1 { denoiser, proto, sched, trace })
    }

    pub fn load_stage1(&self, prep: &Prepared) -> Result<Stage1> {
        let p = self.path("stage1.ckpt");
        if !p.exists() {
            return Err(Error::Data(format!("{} not found; run train-diffusion first", p.display())));
        }
        self.stage1_from(&Container::load(&p)?, prep)
    }

    /// Number of synthetic windows stage 2 draws, 0 when augmentation is off.
    pub fn synth_count(&self, prep: &Prepared) -> usize {
        if !self.cfg.augmentation {
            return 0;
        }
        self.cfg.synth_m.unwrap_or(prep.train.len())
    }

    /// Draws the class-balanced synthetic set and writes `synthetic.csv`.
    pub fn synthesize(&self, prep: &Prepared, s1: &Stage1) -> Result<Option<Dataset>> {
        let m = self.synth_count(prep);
        if m == 0 {
            return Ok(None);
        }
        let syn = diffusion::synthesize_dataset(&s1.denoiser, &s1.sched, &s1.proto, &prep.train, m, self.seed_for("synth"))?;
        syn.write_csv(self.path("synthetic.csv"))?;
        Ok(Some(syn))
    }

    pub fn load_synthetic(&self) -> Result<Option<Dataset>> {
        let p = self.path("synthetic.csv");
        if !p.exists() {
            return Ok(None);
        }
        Dataset::read_csv(p).map(Some)
    }

    pub fn fresh_classifier(&self, prep: &Prepared) -> Result<Classifier> {
        let t = &prep.train;
        let seed = self.seed_for("classifier-init");
        Ok(match self.cfg.model_kind {
            ModelKind::Usad => Classifier::Usad(UsadNet::new(self.cfg.usad_config(t.channels, t.len, t.n_classes()), seed)?),
            ModelKind::Pretrain => {
                Classifier::Pretrain(PretrainNet::new(self.cfg.pretrain_net_config(t.channels, t.len, t.n_classes()), seed)?)
            }
        })
    }

    fn log_epochs(&self, stage: &str, records: &[EpochRecord], wall_ms: u64) -> Result<()> {
        for r in records {
            self.log.append(&LogRow {
                stage: stage.into(),
                epoch: Some(r.epoch),
                loss: r.loss,
                acc: r.acc,
                omega: r.omega,
                note: String::new(),
                wall_ms,
            })?;
        }
        Ok(())
    }

    /// Trains a fresh classifier on synthetic windows with cross-entropy.
    /// Without synthetic data the fresh initialisation is saved as is and
    /// the log gets a `skipped` marker.
    pub fn pretrain(&self, prep: &Prepared, synthetic: Option<&Dataset>) -> Result<Classifier> {
        if let Some(c) = self.resumable("stage2.ckpt", &prep.hash) {
            return Classifier::read_from(&c);
        }
        let mut model = self.fresh_classifier(prep)?;
        self.log.clear_stage("pretrain")?;
        match synthetic.filter(|s| !s.is_empty()) {
            None => self.log.append(&LogRow::marker("pretrain", "skipped"))?,
            Some(syn) => {
                let mut tcfg = ClassifierTrainConfig {
                    batch_size: self.cfg.pretrain.batch_size,
                    ece_bins: self.cfg.eval_ece_bins,
                    ..ClassifierTrainConfig::new(self.cfg.pretrain.epochs, self.cfg.pretrain.lr, self.seed_for("pretrain"))
                };
                let t0 = Instant::now();
                let records = train_classifier(&mut model, syn, None, &mut tcfg, |_| Ok(()))?;
                let per_epoch = t0.elapsed().as_millis() as u64 / records.len().max(1) as u64;
                self.log_epochs("pretrain", &records, per_epoch)?;
            }
        }
        let mut c = Container::new();
        self.stamp(&mut c, "pretrain", &prep.hash);
        model.write_to(&mut c);
        c.save(self.path("stage2.ckpt"))?;
        Ok(model)
    }

    pub fn load_stage2(&self, prep: &Prepared) -> Result<Classifier> {
        let p = self.path("stage2.ckpt");
        if !p.exists() {
            return Err(Error::Data(format!("{} not found; run pretrain first", p.display())));
        }
        let c = Container::load(&p)?;
        self.check_hash(&c, &prep.hash)?;
        Classifier::read_from(&c)
    }

    /// Fine-tunes `init` on real training windows with the composite loss,
    /// validating every epoch, then evaluates on the test split.
    pub fn finetune(&self, prep: &Prepared, init: Classifier, synthetic: Option<&Dataset>) -> Result<Outcome> {
        let mut model = init;
        let mut train = prep.train.clone();
        if let Some(syn) = synthetic {
            let k = ((self.cfg.finetune_synthetic_ratio * train.len() as f64).round() as usize).min(syn.len());
            train.samples.extend(syn.samples[..k].iter().cloned());
        }
        let mut tcfg = ClassifierTrainConfig {
            batch_size: self.cfg.finetune.batch_size,
            ece_bins: self.cfg.eval_ece_bins,
            objective: Objective::Composite {
                loss: self.cfg.loss_config(),
                state: self.cfg.loss_state()?,
                adaptive: self.cfg.loss_adaptive,
            },
            ..ClassifierTrainConfig::new(self.cfg.finetune.epochs, self.cfg.finetune.lr, self.seed_for("finetune"))
        };
        self.log.clear_stage("finetune")?;
        let val = (!prep.val.is_empty()).then_some(&prep.val);
        let t0 = Instant::now();
        let records = train_classifier(&mut model, &train, val, &mut tcfg, |_| Ok(()))?;
        let per_epoch = t0.elapsed().as_millis() as u64 / records.len().max(1) as u64;
        self.log_epochs("finetune", &records, per_epoch)?;

        let test_set = if prep.test.is_empty() { &prep.train } else { &prep.test };
        let test = evaluate(&model, test_set, self.cfg.eval_ece_bins)?;
        let mut c = Container::new();
        self.stamp(&mut c, "finetune", &prep.hash);
        model.write_to(&mut c);
        c.save(self.path("stage3.ckpt"))?;
        self.write_metrics(&records, &test)?;
        Ok(Outcome { model, records, test })
    }

    pub fn load_stage3(&self, prep: &Prepared) -> Result<Classifier> {
        let p = self.path("stage3.ckpt");
        if !p.exists() {
            return Err(Error::Data(format!("{} not found; run finetune first", p.display())));
        }
        let c = Container::load(&p)?;
        self.check_hash(&c, &prep.hash)?;
        Classifier::read_from(&c)
    }

    fn write_metrics(&self, records: &[EpochRecord], test: &Evaluation) -> Result<()> {
        let path = self.path("metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["split", "epoch"];
        header.extend(Evaluation::CSV_COLUMNS);
        w.write_record(&header)?;
        let row = |split: &str, epoch: String, e: &Evaluation| {
            let mut r = vec![split.to_string(), epoch];
            r.extend(e.csv_values().iter().map(|v| fmt_opt(*v)));
            r
        };
        for rec in records {
            if let Some(v) = &rec.val {
                w.write_record(row("val", rec.epoch.to_string(), v))?;
            }
        }
        w.write_record(row("test", records.len().to_string(), test))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_radar(&self.path("radar.csv"), test)
    }

    /// Stage 1 through 3 in order. With `run.resume` set, stages whose
    /// checkpoint matches the current config and data are loaded instead.
    pub fn run_all(&self) -> Result<Outcome> {
        let prep = self.prepare()?;
        let synthetic = if self.synth_count(&prep) > 0 {
            let s1 = self.train_diffusion(&prep)?;
            self.synthesize(&prep, &s1)?
        } else {
            self.log.clear_stage("diffusion")?;
            self.log.append(&LogRow::marker("diffusion", "skipped"))?;
            None
        };
        let init = self.pretrain(&prep, synthetic.as_ref())?;
        self.finetune(&prep, init, synthetic.as_ref())
    }
}

/// Long-format `axis,value` rows for a radar chart.
pub fn write_radar(path: &Path, e: &Evaluation) -> Result<()> {
    let v = e.csv_values();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis", "value"])?;
    for (axis, val) in ["Acc", "Pre", "Rec", "F1", "G-mean", "AUC"].iter().zip(v) {
        w.write_record([axis.to_string(), fmt_opt(val)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Switches the ablation grid can flip.
pub const TOGGLES: [&str; 4] = ["spatial_attn", "temporal_attn", "adaptive_loss", "augmentation"];

fn apply_toggle(cfg: &mut RunConfig, name: &str, on: bool) -> Result<()> {
    match name {
        "spatial_attn" => cfg.model_spatial_attn = on,
        "temporal_attn" => cfg.model_temporal_attn = on,
        "adaptive_loss" => cfg.loss_adaptive = on,
        "augmentation" => cfg.augmentation = on,
        _ => return Err(Error::Config(format!("unknown toggle '{name}', expected one of {}", TOGGLES.join(", ")))),
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub settings: Vec<(String, bool)>,
    pub seed: u64,
    pub data_hash: String,
    pub test: Evaluation,
}

/// One full run per on/off combination of `toggles` (all on first), each
/// in its own subdirectory, merged into `ablation.csv`.
pub fn run_ablation(cfg: &RunConfig, toggles: &[String], dir: &Path) -> Result<Vec<AblationRow>> {
    for t in toggles {
        apply_toggle(&mut cfg.clone(), t, true)?;
    }
    let seed = cfg.seed()?;
    let n = toggles.len();
    let mut rows = Vec::with_capacity(1 << n);
    for mask in 0..(1usize << n) {
        let mut c = cfg.clone();
        let mut settings = Vec::with_capacity(n);
        let mut name = String::from("run");
        for (i, t) in toggles.iter().enumerate() {
            let on = mask & (1 << i) == 0;
            apply_toggle(&mut c, t, on)?;
            settings.push((t.clone(), on));
            name.push_str(&format!("_{}{}", t, if on { "1" } else { "0" }));
        }
        let run = Run::new(c, dir.join(&name))?;
        let out = run.run_all()?;
        let data_hash = run.load_prepared()?.hash;
        rows.push(AblationRow { settings, seed, data_hash, test: out.test });
    }
    write_ablation(&dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = rows
        .first()
        .map(|r| r.settings.iter().map(|(t, _)| t.clone()).collect())
        .unwrap_or_default();
    header.extend(["seed", "data_hash", "Acc", "Pre", "Rec", "F1", "G-mean", "AUC"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.settings.iter().map(|(_, on)| u8::from(*on).to_string()).collect();
        rec.push(r.seed.to_string());
        rec.push(r.data_hash.clone());
        rec.extend(r.test.csv_values()[..6].iter().map(|v| fmt_opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
