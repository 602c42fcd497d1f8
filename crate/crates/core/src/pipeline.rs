//! End-to-end experiment orchestration: dataset construction and I/O,
//! pretraining, per-strategy fine-tuning, the comparison matrix, ablation
//! sweeps, and the small-scale forgetting experiment.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, NdArray};
use crate::config::{derive_seed, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{build_comparison_matrix, evaluate, ComparisonMatrix, FoldReport};
use crate::model::{soft_dice_loss, ModelConfig, PromptConfig, SegModel};
use crate::synth::{
    augment, generate_center, plan_center, preprocess, read_volume, write_volume, apply_crop,
    BlobClass, CenterSpec, CropDecision, Sample, SplitPlan,
};
use crate::tuning::{
    apply_strategy, select_learnable, train_epochs, TrainRecord, TuningStrategy,
};

pub struct CenterData {
    pub spec: CenterSpec,
    pub samples: Vec<Sample>,
    pub plan: SplitPlan,
}

pub struct DataSet {
    pub centers: Vec<CenterData>,
}

impl DataSet {
    pub fn center(&self, id: &str) -> Result<&CenterData> {
        self.centers.iter().find(|c| c.spec.center_id == id).ok_or_else(|| {
            Error::Config(format!(
                "unknown center '{id}' (known: {})",
                self.centers
                    .iter()
                    .map(|c| c.spec.center_id.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
    }

    pub fn center_ids(&self) -> Vec<String> {
        self.centers.iter().map(|c| c.spec.center_id.clone()).collect()
    }
}

/// Generate and split every configured center, entirely in memory.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<DataSet> {
    cfg.validate()?;
    let mut centers = Vec::with_capacity(cfg.centers.len());
    for spec in &cfg.centers {
        let samples = generate_center(spec)?;
        let plan = plan_center(
            &spec.center_id,
            samples.len(),
            cfg.folds,
            derive_seed(cfg.split_seed, &format!("split:{}", spec.center_id)),
        )?;
        centers.push(CenterData {
            spec: spec.clone(),
            samples,
            plan,
        });
    }
    Ok(DataSet { centers })
}

#[derive(Serialize, Deserialize)]
struct DataManifest {
    schema_version: u32,
    centers: Vec<String>,
}

/// Write the dataset under `dir`: one subdirectory per center holding the
/// spec, the split plan, and one volume file per sample. Refuses to touch a
/// non-empty directory unless `force`.
pub fn write_dataset(ds: &DataSet, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &ds.centers {
        let cdir = dir.join(&c.spec.center_id);
        std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        let spec_json = serde_json::to_string_pretty(&c.spec).unwrap();
        std::fs::write(cdir.join("spec.json"), spec_json).map_err(|e| Error::io(&cdir, e))?;
        let plan_json = serde_json::to_string_pretty(&c.plan).unwrap();
        std::fs::write(cdir.join("plan.json"), plan_json).map_err(|e| Error::io(&cdir, e))?;
        for s in &c.samples {
            write_volume(s, &cdir.join(format!("{}.psvl", s.sample_id)))?;
        }
    }
    let manifest = DataManifest {
        schema_version: 1,
        centers: ds.center_ids(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DataSet> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        detail: format!("bad manifest: {e}"),
        offset: 0,
    })?;
    let mut centers = Vec::new();
    for id in &manifest.centers {
        let cdir = dir.join(id);
        let spec: CenterSpec = serde_json::from_str(
            &std::fs::read_to_string(cdir.join("spec.json")).map_err(|e| Error::io(&cdir, e))?,
        )
        .map_err(|e| Error::Format {
            path: cdir.join("spec.json"),
            detail: format!("bad spec: {e}"),
            offset: 0,
        })?;
        let plan: SplitPlan = serde_json::from_str(
            &std::fs::read_to_string(cdir.join("plan.json")).map_err(|e| Error::io(&cdir, e))?,
        )
        .map_err(|e| Error::Format {
            path: cdir.join("plan.json"),
            detail: format!("bad plan: {e}"),
            offset: 0,
        })?;
        let mut samples = Vec::with_capacity(spec.n_samples);
        for s in 0..spec.n_samples {
            samples.push(read_volume(&cdir.join(format!("{id}-{s:03}.psvl")))?);
        }
        centers.push(CenterData { spec, samples, plan });
    }
    Ok(DataSet { centers })
}

/// Deterministic central crop to the model's input size; evaluation always
/// sees the same sub-volume of each test sample.
pub fn center_crop(sample: &Sample, size: usize) -> Result<Sample> {
    let spatial = sample.spatial();
    let mut corner = [0usize; 3];
    for a in 0..3 {
        if size > spatial[a] {
            return Err(Error::Config(format!(
                "crop {size} exceeds volume extents {spatial:?}"
            )));
        }
        corner[a] = (spatial[a] - size) / 2;
    }
    apply_crop(
        sample,
        size,
        &CropDecision {
            corner,
            flips: [false, false, false],
            turns: 0,
        },
        0,
    )
}

/// Preprocessed central crops of a center's test split.
pub fn test_pool(ds: &DataSet, cfg: &ExperimentConfig, center_ids: &[&str]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for id in center_ids {
        let c = ds.center(id)?;
        for &i in &c.plan.test {
            out.push(preprocess(&center_crop(&c.samples[i], cfg.crop)?)?);
        }
    }
    Ok(out)
}

/// Preprocess and augment training volumes into (crop, mask) pairs.
pub fn training_pairs(
    cfg: &ExperimentConfig,
    samples: &[&Sample],
    seed: u64,
) -> Result<Vec<(NdArray<f32>, Vec<u8>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in samples {
        let pre = preprocess(s)?;
        for crop in augment(&pre, cfg.crop, &mut rng)? {
            out.push((crop.volume, crop.mask));
        }
    }
    Ok(out)
}

pub struct TrainedRun {
    pub model: SegModel<f32>,
    pub records: Vec<TrainRecord>,
}

/// Pretrain the promptless base model on every center except the holdout,
/// using each center's training split.
pub fn pretrain(ds: &DataSet, cfg: &ExperimentConfig, holdout: &str) -> Result<TrainedRun> {
    ds.center(holdout)?;
    let mut train_samples: Vec<&Sample> = Vec::new();
    for c in &ds.centers {
        if c.spec.center_id == holdout {
            continue;
        }
        for &i in &c.plan.train {
            train_samples.push(&c.samples[i]);
        }
    }
    if train_samples.is_empty() {
        return Err(Error::MissingData("no training samples outside the holdout".into()));
    }
    let pairs = training_pairs(cfg, &train_samples, derive_seed(cfg.seed, "pretrain:aug"))?;
    let mut model = SegModel::<f32>::init(
        cfg.model.clone(),
        PromptConfig::none(),
        derive_seed(cfg.seed, "pretrain:init"),
    )?;
    let opt = cfg.optimizer_for(TuningStrategy::Full);
    let records = train_epochs(
        &mut model,
        TuningStrategy::Full,
        &opt,
        cfg.loss,
        &pairs,
        derive_seed(cfg.seed, "pretrain:train"),
    )?;
    Ok(TrainedRun { model, records })
}

/// Attach prompt slots to a pretrained promptless backbone: fresh prompt
/// matrices, every other parameter copied bitwise.
pub fn with_prompts(base: &SegModel<f32>, prompt: PromptConfig, seed: u64) -> Result<SegModel<f32>> {
    let mut model = SegModel::<f32>::init(base.config.clone(), prompt, seed)?;
    let names: Vec<String> = model
        .param_names()
        .filter(|n| !n.starts_with("prompt."))
        .map(String::from)
        .collect();
    for name in names {
        model.param_mut(&name).value = base.param(&name).value.clone();
    }
    Ok(model)
}

/// The model variant a strategy fine-tunes: promptless for none/partial/
/// full, prompted (shallow or deep per the experiment config) otherwise.
pub fn model_for_strategy(
    base: &SegModel<f32>,
    cfg: &ExperimentConfig,
    strategy: TuningStrategy,
) -> Result<SegModel<f32>> {
    match strategy {
        TuningStrategy::ShallowPrompt => with_prompts(
            base,
            PromptConfig::shallow(cfg.prompt.count.max(1)),
            derive_seed(cfg.seed, "prompts:shallow"),
        ),
        TuningStrategy::DeepPrompt => {
            let prompt = if cfg.prompt.mode == crate::model::PromptMode::Deep {
                cfg.prompt.clone()
            } else {
                PromptConfig::deep_default_sites(&cfg.model, cfg.prompt.count.max(1))
            };
            with_prompts(base, prompt, derive_seed(cfg.seed, "prompts:deep"))
        }
        _ => Ok(base.clone()),
    }
}

pub struct FinetuneRun {
    pub model: SegModel<f32>,
    pub strategy: TuningStrategy,
    pub report: FoldReport,
    pub records: Vec<TrainRecord>,
}

/// Fine-tune on the new center's cross-validation training share (all folds
/// except `fold`), then score the pooled old-center and new-center test
/// manifests.
pub fn finetune(
    base: &SegModel<f32>,
    ds: &DataSet,
    cfg: &ExperimentConfig,
    center_id: &str,
    fold: usize,
    strategy: TuningStrategy,
) -> Result<FinetuneRun> {
    let c = ds.center(center_id)?;
    if fold >= c.plan.folds.len() {
        return Err(Error::Config(format!(
            "fold {fold} out of range (center {center_id} has {})",
            c.plan.folds.len()
        )));
    }
    let mut model = model_for_strategy(base, cfg, strategy)?;
    let mut records = Vec::new();
    if strategy != TuningStrategy::None {
        let train_samples: Vec<&Sample> = c
            .plan
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, idxs)| idxs.iter().map(|&i| &c.samples[i]))
            .collect();
        if train_samples.is_empty() {
            return Err(Error::MissingData(format!(
                "center {center_id} fold {fold} leaves no training samples"
            )));
        }
        let pairs = training_pairs(
            cfg,
            &train_samples,
            derive_seed(cfg.seed, &format!("finetune:aug:{center_id}:{fold}")),
        )?;
        let opt = cfg.optimizer_for(strategy);
        records = train_epochs(
            &mut model,
            strategy,
            &opt,
            cfg.loss,
            &pairs,
            derive_seed(cfg.seed, &format!("finetune:{}:{center_id}:{fold}", strategy.name())),
        )?;
    }

    let old_ids: Vec<&str> = ds
        .centers
        .iter()
        .map(|c| c.spec.center_id.as_str())
        .filter(|id| *id != center_id)
        .collect();
    let old_reports = evaluate(&model, &test_pool(ds, cfg, &old_ids)?)?;
    let new_reports = evaluate(&model, &test_pool(ds, cfg, &[center_id])?)?;
    let mean = |rs: &[crate::eval::DiceReport]| {
        if rs.is_empty() {
            f64::NAN
        } else {
            rs.iter().map(|r| r.mean).sum::<f64>() / rs.len() as f64
        }
    };
    Ok(FinetuneRun {
        model,
        strategy,
        report: FoldReport {
            fold,
            strategy,
            new_center: center_id.to_string(),
            old_center_mean: mean(&old_reports),
            new_center_mean: mean(&new_reports),
        },
        records,
    })
}

/// Full protocol for one held-out center: pretrain once, then every
/// strategy × fold cell, aggregated into the comparison matrix.
pub fn compare(
    ds: &DataSet,
    cfg: &ExperimentConfig,
    holdout: &str,
    strategies: &[TuningStrategy],
) -> Result<(Vec<FoldReport>, ComparisonMatrix)> {
    let base = pretrain(ds, cfg, holdout)?;
    let mut reports = Vec::new();
    for &strategy in strategies {
        for fold in 0..cfg.folds {
            reports.push(finetune(&base.model, ds, cfg, holdout, fold, strategy)?.report);
        }
    }
    let matrix = build_comparison_matrix(&reports)?;
    Ok((reports, matrix))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    NumPrompts,
    PromptSites,
    SkipPrompts,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "num_prompts" => Ok(AblationAxis::NumPrompts),
            "prompt_sites" => Ok(AblationAxis::PromptSites),
            "skip_prompts" => Ok(AblationAxis::SkipPrompts),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected num_prompts|prompt_sites|skip_prompts)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::NumPrompts => "num_prompts",
            AblationAxis::PromptSites => "prompt_sites",
            AblationAxis::SkipPrompts => "skip_prompts",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub avg_dice: f64,
    pub primary: f64,
    pub nodal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,avg_dice,primary,nodal\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.avg_dice, r.primary, r.nodal));
        }
        out
    }
}

/// Standard row set for the prompt-count sweep.
pub const NUM_PROMPTS_ROWS: [usize; 6] = [10, 30, 50, 70, 90, 100];

/// Sweep one prompt-design axis on the held-out center with everything else
/// fixed, scoring the new-center test set per row.
pub fn ablate(
    ds: &DataSet,
    cfg: &ExperimentConfig,
    holdout: &str,
    fold: usize,
    axis: AblationAxis,
) -> Result<AblationTable> {
    let base = pretrain(ds, cfg, holdout)?;
    let count = cfg.prompt.count.max(1);
    let cells: Vec<(String, PromptConfig, TuningStrategy)> = match axis {
        AblationAxis::NumPrompts => NUM_PROMPTS_ROWS
            .iter()
            .map(|&p| {
                (p.to_string(), PromptConfig::shallow(p), TuningStrategy::ShallowPrompt)
            })
            .collect(),
        AblationAxis::PromptSites => {
            let mut cells = vec![(
                "shallow".to_string(),
                PromptConfig::shallow(count),
                TuningStrategy::ShallowPrompt,
            )];
            for layer in 1..=cfg.model.layers {
                cells.push((
                    layer.to_string(),
                    PromptConfig {
                        mode: crate::model::PromptMode::Deep,
                        count,
                        sites: vec![layer],
                        init_scale: cfg.prompt.init_scale,
                    },
                    TuningStrategy::DeepPrompt,
                ));
            }
            cells
        }
        AblationAxis::SkipPrompts => {
            // "without": the default placement after each skip export;
            // "with": prompts inserted at the skip layers themselves
            let without = PromptConfig::deep_default_sites(&cfg.model, count);
            let with_sites: Vec<usize> = cfg
                .model
                .skip_layers
                .iter()
                .copied()
                .filter(|&l| l <= cfg.model.layers)
                .collect();
            let with = PromptConfig {
                mode: crate::model::PromptMode::Deep,
                count,
                sites: with_sites,
                init_scale: cfg.prompt.init_scale,
            };
            vec![
                ("without".to_string(), without, TuningStrategy::DeepPrompt),
                ("with".to_string(), with, TuningStrategy::DeepPrompt),
            ]
        }
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (label, prompt, strategy) in cells {
        let mut variant_cfg = cfg.clone();
        variant_cfg.prompt = prompt.clone();
        let run = finetune(&base.model, ds, &variant_cfg, holdout, fold, strategy)?;
        let new_reports = evaluate(&run.model, &test_pool(ds, cfg, &[holdout])?)?;
        let n = new_reports.len().max(1) as f64;
        rows.push(AblationRow {
            label,
            avg_dice: new_reports.iter().map(|r| r.mean).sum::<f64>() / n,
            primary: new_reports.iter().map(|r| r.primary).sum::<f64>() / n,
            nodal: new_reports.iter().map(|r| r.nodal).sum::<f64>() / n,
        });
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        rows,
    })
}

/// Tiny 3-center configuration for the forgetting experiment: two mild
/// centers plus one with a deliberately large intensity/noise shift.
pub fn forgetting_config(seed: u64) -> ExperimentConfig {
    let model = ModelConfig {
        spatial: [12, 12, 12],
        in_channels: 2,
        patch: 4,
        embed_dim: 32,
        layers: 2,
        heads: 4,
        mlp_dim: 64,
        num_classes: 3,
        skip_layers: vec![1, 2],
        decoder_channels: vec![16],
        final_channels: 8,
    };
    let prompt = PromptConfig::deep_default_sites(&model, 8);
    let blob = |rmin: f64, rmax: f64| BlobClass {
        count_min: 1,
        count_max: 1,
        radius_min: rmin,
        radius_max: rmax,
        ct_delta: 60.0,
        pet_value: 3.5,
    };
    let nodal = BlobClass {
        count_min: 0,
        count_max: 1,
        radius_min: 1.5,
        radius_max: 2.5,
        ct_delta: 40.0,
        pet_value: 2.0,
    };
    let mk = |id: &str, gain: [f64; 2], noise: [f64; 2], blur: f64, s: u64| CenterSpec {
        center_id: id.to_string(),
        n_samples: 8,
        spatial: [12, 12, 12],
        gain,
        bias: [0.0, 0.0],
        noise_sigma: noise,
        blur_sigma: blur,
        primary: blob(2.0, 3.5),
        nodal: nodal.clone(),
        seed: s,
    };
    ExperimentConfig {
        schema_version: crate::config::SCHEMA_VERSION,
        model,
        prompt,
        optimizers: BTreeMap::new(),
        centers: vec![
            mk("old1", [1.0, 1.0], [4.0, 0.05], 0.0, seed.wrapping_add(1)),
            mk("old2", [1.05, 0.9], [5.0, 0.06], 0.3, seed.wrapping_add(2)),
            // the shifted "new" center: inverted CT contrast, hot PET, noisy
            mk("new3", [-1.2, 3.0], [30.0, 0.6], 1.5, seed.wrapping_add(3)),
        ],
        folds: 2,
        crop: 12,
        loss: crate::tuning::LossKind::Dice,
        split_seed: seed.wrapping_add(17),
        seed,
    }
}

pub struct ForgettingOutcome {
    pub seed: u64,
    /// Strategy → (old-center mean, new-center mean).
    pub scores: BTreeMap<TuningStrategy, (f64, f64)>,
}

impl ForgettingOutcome {
    fn get(&self, s: TuningStrategy) -> (f64, f64) {
        self.scores[&s]
    }

    /// (a) every fine-tuning strategy beats direct inference on the new
    /// center.
    pub fn adaptation_holds(&self) -> bool {
        let baseline = self.get(TuningStrategy::None).1;
        TuningStrategy::ALL
            .iter()
            .filter(|&&s| s != TuningStrategy::None)
            .all(|&s| self.get(s).1 > baseline)
    }

    /// (b) full fine-tuning forgets at least as much old-center accuracy as
    /// deep prompt tuning.
    pub fn forgetting_ordered(&self) -> bool {
        let baseline = self.get(TuningStrategy::None).0;
        let drop_full = baseline - self.get(TuningStrategy::Full).0;
        let drop_deep = baseline - self.get(TuningStrategy::DeepPrompt).0;
        drop_full >= drop_deep
    }
}

/// One seed of the forgetting experiment: pretrain on the two mild centers,
/// fine-tune on the shifted third with all five strategies, score both
/// pools.
pub fn run_forgetting(seed: u64, epochs: usize) -> Result<ForgettingOutcome> {
    let mut cfg = forgetting_config(seed);
    for &s in &TuningStrategy::ALL {
        let mut opt = cfg.optimizer_for(s);
        opt.epochs = epochs;
        if s.is_prompt() {
            // desk-scale: a handful of epochs on a tiny model needs hotter
            // rates than the production schedule on either side
            opt.lr0 = 0.08;
        } else {
            opt.lr0 = 2e-3;
        }
        cfg.optimizers.insert(s.name().to_string(), opt);
    }
    let ds = build_dataset(&cfg)?;
    // pretrain longer than the fine-tune budget so the base genuinely fits
    // the old centers; forgetting is only measurable from a fitted base
    let mut cfg_pre = cfg.clone();
    let mut pre_opt = cfg_pre.optimizer_for(TuningStrategy::Full);
    pre_opt.epochs = epochs * 3;
    pre_opt.lr0 = 2e-3;
    cfg_pre
        .optimizers
        .insert(TuningStrategy::Full.name().to_string(), pre_opt);
    let base = pretrain(&ds, &cfg_pre, "new3")?;
    let mut scores = BTreeMap::new();
    for &strategy in &TuningStrategy::ALL {
        let run = finetune(&base.model, &ds, &cfg, "new3", 0, strategy)?;
        scores.insert(strategy, (run.report.old_center_mean, run.report.new_center_mean));
    }
    Ok(ForgettingOutcome { seed, scores })
}

/// Independent 64-bit gradient check of the learnable parameters of a
/// shallow-prompt model under the Dice loss on one random volume.
pub fn gradcheck_prompt_model(
    cfg: &ModelConfig,
    prompt_count: usize,
    seed: u64,
    h: f64,
) -> Result<crate::autograd::GradCheckReport> {
    use rand::Rng as _;
    let prompt = PromptConfig::shallow(prompt_count);
    let mut model = SegModel::<f64>::init(cfg.clone(), prompt, seed)?;
    let learnable = apply_strategy(&mut model, TuningStrategy::ShallowPrompt)?;
    let names: Vec<String> = model
        .param_names()
        .map(String::from)
        .filter(|n| learnable.contains(n))
        .collect();

    let voxels = cfg.spatial.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let vol: Vec<f64> = (0..cfg.in_channels * voxels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let volume = NdArray::new(
        vec![cfg.in_channels, cfg.spatial[0], cfg.spatial[1], cfg.spatial[2]],
        vol,
    )?;
    let mask: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0u8..cfg.num_classes as u8)).collect();

    let theta0: Vec<f64> = names
        .iter()
        .flat_map(|n| model.param(n).value.data().to_vec())
        .collect();

    let eval_loss = |model: &SegModel<f64>| -> Result<(f64, Vec<f64>)> {
        let pass = model.forward(&volume, true)?;
        let mut tape = pass.tape;
        let loss = soft_dice_loss(&mut tape, pass.logits, &mask)?;
        let val = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let mut grads = Vec::new();
        for n in &names {
            let g = tape
                .grad(pass.param_vars[n])
                .ok_or_else(|| Error::Contract(format!("no gradient for {n}")))?;
            grads.extend_from_slice(g);
        }
        Ok((val, grads))
    };
    let (_, analytic) = eval_loss(&model)?;

    let set_theta = |model: &mut SegModel<f64>, theta: &[f64]| {
        let mut off = 0;
        for n in &names {
            let data = model.param_mut(n).value.data_mut();
            data.copy_from_slice(&theta[off..off + data.len()]);
            off += data.len();
        }
    };

    let model_cell = std::cell::RefCell::new(model);
    let f = |theta: &[f64]| -> Result<f64> {
        let mut m = model_cell.borrow_mut();
        set_theta(&mut m, theta);
        let pass = m.forward(&volume, false)?;
        let mut tape = pass.tape;
        let loss = soft_dice_loss(&mut tape, pass.logits, &mask)?;
        Ok(tape.value(loss).data()[0])
    };
    grad_check(f, &theta0, &analytic, h)
}

/// Pairwise strategy significance on per-fold new-center means: Wilcoxon
/// signed-rank (one-sided, row > column) and the paired two-tailed t-test.
pub fn strategy_significance(
    reports: &[FoldReport],
) -> Result<Vec<(TuningStrategy, TuningStrategy, f64, f64)>> {
    use crate::eval::{t_test_two_tailed, wilcoxon_signed_rank, Alternative};
    let series = |s: TuningStrategy| -> Vec<f64> {
        let mut rs: Vec<&FoldReport> = reports.iter().filter(|r| r.strategy == s).collect();
        rs.sort_by_key(|r| r.fold);
        rs.iter().map(|r| r.new_center_mean).collect()
    };
    let mut out = Vec::new();
    for &a in &TuningStrategy::ALL {
        for &b in &TuningStrategy::ALL {
            if a == b {
                continue;
            }
            let (xa, xb) = (series(a), series(b));
            if xa.is_empty() || xb.is_empty() || xa.len() != xb.len() {
                continue;
            }
            let w = match wilcoxon_signed_rank(&xa, &xb, Alternative::Greater) {
                Ok(r) => r.p_value,
                Err(Error::Degenerate(_)) => 1.0,
                Err(e) => return Err(e),
            };
            let t = match t_test_two_tailed(&xa, &xb, true) {
                Ok((_, p)) => p,
                Err(Error::Degenerate(_)) => 1.0,
                Err(e) => return Err(e),
            };
            out.push((a, b, w, t));
        }
    }
    Ok(out)
}

/// Learnable-parameter accounting across all strategies for a config.
pub fn parameter_table(cfg: &ExperimentConfig) -> Result<Vec<(TuningStrategy, usize, f64)>> {
    let base = SegModel::<f32>::init(cfg.model.clone(), PromptConfig::none(), 0)?;
    let mut rows = Vec::new();
    for &s in &TuningStrategy::ALL {
        let model = model_for_strategy(&base, cfg, s)?;
        let set = select_learnable(&model, s)?;
        let count: usize = model
            .params()
            .filter(|(n, _)| set.contains(*n))
            .map(|(_, p)| p.value.numel())
            .sum();
        rows.push((s, count, count as f64 / model.total_scalar_count() as f64));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = forgetting_config(5);
        for &s in &TuningStrategy::ALL {
            let mut opt = cfg.optimizer_for(s);
            opt.epochs = 1;
            cfg.optimizers.insert(s.name().to_string(), opt);
        }
        cfg
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = tiny_cfg();
        let ds = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path(), false).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.centers.len(), ds.centers.len());
        for (a, b) in ds.centers.iter().zip(&back.centers) {
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.plan, b.plan);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.mask, y.mask);
                let xb: Vec<u32> = x.volume.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.volume.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn write_refuses_non_empty_dir_without_force() {
        let cfg = tiny_cfg();
        let ds = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("existing"), b"x").unwrap();
        assert!(write_dataset(&ds, dir.path(), false).is_err());
        write_dataset(&ds, dir.path(), true).unwrap();
    }

    #[test]
    fn unknown_center_error_lists_known_ids() {
        let ds = build_dataset(&tiny_cfg()).unwrap();
        let err = match ds.center("nope") {
            Err(e) => e.to_string(),
            Ok(_) => panic!("lookup should fail"),
        };
        assert!(err.contains("old1") && err.contains("new3"), "{err}");
    }

    #[test]
    fn center_crop_is_central_and_size_checked() {
        let ds = build_dataset(&tiny_cfg()).unwrap();
        let s = &ds.centers[0].samples[0];
        let c = center_crop(s, 8).unwrap();
        assert_eq!(c.spatial(), [8, 8, 8]);
        // corner (12-8)/2 = 2: voxel (0,0,0) of the crop is voxel (2,2,2)
        let full = s.volume.data();
        let crop = c.volume.data();
        assert_eq!(crop[0].to_bits(), full[(2 * 12 + 2) * 12 + 2].to_bits());
        assert!(center_crop(s, 13).is_err());
    }

    #[test]
    fn with_prompts_copies_backbone_bitwise() {
        let cfg = tiny_cfg();
        let base = SegModel::<f32>::init(cfg.model.clone(), PromptConfig::none(), 3).unwrap();
        let prompted = with_prompts(&base, PromptConfig::shallow(4), 9).unwrap();
        for (name, p) in base.params() {
            let q: Vec<u32> = prompted.param(name).value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(q, b, "{name}");
        }
        assert!(prompted.param_names().any(|n| n.starts_with("prompt.")));
    }

    #[test]
    fn model_for_strategy_matches_prompt_mode() {
        let cfg = tiny_cfg();
        let base = SegModel::<f32>::init(cfg.model.clone(), PromptConfig::none(), 3).unwrap();
        use crate::model::PromptMode;
        let m = model_for_strategy(&base, &cfg, TuningStrategy::ShallowPrompt).unwrap();
        assert_eq!(m.prompt.mode, PromptMode::Shallow);
        let m = model_for_strategy(&base, &cfg, TuningStrategy::DeepPrompt).unwrap();
        assert_eq!(m.prompt.mode, PromptMode::Deep);
        let m = model_for_strategy(&base, &cfg, TuningStrategy::Full).unwrap();
        assert_eq!(m.prompt.mode, PromptMode::None);
    }

    #[test]
    fn test_pool_covers_exactly_the_test_split() {
        let cfg = tiny_cfg();
        let ds = build_dataset(&cfg).unwrap();
        let pool = test_pool(&ds, &cfg, &["old1", "old2"]).unwrap();
        let expected: usize = ds
            .centers
            .iter()
            .filter(|c| c.spec.center_id != "new3")
            .map(|c| c.plan.test.len())
            .sum();
        assert_eq!(pool.len(), expected);
        for s in &pool {
            assert_eq!(s.spatial(), [cfg.crop; 3]);
        }
    }

    #[test]
    fn finetune_is_deterministic() {
        let cfg = tiny_cfg();
        let ds = build_dataset(&cfg).unwrap();
        let base = pretrain(&ds, &cfg, "new3").unwrap();
        let a = finetune(&base.model, &ds, &cfg, "new3", 0, TuningStrategy::DeepPrompt).unwrap();
        let b = finetune(&base.model, &ds, &cfg, "new3", 0, TuningStrategy::DeepPrompt).unwrap();
        assert_eq!(a.report, b.report);
        for (name, p) in a.model.params() {
            let x: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> =
                b.model.param(name).value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn parameter_table_covers_all_strategies() {
        let rows = parameter_table(&tiny_cfg()).unwrap();
        assert_eq!(rows.len(), TuningStrategy::ALL.len());
        let full = rows.iter().find(|r| r.0 == TuningStrategy::Full).unwrap();
        assert!((full.2 - 1.0).abs() < 1e-12);
        let none = rows.iter().find(|r| r.0 == TuningStrategy::None).unwrap();
        assert_eq!(none.1, 0);
    }

    #[test]
    fn significance_reports_every_strategy_pair() {
        let mut reports = Vec::new();
        for (i, &s) in TuningStrategy::ALL.iter().enumerate() {
            for fold in 0..5 {
                reports.push(FoldReport {
                    fold,
                    strategy: s,
                    new_center: "c".into(),
                    old_center_mean: 0.5,
                    new_center_mean: 0.4 + 0.05 * i as f64 + 0.01 * fold as f64,
                });
            }
        }
        let pairs = strategy_significance(&reports).unwrap();
        assert_eq!(pairs.len(), 5 * 4); // ordered pairs: one-sided tests aren't symmetric
        for (_, _, wilcoxon_p, t_p) in pairs {
            assert!((0.0..=1.0).contains(&wilcoxon_p));
            assert!((0.0..=1.0).contains(&t_p));
        }
    }
}
