use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use canfusion::fusion::apply_mask;
use canfusion::gaopt::{self, EvalContext, GenerationStats, Subspace};
use canfusion::ingest::{self, parse_log_with, raw_matrix, LogFormat, ParseOptions};
use canfusion::ml::EvalReport;
use canfusion::pipeline::{forest_spec, fuse, FittedClassifier};
use canfusion::spatial;
use canfusion::stats::five_by_two_cv;
use canfusion::synth::generate_config;
use canfusion::{
    CanFrame, FeatureMask, FeatureMatrix, ForestParams, Label, Metric, Model, Normalizer, PipelineConfig,
    PredictorModel, Split, SynthConfig,
};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, Format, GlobalArgs, LabelArg};

pub const FRAMES: &str = "frames.bin";
pub const SPLIT: &str = "split.json";
pub const RAW_NORMALIZER: &str = "normalizer.json";
pub const PREDICTOR: &str = "predictor.bin";
pub const FEATURES: &str = "features.bin";
pub const FEATURES_CSV: &str = "features.csv";
pub const SUBSPACE: &str = "subspace.txt";
pub const SEARCH_HISTORY: &str = "search_history.json";
pub const MODEL: &str = "model.bin";
pub const MODEL_META: &str = "model.json";
pub const EVALUATION: &str = "evaluation.json";
pub const TTEST: &str = "ttest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Runtime,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Validation => 1,
            Kind::Runtime => 2,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(error: anyhow::Error) -> Failure {
    Failure { kind: Kind::Validation, error }
}

fn runtime(error: anyhow::Error) -> Failure {
    Failure { kind: Kind::Runtime, error }
}

impl From<canfusion::Error> for Failure {
    fn from(e: canfusion::Error) -> Self {
        let kind = if e.is_input_error() { Kind::Validation } else { Kind::Runtime };
        Failure { kind, error: e.into() }
    }
}

/// Adds context to library errors while keeping their classification.
trait Describe<T> {
    fn describe(self, what: impl FnOnce() -> String) -> Outcome<T>;
}

impl<T> Describe<T> for canfusion::Result<T> {
    fn describe(self, what: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| {
            let f = Failure::from(e);
            Failure { kind: f.kind, error: f.error.context(what()) }
        })
    }
}

/// Stage artifacts under one directory.
struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact produced by `stage`, which must already exist.
    fn require(&self, name: &str, stage: &str) -> Outcome<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(invalid(anyhow!(
                "missing {} in {}; run `canfusion {stage}` first",
                name,
                self.dir.display()
            )))
        }
    }

    fn ensure_dir(&self) -> Outcome {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))
            .map_err(runtime)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Outcome<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(runtime)?;
        Ok(p)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: &str) -> Outcome<T> {
        let p = self.require(name, stage)?;
        let text = fs::read_to_string(&p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(runtime)?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", p.display()))
            .map_err(invalid)
    }

    fn frames(&self) -> Outcome<Vec<CanFrame>> {
        let p = self.require(FRAMES, "ingest")?;
        ingest::load_frames(&p).describe(|| p.display().to_string())
    }

    fn split(&self) -> Outcome<Split> {
        self.read_json(SPLIT, "ingest")
    }

    fn predictor(&self) -> Outcome<PredictorModel> {
        let p = self.require(PREDICTOR, "train-predictor")?;
        PredictorModel::load(&p).describe(|| p.display().to_string())
    }

    fn subspace(&self) -> Outcome<Option<Subspace>> {
        let p = self.path(SUBSPACE);
        if !p.exists() {
            return Ok(None);
        }
        Subspace::load(&p).describe(|| p.display().to_string()).map(Some)
    }
}

/// Settings after applying flags and then the config file on top.
struct Settings {
    cfg: PipelineConfig,
    /// Whether the filter size came from a flag or the config file.
    filter_size_set: bool,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn settings(global: &GlobalArgs, filter_size: Option<usize>) -> Outcome<Settings> {
    let mut cfg = PipelineConfig::default();
    if let Some(seed) = global.seed {
        cfg.split.seed = seed;
        cfg.predictor.seed = seed;
        cfg.ga.seed = seed;
        cfg.forest.seed = seed;
    }
    if let Some(f) = filter_size {
        cfg.filter_size = f;
    }
    let mut filter_size_set = filter_size.is_some();
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(invalid)?;
        let file: toml::Value = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(invalid)?;
        filter_size_set |= file.get("filter_size").is_some();
        let mut merged = toml::Value::try_from(cfg).map_err(|e| runtime(e.into()))?;
        merge(&mut merged, file);
        cfg = merged
            .try_into()
            .with_context(|| format!("config {}", path.display()))
            .map_err(invalid)?;
    }
    cfg.validate().describe(|| "pipeline settings".into())?;
    Ok(Settings { cfg, filter_size_set })
}

fn parse_options(label: Option<LabelArg>) -> ParseOptions {
    ParseOptions {
        force_label: label.map(|l| match l {
            LabelArg::Normal => Label::Normal,
            LabelArg::Anomalous => Label::Anomalous,
        }),
        ..ParseOptions::default()
    }
}

fn read_capture(path: &Path, label: Option<LabelArg>) -> Outcome<Vec<CanFrame>> {
    parse_log_with(path, LogFormat::HcrlCsv, parse_options(label)).describe(|| path.display().to_string())
}

fn to_json<T: Serialize>(v: &T) -> Outcome<String> {
    serde_json::to_string_pretty(v).map_err(|e| runtime(e.into()))
}

fn emit(format: Format, text: &str, json: &str) {
    match format {
        Format::Text => print!("{text}"),
        Format::Json => println!("{json}"),
    }
}

pub fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(invalid(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| runtime(e.into()))?;
    }
    let art = Artifacts { dir: g.out_dir.clone() };
    match cli.command {
        Command::Generate { input, frames, attack_free, output } => generate(&g, &art, input, frames, attack_free, output),
        Command::Ingest { input, label } => ingest_cmd(&g, &art, &input, label),
        Command::TrainPredictor { input, label } => train_predictor(&g, &art, &input, label),
        Command::Extract { filter_size, csv } => extract(&g, &art, filter_size, csv),
        Command::Optimize => optimize(&g, &art),
        Command::Train { mask, filter_size } => train(&g, &art, mask, filter_size),
        Command::Evaluate => evaluate(&g, &art),
        Command::Ttest { metric, trees } => ttest(&g, &art, metric, trees),
        Command::Report => report(&g, &art),
    }
}

fn generate(
    g: &GlobalArgs,
    art: &Artifacts,
    input: Option<PathBuf>,
    frames: usize,
    attack_free: bool,
    output: Option<PathBuf>,
) -> Outcome {
    let mut cfg = match &input {
        Some(p) => SynthConfig::load(p).describe(|| p.display().to_string())?,
        None => SynthConfig::spoof_scenario(frames, g.seed.unwrap_or(0)),
    };
    if attack_free {
        cfg = cfg.attack_free();
    }
    let stream = generate_config(&cfg).describe(|| "generating traffic".into())?;
    let out = match output {
        Some(p) => p,
        None => {
            art.ensure_dir()?;
            art.path("traffic.csv")
        }
    };
    ingest::write_csv(&out, &stream)?;
    let anomalous = stream.iter().filter(|f| f.label.is_anomalous()).count();
    let text = format!("wrote {} frames ({anomalous} anomalous) to {}\n", stream.len(), out.display());
    let json = serde_json::json!({ "frames": stream.len(), "anomalous": anomalous, "output": out });
    emit(g.format, &text, &json.to_string());
    Ok(())
}

fn ingest_cmd(g: &GlobalArgs, art: &Artifacts, input: &Path, label: Option<LabelArg>) -> Outcome {
    let s = settings(g, None)?;
    let frames = read_capture(input, label)?;
    let split = ingest::split(frames.len(), &s.cfg.split)?;
    let normalizer = Normalizer::fit(&raw_matrix(&frames), &split.train)?;
    art.ensure_dir()?;
    ingest::save_frames(&art.path(FRAMES), &frames)?;
    art.write(SPLIT, to_json(&split)?)?;
    art.write(RAW_NORMALIZER, to_json(&normalizer)?)?;
    let anomalous = frames.iter().filter(|f| f.label.is_anomalous()).count();
    let text = format!(
        "ingested {} frames ({anomalous} anomalous); split {}/{}/{}\n",
        frames.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let json = serde_json::json!({
        "frames": frames.len(),
        "anomalous": anomalous,
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
    });
    emit(g.format, &text, &json.to_string());
    Ok(())
}

fn train_predictor(g: &GlobalArgs, art: &Artifacts, input: &Path, label: Option<LabelArg>) -> Outcome {
    let s = settings(g, None)?;
    let frames = read_capture(input, label)?;
    let anomalous = frames.iter().filter(|f| f.label.is_anomalous()).count();
    if anomalous > 0 {
        return Err(invalid(anyhow!(
            "{}: predictor training needs attack-free traffic, but {anomalous} frames are labeled anomalous",
            input.display()
        )));
    }
    let model = spatial::train(&frames, &s.cfg.predictor)?;
    art.ensure_dir()?;
    model.save(&art.path(PREDICTOR))?;
    let text = format!(
        "trained predictor on {} frames: {} parameters, {} epochs, MAE {:.6}\n",
        frames.len(),
        model.parameter_count(),
        model.meta.epochs,
        model.meta.final_mae
    );
    let json = serde_json::json!({
        "frames": frames.len(),
        "parameters": model.parameter_count(),
        "epochs": model.meta.epochs,
        "mae": model.meta.final_mae,
    });
    emit(g.format, &text, &json.to_string());
    Ok(())
}

fn extract(g: &GlobalArgs, art: &Artifacts, filter_size: Option<usize>, csv: bool) -> Outcome {
    let s = settings(g, filter_size)?;
    let frames = art.frames()?;
    let predictor = art.predictor()?;
    let fused = fuse(&frames, &predictor, s.cfg.filter_size)?;
    fused.save(&art.path(FEATURES))?;
    if csv {
        fused.write_csv(&art.path(FEATURES_CSV))?;
    }
    let text = format!(
        "extracted {} x {} fused features with filter size {}\n",
        fused.n_rows(),
        fused.n_cols(),
        s.cfg.filter_size
    );
    let json = serde_json::json!({
        "rows": fused.n_rows(),
        "columns": fused.n_cols(),
        "filter_size": s.cfg.filter_size,
    });
    emit(g.format, &text, &json.to_string());
    Ok(())
}

fn optimize(g: &GlobalArgs, art: &Artifacts) -> Outcome {
    let s = settings(g, None)?;
    let ga = s.cfg.ga;
    let frames = art.frames()?;
    let split = art.split()?;
    let predictor = art.predictor()?;
    if g.format == Format::Text {
        println!("genetic search: {ga}");
    }
    let pe = spatial::extract_pe(&predictor, &frames);
    let ctx = EvalContext::new(&frames, &pe, split.train, split.val, ga.tree)?;
    let result = gaopt::run_with(&ga, &ctx, |gen: &GenerationStats| {
        if g.format == Format::Text {
            println!("{gen}");
        }
    })?;
    let best = result.subspace();
    best.save(&art.path(SUBSPACE))?;
    art.write(SEARCH_HISTORY, to_json(&result.history)?)?;
    let json = serde_json::json!({
        "settings": ga,
        "history": result.history,
        "filter_size": best.filter_size,
        "features": best.mask.names(),
        "mask": best.mask.bit_string(),
        "fitness": best.fitness,
    });
    emit(g.format, &best.to_table(), &json.to_string());
    Ok(())
}

/// Everything needed to rebuild the fitted classifier besides the forest itself.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    filter_size: usize,
    mask: String,
    normalizer: Normalizer,
    forest: ForestParams,
}

/// Filter size and mask: explicit settings first, then the search result,
/// then the defaults.
fn chosen_subspace(art: &Artifacts, s: &Settings, mask: Option<&str>) -> Outcome<(usize, FeatureMask)> {
    let found = art.subspace()?;
    let filter_size = match (&found, s.filter_size_set) {
        (Some(sub), false) => sub.filter_size,
        _ => s.cfg.filter_size,
    };
    let mask = match (mask, &found) {
        (Some(m), _) => m.parse::<FeatureMask>()?,
        (None, Some(sub)) => sub.mask,
        (None, None) => FeatureMask::all(),
    };
    Ok((filter_size, mask))
}

fn train(g: &GlobalArgs, art: &Artifacts, mask: Option<String>, filter_size: Option<usize>) -> Outcome {
    let s = settings(g, filter_size)?;
    let frames = art.frames()?;
    let split = art.split()?;
    let predictor = art.predictor()?;
    let (filter_size, mask) = chosen_subspace(art, &s, mask.as_deref())?;
    let fused = fuse(&frames, &predictor, filter_size)?;
    let fitted = FittedClassifier::fit(&fused, &mask, &split.train, &forest_spec(&s.cfg.forest))?;
    fitted.model.save(&art.path(MODEL))?;
    let meta = ModelMeta {
        filter_size,
        mask: mask.bit_string(),
        normalizer: fitted.normalizer.clone(),
        forest: s.cfg.forest,
    };
    art.write(MODEL_META, to_json(&meta)?)?;
    let text = format!(
        "trained random forest ({} trees) on {} rows, filter size {filter_size}, features: {}\n",
        s.cfg.forest.n_trees,
        split.train.len(),
        mask.names()
    );
    let json = serde_json::json!({
        "trees": s.cfg.forest.n_trees,
        "rows": split.train.len(),
        "filter_size": filter_size,
        "features": mask.names(),
    });
    emit(g.format, &text, &json.to_string());
    Ok(())
}

fn evaluate(g: &GlobalArgs, art: &Artifacts) -> Outcome {
    let model_path = art.require(MODEL, "train")?;
    let meta: ModelMeta = art.read_json(MODEL_META, "train")?;
    let frames = art.frames()?;
    let split = art.split()?;
    let predictor = art.predictor()?;
    let model = Model::load(&model_path)?;
    let mask: FeatureMask = meta.mask.parse()?;
    let fitted = FittedClassifier { model, mask, normalizer: meta.normalizer };
    let fused = fuse(&frames, &predictor, meta.filter_size)?;
    let report = fitted.evaluate(&fused, &split.test)?;
    art.write(EVALUATION, report.to_json())?;
    emit(g.format, &report.to_text(), &report.to_json());
    Ok(())
}

fn masked_normalized(fused: &FeatureMatrix, mask: &FeatureMask, train: &[usize]) -> Outcome<canfusion::Matrix> {
    let masked = apply_mask(fused, mask)?;
    let (normalized, _) = masked.normalized(train)?;
    Ok(normalized.values)
}

fn ttest(g: &GlobalArgs, art: &Artifacts, metric: Option<String>, trees: Option<usize>) -> Outcome {
    let mut s = settings(g, None)?;
    if let Some(m) = metric {
        s.cfg.metric = m.parse::<Metric>()?;
    }
    if let Some(t) = trees {
        s.cfg.forest.n_trees = t;
    }
    let frames = art.frames()?;
    let split = art.split()?;
    let predictor = art.predictor()?;
    let (filter_size, mask) = chosen_subspace(art, &s, None)?;
    let fused = fuse(&frames, &predictor, filter_size)?;
    let selected = masked_normalized(&fused, &mask, &split.train)?;
    let raw = masked_normalized(&fused, &FeatureMask::raw(), &split.train)?;
    let spec = forest_spec(&s.cfg.forest);
    let result = five_by_two_cv(&selected, &raw, &fused.labels, &spec, &spec, s.cfg.metric, s.cfg.split.seed)?;
    art.write(TTEST, result.to_json())?;
    let text = format!("model a: {}\nmodel b: raw fields\n{}", mask.names(), result.to_text());
    emit(g.format, &text, &result.to_json());
    Ok(())
}

fn report(g: &GlobalArgs, art: &Artifacts) -> Outcome {
    let eval: EvalReport = art.read_json(EVALUATION, "evaluate")?;
    let subspace = art.subspace()?;
    let ttest_path = art.path(TTEST);
    let ttest: Option<serde_json::Value> = if ttest_path.exists() {
        Some(art.read_json(TTEST, "ttest")?)
    } else {
        None
    };
    match g.format {
        Format::Text => {
            if let Some(sub) = &subspace {
                print!("{}", sub.to_table());
            }
            print!("{}", eval.to_text());
            if let Some(t) = &ttest {
                println!("ttest t = {} p = {}", t["t_statistic"], t["p_value"]);
            }
        }
        Format::Json => {
            let json = serde_json::json!({
                "subspace": subspace.map(|s| serde_json::json!({
                    "filter_size": s.filter_size,
                    "features": s.mask.names(),
                    "fitness": s.fitness,
                })),
                "evaluation": eval,
                "ttest": ttest,
            });
            println!("{json}");
        }
    }
    Ok(())
}
