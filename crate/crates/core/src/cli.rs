//! `ovdet` command line. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    generate_synthetic_dataset, load_records, write_dataset, RecordKind, SyntheticSpec,
};
use crate::dictionary::{
    build_dictionary, enrich, extract_noun_phrases, ConceptDictionary, ConceptSource, EmbeddingProvider,
    HashedTrigramProvider, HttpProvider, Lexicon, TableProvider,
};
use crate::error::{Error, Result};
use crate::eval::{concept_texts, detect_all, plot_pr_curves, report_from_detections, EvalOptions};
use crate::model::load_checkpoint;
use crate::pseudo_label::{pseudo_label_records, read_proposals, scorer_from_spec, PseudoLabelOptions};
use crate::train::{train, TrainConfig};
use crate::util::{read_lines, write_jsonl};

#[derive(Debug, Parser)]
#[command(name = "ovdet", version, about = "Open-vocabulary detection pre-training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the concept dictionary from name lists, captions and a lexicon.
    BuildDict(BuildDictArgs),
    /// Render the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Pseudo-label image-text records from region proposals.
    PseudoLabel(PseudoLabelArgs),
    /// Train the detector.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint (AP@0.5 per concept).
    Eval(EvalArgs),
    /// Print the enriched text of concept names.
    Enrich(EnrichArgs),
}

#[derive(Debug, Args)]
pub struct BuildDictArgs {
    /// Detection class names, one per line.
    #[arg(long)]
    pub detection_names: Option<PathBuf>,
    /// Extra thing names (e.g. a lexicon's object synsets), one per line.
    #[arg(long)]
    pub things_names: Option<PathBuf>,
    /// Captions, one per line; noun phrases become image-text concepts.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Definitions as JSON lines `{"name", "definition"}`.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Minimum caption frequency for image-text concepts.
    #[arg(long, default_value_t = 100)]
    pub min_freq: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as JSON; flags below override it.
    #[arg(long, alias = "spec")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_freq: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    /// Image-text records (JSON lines).
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    /// `stub`, `file:PATH`, `http:URL` or `model:CHECKPOINT`.
    #[arg(long, default_value = "stub")]
    pub scorer: String,
    #[arg(long, default_value_t = crate::pseudo_label::DEFAULT_OBJECTNESS_THRESHOLD)]
    pub obj_thresh: f64,
    #[arg(long, default_value_t = crate::pseudo_label::DEFAULT_MIN_AREA)]
    pub min_area: f64,
    #[arg(long, default_value_t = crate::pseudo_label::DEFAULT_SCORE_THRESHOLD)]
    pub score_thresh: f64,
    /// Score against every dictionary concept (label completion).
    #[arg(long)]
    pub use_dictionary: bool,
    /// Directory for the concept-embedding cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Label at most this many records, taken in file order.
    #[arg(long)]
    pub max_records: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config with flat keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub detection: Option<PathBuf>,
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long)]
    pub imagetext: Option<PathBuf>,
    #[arg(long)]
    pub pseudo_labels: Option<PathBuf>,
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub label_space: Option<PathBuf>,
    /// Names never sampled as negatives, one per line.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Concepts per image.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_visual: Option<f64>,
    #[arg(long)]
    pub lr_text: Option<f64>,
    /// Comma-separated decay epochs.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub no_enrich: bool,
    #[arg(long)]
    pub no_negative_sampling: bool,
    #[arg(long)]
    pub no_label_completion: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotated records (detection JSON lines).
    #[arg(long)]
    pub records: PathBuf,
    /// Concept list, one per line.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    /// Additional concepts given inline.
    #[arg(long = "concept")]
    pub concept: Vec<String>,
    /// Concepts unseen in training, one per line.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Feed bare class names instead of names with definitions.
    #[arg(long)]
    pub no_enrich: bool,
    #[arg(long, default_value_t = 0.05)]
    pub score_thresh: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write a precision-recall figure.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Write every detection as JSON lines `{"image_id", "box", "concept", "score"}`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrichArgs {
    #[arg(long)]
    pub dict: PathBuf,
    /// Retrieval provider for names missing from the dictionary:
    /// `trigram`, `file:PATH` or `http:URL`.
    #[arg(long)]
    pub provider: Option<String>,
    /// Vector width expected from an `http:` provider.
    #[arg(long, default_value_t = 64)]
    pub provider_dim: usize,
    /// Concept name to enrich; repeatable.
    #[arg(long = "name", required = true)]
    pub names: Vec<String>,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildDict(a) => build_dict(a),
        Command::GenData(a) => gen_data(a),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(a),
        Command::Enrich(a) => run_enrich(a),
    }
}

fn opt_lines(p: &Option<PathBuf>) -> Result<Vec<String>> {
    p.as_deref().map(read_lines).transpose().map(Option::unwrap_or_default)
}

fn build_dict(a: BuildDictArgs) -> Result<()> {
    let mut phrases = Vec::new();
    for caption in opt_lines(&a.captions)? {
        phrases.extend(extract_noun_phrases(&caption));
    }
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::new(),
    };
    let dict = build_dictionary(
        &[
            (ConceptSource::Detection, opt_lines(&a.detection_names)?),
            (ConceptSource::Things, opt_lines(&a.things_names)?),
            (ConceptSource::Imagetext, phrases),
        ],
        a.min_freq,
        &lexicon,
    );
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    dict.save(&a.out)?;
    println!("{} concepts written to {}", dict.len(), a.out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.num_images {
        spec.num_images = v;
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.min_freq {
        spec.min_frequency = v;
    }
    spec.validate()?;
    let ds = generate_synthetic_dataset(&spec)?;
    write_dataset(&ds, &spec, &a.out)?;
    println!("{} images written to {}", ds.records.len(), a.out.display());
    Ok(())
}

fn pseudo_label(a: PseudoLabelArgs) -> Result<()> {
    let dict = ConceptDictionary::load(&a.dict)?;
    let mut records = load_records(&a.records, RecordKind::Imagetext)?;
    if let Some(cap) = a.max_records {
        records.truncate(cap);
    }
    let proposals = read_proposals(&a.proposals)?;
    let scorer = scorer_from_spec(&a.scorer)?;
    let opts = PseudoLabelOptions {
        objectness_threshold: a.obj_thresh,
        min_area: a.min_area,
        score_threshold: a.score_thresh,
        use_dictionary: a.use_dictionary,
    };
    let rows = pseudo_label_records(&records, &proposals, &dict, scorer.as_ref(), &opts, a.cache_dir.as_deref())?;
    write_jsonl(&a.out, &rows)?;
    println!("{} pseudo labels for {} records written to {}", rows.len(), records.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $( if let Some(v) = $arg { cfg.$field = v.into(); } )*
        };
    }
    set!(
        detection <- a.detection.map(Some),
        grounding <- a.grounding.map(Some),
        imagetext <- a.imagetext.map(Some),
        pseudo_labels <- a.pseudo_labels.map(Some),
        proposals <- a.proposals.map(Some),
        scorer <- a.scorer,
        dictionary <- a.dict.map(Some),
        label_space <- a.label_space.map(Some),
        exclude <- a.exclude.map(Some),
        out_dir <- a.out_dir,
        n <- a.n,
        epochs <- a.epochs,
        batch_size <- a.batch_size,
        lr_visual <- a.lr_visual,
        lr_text <- a.lr_text,
        milestones <- a.milestones.map(Some),
        seed <- a.seed,
        max_steps <- a.max_steps.map(Some),
        resume <- a.resume.map(Some),
    );
    if a.no_enrich {
        cfg.enrich = false;
    }
    if a.no_negative_sampling {
        cfg.negative_sampling = false;
    }
    if a.no_label_completion {
        cfg.label_completion = false;
    }
    let out = train(&cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out.checkpoint,
            "metrics": out.metrics,
            "steps": out.steps,
            "epochs": out.epochs_completed,
            "first_loss": out.losses.first(),
            "last_loss": out.losses.last(),
            "seconds": out.elapsed_secs,
        })
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let records = load_records(&a.records, RecordKind::Detection)?;
    let mut concepts = opt_lines(&a.concepts)?;
    concepts.extend(a.concept.iter().cloned());
    let concepts: Vec<String> = concepts.iter().map(|c| crate::dictionary::normalize_name(c)).collect();
    if concepts.is_empty() {
        return Err(Error::Config("no concepts given (use --concepts or --concept)".into()));
    }
    let unseen = opt_lines(&a.holdout)?;
    let dict = a.dict.as_deref().map(ConceptDictionary::load).transpose()?;
    let opts = EvalOptions {
        enrich: !a.no_enrich,
        score_threshold: a.score_thresh,
        ..EvalOptions::default()
    };
    let texts = concept_texts(&concepts, dict.as_ref(), opts.enrich);
    let detections = detect_all(&ck.detector, &records, &concepts, &texts, &opts)?;
    let mut report = report_from_detections(&records, &detections, &concepts, &texts, &unseen, &opts)?;
    report.config.checkpoint = Some(a.checkpoint.display().to_string());
    report.config.dataset = Some(a.records.display().to_string());
    report.save(&a.out)?;
    if let Some(p) = &a.plot {
        plot_pr_curves(&records, &detections, &concepts, p)?;
    }
    if let Some(p) = &a.detections {
        let rows = records.iter().zip(&detections).flat_map(|(r, ds)| {
            ds.iter().map(move |d| {
                serde_json::json!({"image_id": r.image_id, "box": d.bbox, "concept": d.concept, "score": d.score})
            })
        });
        crate::util::write_jsonl(p, rows)?;
    }
    println!(
        "mean AP@0.5 {:.4} (seen {}, unseen {}, random-box unseen {}) over {} images; report at {}",
        report.mean_ap,
        fmt_opt(report.seen_mean_ap),
        fmt_opt(report.unseen_mean_ap),
        fmt_opt(report.unseen_random_baseline_ap),
        report.num_images,
        a.out.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn provider_from_spec(spec: &str, dim: usize) -> Result<Box<dyn EmbeddingProvider>> {
    if spec == "trigram" {
        return Ok(Box::new(HashedTrigramProvider::default()));
    }
    match spec.split_once(':') {
        Some(("file", p)) => Ok(Box::new(TableProvider::load(Path::new(p))?)),
        Some(("http", rest)) => {
            let url = if rest.starts_with("//") { format!("http:{rest}") } else { rest.to_string() };
            Ok(Box::new(HttpProvider::new(url, dim, std::time::Duration::from_secs(30))))
        }
        _ => Err(Error::Config(format!(
            "unknown provider `{spec}`; expected trigram, file:PATH or http:URL"
        ))),
    }
}

fn run_enrich(a: EnrichArgs) -> Result<()> {
    let dict = ConceptDictionary::load(&a.dict)?;
    let provider = a.provider.as_deref().map(|s| provider_from_spec(s, a.provider_dim)).transpose()?;
    for name in &a.names {
        println!("{}", enrich(&dict, name, provider.as_deref()));
    }
    Ok(())
}
