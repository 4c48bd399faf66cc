use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use inkline::augment::{augment, preview_grid};
use inkline::convnets::{ConvArchSpec, ConvNet, Family};
use inkline::data::{
    derive_seed, filter_iam_style, generate_synth_dataset, load_manifest, load_samples, Charset,
    GlyphSet, Partition, Sample, SynthStyle,
};
use inkline::decode::{nearest_word, oov_report, Lexicon};
use inkline::evalkit::{bootstrap_with, levenshtein, ConfusionMatrix};
use inkline::imaging::{load_png, save_png, GrayImage};
use inkline::normalize::{normalize_pipeline, resize_only, NormalizeConfig, PadSide};
use inkline::seq2seq::{attention_csv, Seq2Seq};
use inkline::tensor::ParamStore;
use inkline::train::{evaluate, map_ordered, stats_csv, train_loop_with, EvalOptions, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Preprocess, RunConfig};
use crate::{Cli, CliError, Command, GlobalArgs};

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

/// Loads the config file and applies the global seed.
fn resolve(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    let seed = global.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    if global.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    cfg.train.lanes = global.jobs;
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config:\n{}", cfg.to_json());
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Normalize(a) => normalize_cmd(g, a),
        Command::Augment(a) => augment_cmd(g, a),
        Command::Synth(a) => synth_cmd(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Evaluate(a) => evaluate_cmd(g, a),
        Command::Decode(a) => decode_cmd(a),
        Command::Report(a) => report_cmd(g, a),
        Command::InspectModel(a) => inspect_cmd(a),
    }
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Directory of input PNGs.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub pad_side: Option<PadSide>,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn prepare(
    img: &GrayImage,
    mode: Preprocess,
    cfg: &NormalizeConfig,
) -> Result<GrayImage, CliError> {
    match mode {
        Preprocess::Normalize => normalize_pipeline(img, cfg),
        Preprocess::Resize => resize_only(img, cfg),
    }
    .map_err(|e| CliError::Usage(e.to_string()))
}

fn normalize_cmd(g: &GlobalArgs, a: &NormalizeArgs) -> Result<(), CliError> {
    let mut cfg = resolve(g)?;
    if let Some(h) = a.height {
        cfg.normalize.target_height = h;
    }
    if let Some(w) = a.width {
        cfg.normalize.target_width = w;
    }
    if let Some(p) = a.pad_side {
        cfg.normalize.pad_side = p;
    }
    cfg.normalize
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    log_config(&cfg);
    let files = list_pngs(&a.input)?;
    create_dir(&a.out)?;
    let results = map_ordered(&files, g.jobs, |_, path| -> Result<(), CliError> {
        let img = load_png(path).map_err(data_err)?;
        let out = prepare(&img, cfg.preprocess, &cfg.normalize)?;
        let name = path.file_name().expect("listed files have names");
        save_png(&out, a.out.join(name)).map_err(data_err)
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    eprintln!("normalized {} images into {}", files.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Input PNG.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of variants.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
}

fn augment_cmd(g: &GlobalArgs, a: &AugmentArgs) -> Result<(), CliError> {
    let cfg = resolve(g)?;
    cfg.augment
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    log_config(&cfg);
    let img = load_png(&a.input).map_err(data_err)?;
    create_dir(&a.out)?;
    let mut variants = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.augment.seed, 0, i as u64));
        let v = augment(&img, &cfg.augment, &mut rng);
        save_png(&v, a.out.join(format!("variant_{i:03}.png"))).map_err(data_err)?;
        variants.push(v);
    }
    let columns = (a.n as f64).sqrt().ceil() as usize;
    let grid = preview_grid(&variants, columns, 2, 0.5);
    save_png(&grid, a.out.join("grid.png")).map_err(data_err)?;
    eprintln!("wrote {} variants and grid.png to {}", a.n, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Glyph directory (`<hex codepoint>/<n>.png` plus classes.tsv); the
    /// built-in procedural set is used when absent.
    #[arg(long)]
    pub glyphs: Option<PathBuf>,
    /// Exemplars per character for the built-in set.
    #[arg(long, default_value_t = 4)]
    pub exemplars: usize,
    /// Word list, one word per line; random words are drawn when absent.
    #[arg(long)]
    pub words: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    /// COUT expansion factor (0 disables).
    #[arg(long, default_value_t = 8)]
    pub cout: usize,
    /// Maximum slant tangent applied to words.
    #[arg(long, default_value_t = 0.0)]
    pub slant: f64,
    /// Maximum baseline slope in radians.
    #[arg(long, default_value_t = 0.0)]
    pub slope: f64,
    /// Also write the glyph set used to this directory.
    #[arg(long)]
    pub save_glyphs: Option<PathBuf>,
}

fn random_words(glyphs: &GlyphSet, count: usize, seed: u64) -> Vec<String> {
    let mut chars: Vec<char> = glyphs.chars().filter(|c| c.is_lowercase()).collect();
    if chars.is_empty() {
        chars = glyphs.chars().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7, 0));
    (0..count)
        .map(|_| {
            let n = rng.random_range(3..=7);
            (0..n)
                .map(|_| chars[rng.random_range(0..chars.len())])
                .collect()
        })
        .collect()
}

fn synth_cmd(g: &GlobalArgs, a: &SynthArgs) -> Result<(), CliError> {
    let cfg = resolve(g)?;
    log_config(&cfg);
    let seed = cfg.seed;
    if !(a.slant >= 0.0 && a.slant < 1.0 && a.slope >= 0.0 && a.slope < 0.8) {
        return Err(CliError::Usage(
            "--slant must lie in [0, 1) and --slope in [0, 0.8)".into(),
        ));
    }
    let mut glyphs = match &a.glyphs {
        Some(dir) => GlyphSet::load_dir(dir).map_err(data_err)?,
        None => GlyphSet::builtin(a.exemplars.max(1), seed),
    };
    if glyphs.chars().next().is_none() {
        return Err(CliError::Data("glyph set is empty".into()));
    }
    if a.cout > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 8, 0));
        glyphs = glyphs.cout_augmented(a.cout, &mut rng);
    }
    if let Some(dir) = &a.save_glyphs {
        glyphs.save_dir(dir).map_err(data_err)?;
    }
    let words = match &a.words {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let w: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if w.is_empty() {
                return Err(CliError::Data(format!("{} holds no words", path.display())));
            }
            w
        }
        None => random_words(&glyphs, 200, seed),
    };
    let style = SynthStyle {
        slant: a.slant,
        slope: a.slope,
        ..SynthStyle::default()
    };
    let entries = generate_synth_dataset(
        &glyphs,
        &words,
        (a.train, a.val, a.test),
        seed,
        &style,
        &a.out,
    )
    .map_err(data_err)?;
    eprintln!(
        "wrote {} images and manifest.tsv to {}",
        entries.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn load_partition(
    data: &Path,
    partition: Partition,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<Vec<Sample>, CliError> {
    let entries = filter_iam_style(load_manifest(data.join("manifest.tsv")).map_err(data_err)?);
    let raw = load_samples(&entries, data, partition).map_err(data_err)?;
    let prepared = map_ordered(&raw, jobs, |_, s| {
        Ok(Sample {
            id: s.id.clone(),
            image: prepare(&s.image, cfg.preprocess, &cfg.normalize)?,
            text: s.text.clone(),
        })
    });
    prepared.into_iter().collect()
}

fn check_heights(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.model.image_height != cfg.normalize.target_height {
        return Err(CliError::Usage(format!(
            "model.image_height ({}) must equal normalize.target_height ({})",
            cfg.model.image_height, cfg.normalize.target_height
        )));
    }
    Ok(())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Augment(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn train_cmd(g: &GlobalArgs, a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve(g)?;
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    cfg.train.validate().map_err(train_err)?;
    cfg.model
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.normalize
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    check_heights(&cfg)?;
    log_config(&cfg);
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), &cfg.to_json())?;

    let train = load_partition(&a.data, Partition::Train, &cfg, g.jobs)?;
    let val = load_partition(&a.data, Partition::Validation, &cfg, g.jobs)?;
    let charset = Charset::from_texts(train.iter().chain(&val).map(|s| s.text.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Seq2Seq::new(cfg.model.clone(), charset.vocab(), &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    eprintln!(
        "training on {} samples, validating on {}, {} parameters",
        train.len(),
        val.len(),
        model.store().trainable_count()
    );
    let outcome = train_loop_with(&mut model, &train, &val, &cfg.train, |s| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  lr {:.6}  val_cer {:.4}  val_wer {:.4}  {:.1}s",
            s.epoch, s.loss, s.lr, s.val_cer, s.val_wer, s.seconds
        )
    })
    .map_err(train_err)?;
    write_file(&a.out.join("stats.csv"), &stats_csv(&outcome.history))?;
    model.save(a.out.join("best.ckpt")).map_err(data_err)?;
    println!(
        "best epoch {} with validation WER {:.4}{}",
        outcome.best_epoch,
        outcome.best_val_wer,
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub partition: Partition,
    /// Predictions TSV output (id, prediction, reference).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Directory for per-sample attention CSV files.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    pub max_len: usize,
}

const PREDS_HEADER: &str = "id\tprediction\treference";

fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn evaluate_cmd(g: &GlobalArgs, a: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = resolve(g)?;
    let model = Seq2Seq::load(&a.model).map_err(data_err)?;
    let mut cfg = cfg;
    cfg.model = model.config().clone();
    check_heights(&cfg)?;
    log_config(&cfg);
    let samples = load_partition(&a.data, a.partition, &cfg, g.jobs)?;
    let lex_path = a.lexicon.clone().or(cfg.lexicon.clone());
    let lexicon = match &lex_path {
        Some(p) => Some(Lexicon::from_file(p).map_err(data_err)?),
        None => None,
    };
    let opts = EvalOptions {
        max_len: a.max_len.max(1),
        lanes: g.jobs,
        lexicon: lexicon.as_ref(),
    };
    let report = evaluate(&model, &samples, &opts).map_err(train_err)?;
    let mut tsv = format!("{PREDS_HEADER}\n");
    for r in &report.records {
        tsv.push_str(&format!(
            "{}\t{}\t{}\n",
            sanitize(&r.id),
            sanitize(&r.prediction),
            sanitize(&r.reference)
        ));
        if let Some(err) = &r.error {
            eprintln!("{}: {err}", r.id);
        }
    }
    write_file(&a.out, &tsv)?;
    if let Some(dir) = &a.attention {
        create_dir(dir)?;
        for s in &samples {
            let d = model
                .greedy_decode(&s.image, opts.max_len)
                .map_err(data_err)?;
            let name = s.id.replace(['/', '\\'], "_").replace(".png", "");
            write_file(
                &dir.join(format!("{name}.csv")),
                &attention_csv(&d, model.vocab()),
            )?;
        }
    }
    println!("samples {}", report.records.len());
    println!("CER {:.6}", report.cer);
    println!("WER {:.6}", report.wer);
    Ok(())
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Predictions TSV (id, prediction, reference).
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

struct PredRow {
    id: String,
    prediction: String,
    reference: String,
}

fn read_preds(path: &Path) -> Result<Vec<PredRow>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PREDS_HEADER => {}
        _ => {
            return Err(CliError::Data(format!(
                "{}:1: expected header {PREDS_HEADER:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(CliError::Data(format!(
                "{}:{}: expected 3 tab-separated columns",
                path.display(),
                i + 2
            )));
        }
        rows.push(PredRow {
            id: cols[0].to_string(),
            prediction: cols[1].to_string(),
            reference: cols[2].to_string(),
        });
    }
    Ok(rows)
}

fn decode_cmd(a: &DecodeArgs) -> Result<(), CliError> {
    let lex = Lexicon::from_file(&a.lexicon).map_err(data_err)?;
    let rows = read_preds(&a.preds)?;
    let mut out = format!("{PREDS_HEADER}\n");
    let mut changed = 0;
    for r in &rows {
        let (word, _) = nearest_word(&r.prediction, &lex).map_err(data_err)?;
        changed += usize::from(word != r.prediction);
        out.push_str(&format!("{}\t{}\t{}\n", r.id, word, r.reference));
    }
    write_file(&a.out, &out)?;
    let refs: Vec<&str> = rows.iter().map(|r| r.reference.as_str()).collect();
    let oov = oov_report(&lex, &refs);
    println!("decoded {} predictions, {} changed", rows.len(), changed);
    println!(
        "reference OOV rate {:.4} ({} occurrences)",
        oov.rate, oov.count
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Predictions TSV (id, prediction, reference).
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Write a confusion matrix CSV (for single-character classification runs).
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

fn report_cmd(g: &GlobalArgs, a: &ReportArgs) -> Result<(), CliError> {
    let cfg = resolve(g)?;
    let rows = read_preds(&a.preds)?;
    if rows.is_empty() {
        return Err(CliError::Data("predictions file has no rows".into()));
    }
    let dist: Vec<f64> = rows
        .iter()
        .map(|r| levenshtein(&r.prediction, &r.reference) as f64)
        .collect();
    let len: Vec<f64> = rows
        .iter()
        .map(|r| r.reference.chars().count() as f64)
        .collect();
    let wrong: Vec<f64> = rows
        .iter()
        .map(|r| f64::from(u8::from(r.prediction != r.reference)))
        .collect();
    let cer_of = |idx: &[usize]| {
        let l: f64 = idx.iter().map(|&i| len[i]).sum();
        if l > 0.0 {
            idx.iter().map(|&i| dist[i]).sum::<f64>() / l
        } else {
            0.0
        }
    };
    let wer_of = |idx: &[usize]| idx.iter().map(|&i| wrong[i]).sum::<f64>() / idx.len() as f64;
    let all: Vec<usize> = (0..rows.len()).collect();
    if len.iter().sum::<f64>() == 0.0 {
        return Err(CliError::Data("all references are empty".into()));
    }
    println!("samples {}", rows.len());
    if rows.len() >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cer = bootstrap_with(rows.len(), a.resamples, a.confidence, &mut rng, cer_of)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let wer = bootstrap_with(rows.len(), a.resamples, a.confidence, &mut rng, wer_of)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        println!("CER {:.6} [{:.6}, {:.6}]", cer.point, cer.lower, cer.upper);
        println!("WER {:.6} [{:.6}, {:.6}]", wer.point, wer.lower, wer.upper);
    } else {
        println!("CER {:.6}", cer_of(&all));
        println!("WER {:.6}", wer_of(&all));
    }
    if let Some(path) = &a.confusion {
        let truth: Vec<&str> = rows.iter().map(|r| r.reference.as_str()).collect();
        let pred: Vec<&str> = rows.iter().map(|r| r.prediction.as_str()).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &pred).map_err(data_err)?;
        write_file(path, &cm.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub arch: Family,
    /// Input size as HxW.
    #[arg(long, value_parser = parse_dims)]
    pub input: (usize, usize),
    #[arg(long)]
    pub classes: usize,
    /// VGG blocks or ResNet modules.
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension {v:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn inspect_cmd(a: &InspectArgs) -> Result<(), CliError> {
    let (h, w) = a.input;
    let arch = match a.arch {
        Family::LeNet => ConvArchSpec::lenet_classifier(h, w, 0, 0, a.classes).with_default_dense(),
        Family::Vgg => ConvArchSpec::vgg(a.blocks, h, w, Some(a.classes)),
        Family::ResNet => ConvArchSpec::resnet(a.blocks, h, w, Some(a.classes)),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = ConvNet::build(&arch, &mut store, "net", &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "{:<16} {:<22} {:<18} {:>12}",
        "layer", "type", "output shape", "params"
    );
    for row in net.summary() {
        println!(
            "{:<16} {:<22} {:<18} {:>12}",
            row.name,
            row.kind,
            row.shape_string(),
            thousands(row.params)
        );
    }
    println!("total parameters: {}", thousands(net.param_count()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims() {
        assert_eq!(parse_dims("28x28"), Ok((28, 28)));
        assert_eq!(parse_dims("64X128"), Ok((64, 128)));
        assert!(parse_dims("28").is_err());
        assert!(parse_dims("ax2").is_err());
    }

    #[test]
    fn grouping() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(8531242), "8,531,242");
    }
}
