//! The `compolab` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::cogsynth::{generate, read_jsonl, Grammar, Vocab, SPLIT_FILES};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{build_report, export_hidden_states, read_predictions, translate_rows};
use crate::gradcheck::grad_check;
use crate::trainer::{encode_rows, model_from_checkpoint, train, Trainer};
use crate::transformer::Model;

/// Composition-weight gradients must agree to this relative error.
pub const COMPOSITION_TOLERANCE: f64 = 1e-6;
/// Whole-model gradients must agree to this relative error.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "compolab", version, about = "Train and evaluate composed-layer Transformers on a synthetic compositional benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline, shared or per_layer.
        #[arg(long)]
        mode: Option<String>,
        /// sa, ff or both.
        #[arg(long)]
        collect: Option<String>,
        /// Encoder layer range `a..b` (1-based, inclusive).
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint up to `max_steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode the cg-test split and report CTER and exact match.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        report: PathBuf,
        /// Score these predictions (JSON lines of `{"id", "tokens"}`) instead of decoding.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Export composition weights and hidden states.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[arg(long)]
        hidden_out: Option<PathBuf>,
        /// Corpus-format JSON lines whose sources are encoded.
        #[arg(long)]
        probe_file: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Add a constant to every analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
}

fn resolve(base: RunConfig, cfg: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut c = base;
    if let Some(p) = &cfg.config {
        c.apply_file(p)?;
    }
    c.apply_overrides(&cfg.overrides)?;
    c.apply_overrides(extra)?;
    c.validate()?;
    Ok(c)
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Vocab::from_text(&text)
}

fn data_vocabs(dir: &Path) -> Result<(Vocab, Vocab)> {
    Ok((read_vocab(&dir.join("src.vocab"))?, read_vocab(&dir.join("tgt.vocab"))?))
}

fn check_vocab(side: &str, ckpt: &[String], data: &Vocab) -> Result<()> {
    if ckpt.is_empty() {
        return Err(Error::Data(format!("checkpoint records no {side} vocabulary")));
    }
    if ckpt.len() != data.len() {
        return Err(Error::Data(format!(
            "{side} vocabulary mismatch: checkpoint has {} tokens, data has {}",
            ckpt.len(),
            data.len()
        )));
    }
    if let Some((i, (a, b))) = ckpt.iter().zip(data.tokens()).enumerate().find(|(_, (a, b))| a != b) {
        return Err(Error::Data(format!("{side} vocabulary mismatch at id {i}: checkpoint has {a:?}, data has {b:?}")));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let grammar = Grammar::new(cfg.grammar)?;
    let corpus = generate(&cfg.split, &grammar)?;
    corpus.write(out, &grammar)?;
    cfg.write_echo(out)?;
    let r = &corpus.report;
    Ok(format!(
        "wrote {} train, {} valid, {} test, {} cg-test rows ({} held-out compounds, min held-out atom count {}) to {}",
        r.train_rows,
        r.valid_rows,
        r.test_rows,
        r.cg_test_rows,
        r.held_out_compounds,
        r.min_held_out_atom_count,
        out.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<String> {
    let (src_vocab, tgt_vocab) = data_vocabs(data)?;
    let rows = read_jsonl(&data.join(SPLIT_FILES[0]))?;
    let examples = encode_rows(&rows, &src_vocab, &tgt_vocab)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            check_vocab("source", &ckpt.header.src_vocab, &src_vocab)?;
            check_vocab("target", &ckpt.header.tgt_vocab, &tgt_vocab)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.config.max_steps = cfg.train.max_steps;
            t
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.src_vocab = src_vocab.len();
            mc.tgt_vocab = tgt_vocab.len();
            Trainer::new(Model::new(mc, cfg.train.seed)?, cfg.train.clone())?
        }
    };
    let mut echo = cfg.clone();
    echo.model = trainer.model.config().clone();
    echo.train = trainer.config.clone();
    echo.write_echo(out)?;
    let outputs = train(&mut trainer, &examples, (src_vocab.tokens(), tgt_vocab.tokens()), out)?;
    let ckpt = Checkpoint::load(&outputs.final_checkpoint)?;
    let last = outputs.losses.last().map_or(f64::NAN, |s| s.loss);
    Ok(format!(
        "trained to step {} (final loss {last:.6}); {} composition scalars; checkpoint {}",
        trainer.step,
        ckpt.composition_scalars(),
        outputs.final_checkpoint.display()
    ))
}

pub fn eval_cmd(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    data: &Path,
    report_dir: &Path,
    predictions: Option<&Path>,
) -> Result<String> {
    let cg_rows = read_jsonl(&data.join(SPLIT_FILES[3]))?;
    let mut echo = cfg.clone();
    let report = if let Some(p) = predictions {
        let preds = read_predictions(p)?;
        let report = build_report(&preds, &cg_rows, None, 0)?;
        report.write(report_dir, Some(&preds))?;
        report
    } else {
        let path = ckpt.ok_or_else(|| Error::Config("eval needs --ckpt or --predictions".into()))?;
        let ckpt = Checkpoint::load(path)?;
        let (src_vocab, tgt_vocab) = data_vocabs(data)?;
        check_vocab("source", &ckpt.header.src_vocab, &src_vocab)?;
        check_vocab("target", &ckpt.header.tgt_vocab, &tgt_vocab)?;
        let model = model_from_checkpoint(&ckpt)?;
        echo.model = model.config().clone();
        echo.train = ckpt.header.train.clone();
        let max_len = cfg.decode_max_len;
        let (preds, truncated) = translate_rows(&model, &cg_rows, &src_vocab, &tgt_vocab, cfg.beam, max_len)?;
        let test_path = data.join(SPLIT_FILES[2]);
        let test_rows = if test_path.exists() { read_jsonl(&test_path)? } else { Vec::new() };
        let test_preds = if test_rows.is_empty() {
            None
        } else {
            Some(translate_rows(&model, &test_rows, &src_vocab, &tgt_vocab, cfg.beam, max_len)?.0)
        };
        let test = test_preds.as_deref().map(|p| (p, test_rows.as_slice()));
        let report = build_report(&preds, &cg_rows, test, truncated)?;
        report.write(report_dir, Some(&preds))?;
        report
    };
    echo.write_echo(report_dir)?;
    Ok(serde_json::to_string(&report)?)
}

pub fn inspect_cmd(ckpt: &Path, weights_out: Option<&Path>, hidden_out: Option<&Path>, probe: Option<&Path>) -> Result<String> {
    let ck = Checkpoint::load(ckpt)?;
    let model = model_from_checkpoint(&ck)?;
    let mut notes = Vec::new();
    let mut echo = RunConfig { model: model.config().clone(), train: ck.header.train.clone(), ..RunConfig::default() };
    echo.model.src_vocab = model.config().src_vocab;
    if let Some(dir) = weights_out {
        match model.composition_table() {
            None => notes.push("baseline checkpoint: no composition table to export".to_string()),
            Some(table) => {
                fs::create_dir_all(dir)?;
                let (k, v) = table.to_csv()?;
                fs::write(dir.join("keys.csv"), k)?;
                fs::write(dir.join("values.csv"), v)?;
                echo.write_echo(dir)?;
                notes.push(format!(
                    "wrote {}x{} key and value weight matrices to {}",
                    table.width(),
                    table.dec_layers,
                    dir.display()
                ));
            }
        }
    }
    if let Some(out) = hidden_out {
        let probe = probe.ok_or_else(|| Error::Config("--hidden-out needs --probe-file".into()))?;
        if ck.header.src_vocab.is_empty() {
            return Err(Error::Data("checkpoint records no source vocabulary".into()));
        }
        let vocab = Vocab::new(ck.header.src_vocab.clone())?;
        let inputs = read_jsonl(probe)?
            .iter()
            .map(|r| vocab.encode(&r.src))
            .collect::<Result<Vec<_>>>()?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
            echo.write_echo(dir)?;
        }
        let rows = export_hidden_states(&model, &inputs, fs::File::create(out)?)?;
        notes.push(format!("wrote {rows} hidden-state rows to {}", out.display()));
    }
    if notes.is_empty() {
        notes.push("nothing requested; pass --weights-out and/or --hidden-out".into());
    }
    Ok(notes.join("\n"))
}

/// Outcome of [`gradcheck_cmd`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub composition_rel_error: Option<f64>,
    pub worst: String,
    pub params: usize,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MODEL_TOLERANCE && self.composition_rel_error.is_none_or(|e| e < COMPOSITION_TOLERANCE)
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig, seed: u64, corrupt: Option<f64>) -> Result<GradcheckOutcome> {
    let gc = &cfg.gradcheck;
    let mut mc = cfg.model.clone();
    mc.src_vocab = gc.vocab;
    mc.tgt_vocab = gc.vocab;
    mc.dropout = 0.0;
    let mut model = Model::new(mc, seed)?;
    let params = model.params().numel();
    if params > gc.max_params {
        return Err(Error::Config(format!(
            "model has {params} parameters; gradcheck is limited to {} (finite differences would be too slow)",
            gc.max_params
        )));
    }
    if gc.vocab < 4 || gc.src_len == 0 || gc.tgt_len == 0 || gc.batch == 0 {
        return Err(Error::Config("gradcheck needs vocab >= 4 and nonzero lengths and batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |n: usize| (0..n).map(|_| rng.random_range(3..gc.vocab)).collect::<Vec<usize>>();
    let batch: Vec<(Vec<usize>, Vec<usize>)> = (0..gc.batch).map(|_| (sample(gc.src_len), sample(gc.tgt_len))).collect();
    let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let layout = model.clone();
    let all: Vec<_> = model.params().ids().collect();
    let full = grad_check(model.params_mut(), &all, corrupt, |g| layout.loss_graph(g, &pairs, 0.0, &mut None))?;
    let comp = match model.composition_param_ids() {
        Some((k, v)) => Some(
            grad_check(model.params_mut(), &[k, v], corrupt, |g| layout.loss_graph(g, &pairs, 0.0, &mut None))?
                .max_rel_error,
        ),
        None => None,
    };
    let worst = full.worst.map_or("-".into(), |(n, i)| format!("{n}[{i}]"));
    Ok(GradcheckOutcome { max_rel_error: full.max_rel_error, composition_rel_error: comp, worst, params })
}

fn dispatch(cli: Cli) -> Result<(String, i32)> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let c = resolve(RunConfig::default(), &cfg, &[])?;
            Ok((gen_data(&c, &out)?, 0))
        }
        Command::Train { cfg, data, out, mode, collect, layers, seed, resume } => {
            let mut extra = Vec::new();
            extra.extend(mode.map(|v| format!("mode={v}")));
            extra.extend(collect.map(|v| format!("collect={v}")));
            extra.extend(layers.map(|v| format!("layers={v}")));
            extra.extend(seed.map(|v| format!("seed={v}")));
            let c = resolve(RunConfig::default(), &cfg, &extra)?;
            Ok((train_cmd(&c, &data, &out, resume.as_deref())?, 0))
        }
        Command::Eval { cfg, ckpt, data, beam, report, predictions } => {
            let extra: Vec<String> = beam.map(|b| format!("beam={b}")).into_iter().collect();
            let c = resolve(RunConfig::default(), &cfg, &extra)?;
            Ok((eval_cmd(&c, ckpt.as_deref(), &data, &report, predictions.as_deref())?, 0))
        }
        Command::Inspect { ckpt, weights_out, hidden_out, probe_file } => Ok((
            inspect_cmd(&ckpt, weights_out.as_deref(), hidden_out.as_deref(), probe_file.as_deref())?,
            0,
        )),
        Command::Gradcheck { cfg, seed, corrupt } => {
            let c = resolve(RunConfig::gradcheck_defaults(), &cfg, &[])?;
            let o = gradcheck_cmd(&c, seed, corrupt)?;
            let comp = o.composition_rel_error.map_or("n/a (baseline)".into(), |e| format!("{e:.3e}"));
            let msg = format!(
                "parameters: {}\nmax relative error: {:.3e} (worst {})\ncomposition max relative error: {comp}\n{}",
                o.params,
                o.max_rel_error,
                o.worst,
                if o.passed() { "PASS" } else { "FAIL" }
            );
            Ok((msg, if o.passed() { 0 } else { 3 }))
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok((msg, code)) => {
            println!("{msg}");
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
