// SPDX-License-Identifier: MIT OR Apache-2.0

//! The six pipeline commands. Each reads its inputs from the output
//! directory (verifying recorded digests), writes its artifacts next to them
//! and finishes with a manifest under `manifests/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use mindpatch::adapters::AdapterSet;
use mindpatch::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use mindpatch::model::{generate, pretrain_lm, Decoding, Injection, Weights};
use mindpatch::steering::{replay_stop, select_intervention_layer, steer_train};
use mindpatch::taskgen::{
    corpus_digest, gen_negotiation, gen_persuasion, instruction, make_queries, pretrain_sequences, read_jsonl, split,
    write_jsonl, DialogueSample, Scenario, StateKind, Vocab, PLACEHOLDER,
};
use mindpatch::tracing::{
    causal_trace_sweep, chance_level, null_features, train_linear_probe, v_usable_info, Encoder, TraceReport,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Config, LayerChoice, TraceSection};
use crate::scoring::{score_response, Scores};
use crate::store::{Recorder, RunManifest, Store};
use crate::CliError;

pub const TRAIN: &str = "corpus/train.jsonl";
pub const VAL: &str = "corpus/val.jsonl";
pub const EVAL: &str = "corpus/eval.jsonl";
pub const VOCAB: &str = "corpus/vocab.txt";
pub const SPLIT: &str = "corpus/split.json";
pub const MODEL: &str = "model/model.ckpt";
pub const PRETRAIN_LOG: &str = "model/pretrain.json";
pub const PRETRAIN_CSV: &str = "model/losses.csv";
pub const ADAPTERS: &str = "steer/adapters.ckpt";
pub const HISTORY: &str = "steer/history.json";
pub const HISTORY_CSV: &str = "steer/history.csv";
/// Post-steer validation report, the input of automatic layer selection.
pub const POST_VAL: &str = "steer/post_val.json";
pub const RESPONSES: &str = "generate/responses.jsonl";
pub const GEN_EVAL: &str = "generate/eval.json";
pub const GEN_EVAL_CSV: &str = "generate/eval.csv";
pub const PROBE: &str = "probe/probe.json";
pub const PROBE_CSV: &str = "probe/probe.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenCorpus,
    Pretrain,
    Trace,
    Steer,
    Generate,
    Probe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Pretrain => "pretrain",
            Command::Trace => "trace",
            Command::Steer => "steer",
            Command::Generate => "generate",
            Command::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub layers: Option<Vec<usize>>,
}

/// Loads the config, applies command-line overrides and runs `cmd` over the
/// locked output directory.
pub fn run(cmd: Command, opts: &Options) -> Result<RunManifest, CliError> {
    let mut cfg = Config::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.run
            .as_mut()
            .ok_or_else(|| CliError::Config("missing section [run]".into()))?
            .seed = seed;
    }
    if let Some(layers) = &opts.layers {
        cfg.trace = Some(TraceSection { layers: layers.clone() });
    }
    let store = Store::open(&opts.out)?;
    run_in(cmd, &cfg, &store)
}

pub fn run_in(cmd: Command, cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    match cmd {
        Command::GenCorpus => gen_corpus(cfg, store),
        Command::Pretrain => pretrain(cfg, store),
        Command::Trace => trace(cfg, store),
        Command::Steer => steer(cfg, store),
        Command::Generate => generate_cmd(cfg, store),
        Command::Probe => probe(cfg, store),
    }
}

fn echo(cfg: &Config) -> Result<Value, CliError> {
    Ok(serde_json::to_value(cfg)?)
}

fn recorder(cmd: Command, cfg: &Config) -> Result<Recorder, CliError> {
    let mut rec = Recorder::new(cmd.name());
    rec.seed("run", cfg.seed()?);
    Ok(rec)
}

#[derive(Serialize, Deserialize)]
struct SplitInfo {
    scenario: Scenario,
    n: usize,
    seed: u64,
    ratios: [f64; 3],
    sizes: [usize; 3],
    corpus_digest: String,
    eval_stages: BTreeMap<String, usize>,
}

fn gen_corpus(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    let mut rec = recorder(Command::GenCorpus, cfg)?;
    let run = cfg.run()?;
    let c = cfg.corpus()?;
    let ratios = cfg.ratios()?;
    let corpus = match run.scenario {
        Scenario::Negotiation => gen_negotiation(run.seed, c.n),
        Scenario::Persuasion => gen_persuasion(run.seed, c.n),
    };
    let digest = corpus_digest(&corpus);
    let sp = split(corpus, ratios, run.seed)?;
    for (rel, part) in [(TRAIN, &sp.train), (VAL, &sp.val), (EVAL, &sp.eval)] {
        write_jsonl(&store.prepare(rel)?, part)?;
        rec.output(store, rel)?;
    }
    store.write_text(VOCAB, &Vocab::standard().to_file_string())?;
    rec.output(store, VOCAB)?;
    let mut eval_stages = BTreeMap::new();
    for s in &sp.eval {
        *eval_stages.entry(format!("{:?}", s.stage).to_lowercase()).or_default() += 1;
    }
    store.write_json(
        SPLIT,
        &SplitInfo {
            scenario: run.scenario,
            n: c.n,
            seed: run.seed,
            ratios: [ratios.train, ratios.val, ratios.eval],
            sizes: [sp.train.len(), sp.val.len(), sp.eval.len()],
            corpus_digest: digest.to_string(),
            eval_stages,
        },
    )?;
    rec.output(store, SPLIT)?;
    rec.finish(store, echo(cfg)?)
}

/// Makes sure the corpus in `store` belongs to this config, generating it if
/// absent.
fn ensure_corpus(cfg: &Config, store: &Store) -> Result<(), CliError> {
    match store.manifest(Command::GenCorpus.name())? {
        None if !store.exists(TRAIN) => gen_corpus(cfg, store).map(|_| ()),
        None => Ok(()),
        Some(m) => {
            let want = echo(cfg)?;
            for key in ["run", "corpus"] {
                if m.config.get(key) != want.get(key) {
                    return Err(CliError::Contract(format!(
                        "the corpus in {} was generated with a different [{key}] section",
                        store.root().display()
                    )));
                }
            }
            Ok(())
        }
    }
}

fn read_split(rec: &mut Recorder, store: &Store, rel: &str) -> Result<Vec<DialogueSample>, CliError> {
    let samples = read_jsonl(&rec.input(store, rel)?)?;
    if samples.is_empty() {
        return Err(CliError::Contract(format!("{rel} is empty")));
    }
    Ok(samples)
}

fn read_model(rec: &mut Recorder, store: &Store) -> Result<Weights<f32>, CliError> {
    Ok(load_model(&rec.input(store, MODEL)?)?.0)
}

#[derive(Serialize)]
struct PretrainLog {
    sequences: usize,
    initial_loss: f64,
    final_loss: f64,
    model_digest: String,
    losses: Vec<f64>,
}

fn pretrain(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    let model_cfg = cfg.model_config()?;
    let schedule = cfg.schedule()?;
    ensure_corpus(cfg, store)?;
    let mut rec = recorder(Command::Pretrain, cfg)?;
    let train = read_split(&mut rec, store, TRAIN)?;
    let seqs = pretrain_sequences(&train, schedule.seed)?;
    let out = pretrain_lm(model_cfg, &seqs, schedule)?;
    let digest = save_model(&store.prepare(MODEL)?, &out.weights, schedule.seed)?;
    rec.output(store, MODEL)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    store.write_text(PRETRAIN_CSV, &csv)?;
    rec.output(store, PRETRAIN_CSV)?;
    store.write_json(
        PRETRAIN_LOG,
        &PretrainLog {
            sequences: seqs.len(),
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            model_digest: digest.to_string(),
            losses: out.losses,
        },
    )?;
    rec.output(store, PRETRAIN_LOG)?;
    rec.note(format!(
        "pretraining loss {:.4} -> {:.4}",
        out.initial_loss, out.final_loss
    ));
    rec.finish(store, echo(cfg)?)
}

/// Writes `<prefix>.json`, `<prefix>.csv` and `<prefix>_table.csv`.
fn write_report(store: &Store, rec: &mut Recorder, prefix: &str, report: &TraceReport) -> Result<(), CliError> {
    let files = [
        (format!("{prefix}.json"), serde_json::to_string_pretty(report)? + "\n"),
        (format!("{prefix}.csv"), report.to_csv()),
        (format!("{prefix}_table.csv"), report.to_table_csv()),
    ];
    for (rel, text) in files {
        store.write_text(&rel, &text)?;
        rec.output(store, &rel)?;
    }
    Ok(())
}

fn trace(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    let layers = cfg.trace_layers()?;
    let mut rec = recorder(Command::Trace, cfg)?;
    let w = read_model(&mut rec, store)?;
    for &l in &layers {
        w.config
            .check_layer(l)
            .map_err(|_| CliError::Config(format!("trace layer {l} is out of range")))?;
    }
    for (name, rel) in [("val", VAL), ("eval", EVAL)] {
        let samples = read_split(&mut rec, store, rel)?;
        let report = causal_trace_sweep(&Encoder::new(&w, None), &w, &samples, &layers)?;
        write_report(store, &mut rec, &format!("trace/{name}"), &report)?;
    }
    rec.finish(store, echo(cfg)?)
}

/// Pre/post accuracy per cell, both reports over the same samples.
fn paired_curves(pre: &TraceReport, post: &TraceReport) -> String {
    let mut s = String::from("layer,state,agent,pre,post,chance\n");
    for c in &pre.cells {
        if let Some(p) = post.cell(c.layer, c.state, c.agent) {
            let layer = c.layer.map_or("base".to_owned(), |l| l.to_string());
            let _ = writeln!(
                s,
                "{layer},{},{},{},{},{}",
                c.state, c.agent, c.accuracy, p.accuracy, c.chance
            );
        }
    }
    s
}

fn steer(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    let scfg = cfg.steer_config()?;
    let layers = cfg.trace_layers()?;
    let mut rec = recorder(Command::Steer, cfg)?;
    let w = read_model(&mut rec, store)?;
    if w.config != cfg.model_config()? {
        return Err(CliError::Contract(
            "checkpoint architecture differs from the [model] section".into(),
        ));
    }
    let train = read_split(&mut rec, store, TRAIN)?;
    let val = read_split(&mut rec, store, VAL)?;
    let eval = read_split(&mut rec, store, EVAL)?;
    let fresh = AdapterSet::new(w.config, scfg.adapter.clone(), scfg.seed)?;
    let out = steer_train(&w, fresh, &w, &train, &val, &scfg)?;
    let h = &out.history;
    if replay_stop(&scfg.stop, &h.val_losses()) != Some((h.epochs.len(), h.stop_reason)) {
        return Err(CliError::Contract(
            "recorded stop reason disagrees with the stopping rule".into(),
        ));
    }

    save_adapters(&store.prepare(ADAPTERS)?, &out.adapters, scfg.seed)?;
    rec.output(store, ADAPTERS)?;
    store.write_json(HISTORY, h)?;
    rec.output(store, HISTORY)?;
    let mut csv = format!("epoch,train_loss,val_loss,steps\n0,,{},0\n", h.initial_val_loss);
    for e in &h.epochs {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.steps);
    }
    store.write_text(HISTORY_CSV, &csv)?;
    rec.output(store, HISTORY_CSV)?;
    rec.note(format!(
        "stopped after {} epochs ({:?}); adapters from epoch {}",
        h.epochs.len(),
        h.stop_reason,
        h.best_epoch
    ));

    let base = Encoder::new(&w, None);
    let tuned = Encoder::new(&w, Some(&out.adapters));
    for (name, samples) in [("val", &val), ("eval", &eval)] {
        let pre = causal_trace_sweep(&base, &w, samples, &layers)?;
        let post = causal_trace_sweep(&tuned, &w, samples, &layers)?;
        write_report(store, &mut rec, &format!("steer/pre_{name}"), &pre)?;
        write_report(store, &mut rec, &format!("steer/post_{name}"), &post)?;
        let rel = format!("steer/curves_{name}.csv");
        store.write_text(&rel, &paired_curves(&pre, &post))?;
        rec.output(store, &rel)?;
    }
    rec.finish(store, echo(cfg)?)
}

/// One generated response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub sample_id: u64,
    pub stage: String,
    pub agent: u8,
    pub condition: String,
    pub response: String,
    pub scores: Scores,
}

/// Aggregate generation scores per condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub layer: usize,
    pub layer_choice: String,
    pub agent: u8,
    pub n: usize,
    pub conditions: BTreeMap<String, Scores>,
    pub notes: Vec<String>,
}

/// Conditions: `steered` injects tuned-encoder activations, `unsteered`
/// injects base-encoder activations through the same patch, `text` prompts
/// the decoder with the dialogue itself.
pub const CONDITIONS: [&str; 3] = ["steered", "unsteered", "text"];

fn generate_cmd(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    let g = cfg.generate()?.clone();
    let mut rec = recorder(Command::Generate, cfg)?;
    let has_adapters = store.exists(ADAPTERS);
    let (layer, choice) = match g.layer {
        LayerChoice::Auto(_) if !has_adapters => {
            return Err(CliError::Contract(
                "layer = \"auto\" needs the adapters and validation report written by `steer`".into(),
            ))
        }
        LayerChoice::Auto(_) => {
            let report: TraceReport = serde_json::from_str(
                &std::fs::read_to_string(rec.input(store, POST_VAL)?)
                    .map_err(|e| CliError::io(&store.path(POST_VAL), e))?,
            )?;
            (select_intervention_layer(&report)?, "auto".to_owned())
        }
        LayerChoice::Fixed(l) => (l, "fixed".to_owned()),
    };
    let w = read_model(&mut rec, store)?;
    w.config
        .check_layer(layer)
        .map_err(|_| CliError::Config(format!("generate.layer {layer} is out of range")))?;
    let adapters = if has_adapters {
        Some(load_adapters(&rec.input(store, ADAPTERS)?)?.0)
    } else {
        rec.note("no adapters found: the steered condition uses the base encoder");
        None
    };
    let eval = read_split(&mut rec, store, EVAL)?;
    if instruction(&eval[0], g.agent).is_none() {
        return Err(CliError::Config(format!(
            "the {} scenario has no task for agent {}",
            eval[0].scenario, g.agent
        )));
    }

    let v = Vocab::standard();
    let stop = v.id(".");
    let base = Encoder::new(&w, None);
    let tuned = Encoder::new(&w, adapters.as_ref());
    let per_sample: Vec<Result<Vec<ResponseRecord>, CliError>> = eval
        .par_iter()
        .map(|s| {
            let dialogue = s.stage_tokens();
            let instr = instruction(s, g.agent).expect("checked above");
            let mut patched_prompt = vec![PLACEHOLDER; dialogue.len()];
            patched_prompt.extend(&instr);
            let mut out = Vec::with_capacity(CONDITIONS.len());
            for cond in CONDITIONS {
                let response = match cond {
                    "text" => {
                        let prompt = [dialogue.as_slice(), &instr].concat();
                        generate(&w, &prompt, g.max_new, Decoding::Greedy, None, Some(stop))?
                    }
                    _ => {
                        let enc = if cond == "steered" { &tuned } else { &base };
                        let p = enc.capture(&dialogue, layer)?;
                        let inj = Injection {
                            layer,
                            start: 0,
                            payload: &p.grid,
                        };
                        generate(&w, &patched_prompt, g.max_new, Decoding::Greedy, Some(inj), Some(stop))?
                    }
                };
                out.push(ResponseRecord {
                    sample_id: s.id,
                    stage: format!("{:?}", s.stage).to_lowercase(),
                    agent: g.agent,
                    condition: cond.to_owned(),
                    response: v.detokenize(&response),
                    scores: score_response(s, g.agent, &response),
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }

    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    store.write_text(RESPONSES, &jsonl)?;
    rec.output(store, RESPONSES)?;
    let mut conditions = BTreeMap::new();
    for cond in CONDITIONS {
        let scores: Vec<Scores> = records
            .iter()
            .filter(|r| r.condition == cond)
            .map(|r| r.scores)
            .collect();
        conditions.insert(cond.to_owned(), Scores::mean(&scores));
    }
    let report = GenerationReport {
        layer,
        layer_choice: choice,
        agent: g.agent,
        n: eval.len(),
        conditions,
        notes: vec!["greedy decoding; responses end at the first full stop or max_new tokens".into()],
    };
    store.write_json(GEN_EVAL, &report)?;
    rec.output(store, GEN_EVAL)?;
    let mut csv = String::from("condition,n,tom,coherence,strategy\n");
    for (cond, s) in &report.conditions {
        let _ = writeln!(csv, "{cond},{},{},{},{}", report.n, s.tom, s.coherence, s.strategy);
    }
    store.write_text(GEN_EVAL_CSV, &csv)?;
    rec.output(store, GEN_EVAL_CSV)?;
    rec.finish(store, echo(cfg)?)
}

/// One cell of the probing heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub state: StateKind,
    pub accuracy: f64,
    pub std_error: f64,
    pub chance: f64,
    pub v_info: f64,
    pub v_info_raw: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub agent: u8,
    pub n_samples: usize,
    pub rows: Vec<ProbeRow>,
    /// Per state: share of layer pairs on which v_info and accuracy order the
    /// two layers the same way.
    pub ordering_agreement: BTreeMap<String, f64>,
}

/// Share of pairs `(i, j)` where `a` and `b` order `i` and `j` alike (ties
/// agree only with ties).
pub fn ordering_agreement(a: &[f64], b: &[f64]) -> f64 {
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            agree += (a[i].partial_cmp(&a[j]) == b[i].partial_cmp(&b[j])) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

fn probe(cfg: &Config, store: &Store) -> Result<RunManifest, CliError> {
    const AGENT: u8 = 1;
    let pcfg = cfg.probe_config()?;
    let layers = cfg.trace_layers()?;
    let scenario = cfg.run()?.scenario;
    let mut rec = recorder(Command::Probe, cfg)?;
    let w = read_model(&mut rec, store)?;
    for &l in &layers {
        w.config
            .check_layer(l)
            .map_err(|_| CliError::Config(format!("probe layer {l} is out of range")))?;
    }
    let samples = read_split(&mut rec, store, TRAIN)?;
    let enc = Encoder::new(&w, None);

    // features[sample][layer index], labels[kind][sample]
    type Row = (Vec<Vec<f64>>, Vec<(usize, usize)>);
    let per_sample: Vec<Result<Row, CliError>> = samples
        .par_iter()
        .map(|s| {
            let pooled = enc
                .capture_layers(&s.stage_tokens(), &layers)?
                .iter()
                .map(|p| p.mean_pooled())
                .collect();
            let labels = StateKind::ALL
                .iter()
                .map(|&k| {
                    let q = make_queries(s, s.stage)?
                        .into_iter()
                        .find(|q| q.kind == k && q.agent == AGENT)
                        .expect("one query per kind and agent");
                    Ok((q.gold, q.candidates.len()))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok((pooled, labels))
        })
        .collect();
    let mut features = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for r in per_sample {
        let (f, l) = r?;
        features.push(f);
        labels.push(l);
    }

    let mut rows = Vec::new();
    let mut ordering_agreement_map = BTreeMap::new();
    for (ki, &kind) in StateKind::ALL.iter().enumerate() {
        let y: Vec<usize> = labels.iter().map(|l| l[ki].0).collect();
        let k = labels[0][ki].1;
        let null = train_linear_probe(&null_features(y.len()), &y, k, &pcfg)?;
        let mut accs = Vec::new();
        let mut vs = Vec::new();
        for (li, &layer) in layers.iter().enumerate() {
            let x: Vec<Vec<f64>> = features.iter().map(|f| f[li].clone()).collect();
            let fit = train_linear_probe(&x, &y, k, &pcfg)?;
            let v = v_usable_info(&fit, &null)?;
            accs.push(fit.accuracy);
            vs.push(v.nats);
            rows.push(ProbeRow {
                layer,
                state: kind,
                accuracy: fit.accuracy,
                std_error: fit.std_error(),
                chance: chance_level(scenario, kind, AGENT),
                v_info: v.nats,
                v_info_raw: v.raw,
                clamped: v.clamped,
            });
        }
        ordering_agreement_map.insert(kind.name().to_owned(), ordering_agreement(&vs, &accs));
    }
    let report = ProbeReport {
        agent: AGENT,
        n_samples: samples.len(),
        rows,
        ordering_agreement: ordering_agreement_map,
    };
    store.write_json(PROBE, &report)?;
    rec.output(store, PROBE)?;
    let mut csv = String::from("layer,state,accuracy,std_error,chance,v_info,v_info_raw,clamped\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.layer, r.state, r.accuracy, r.std_error, r.chance, r.v_info, r.v_info_raw, r.clamped
        );
    }
    store.write_text(PROBE_CSV, &csv)?;
    rec.output(store, PROBE_CSV)?;
    rec.note("linear probes on mean-pooled encoder activations of the train split, agent 1 labels");
    rec.finish(store, echo(cfg)?)
}
