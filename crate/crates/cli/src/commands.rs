use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use docre_core::corpus::{
    check_max_len, parse_corpus, parse_corpus_with, read_alias_lexicon, synth_corpus, write_corpus,
    write_corpus_annotated, CategoryMix, DocAnnotations, PairEvidence, PairPrediction, SynthConfig,
};
use docre_core::fusion::{decide, score_document, tau_instances, tune_tau};
use docre_core::metrics::{evaluate, train_keys, Fact, PairKey, Predictions};
use docre_core::rules::{category_histogram, pair_categories, with_silver_evidence};
use docre_core::trainer::train;
use docre_core::{
    Category, CorefProvider, Document, Error, EvidenceSource, IdentityProvider, InferenceMode, LexiconProvider, Model,
    RelationVocab, TokenVocab,
};
use serde_json::json;

use crate::{
    check_output, read, write, CliError, Command, CorefArg, EvalArgs, EvidenceArgs, InferArgs, ReportArgs, RulesArgs,
    RunConfig, SynthArgs, TrainArgs, TuneTauArgs, ValidateArgs,
};

type Out<'a> = &'a mut dyn Write;

pub(crate) fn dispatch(cmd: &Command, cfg: &RunConfig, seed: u64, out: Out) -> Result<(), CliError> {
    match cmd {
        Command::Validate(a) => validate(a, out),
        Command::Synth(a) => synth(a, seed, out),
        Command::Rules(a) => rules(a, cfg, out),
        Command::Train(a) => train_cmd(a, cfg, seed, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::Infer(a) => infer(a, cfg, out),
        Command::TuneTau(a) => tune(a, cfg, out),
        Command::Report(a) => report(a, cfg, out),
    }
}

fn say(out: Out, text: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::Io(e).into())
}

fn load(path: &Path) -> Result<(Vec<Document>, RelationVocab), CliError> {
    Ok(parse_corpus(&read(path)?)?)
}

fn load_with(path: &Path, vocab: &RelationVocab) -> Result<Vec<(Document, DocAnnotations)>, CliError> {
    Ok(parse_corpus_with(&read(path)?, vocab)?)
}

fn coref_provider(arg: &CorefArg, cfg: &RunConfig) -> Result<Box<dyn CorefProvider>, CliError> {
    let spec = arg.coref.as_deref().or(cfg.coref.as_deref()).unwrap_or("identity");
    if spec == "identity" {
        return Ok(Box::new(IdentityProvider));
    }
    match spec.strip_prefix("lexicon:") {
        Some(path) => {
            let lex = read_alias_lexicon(&read(Path::new(path))?)?;
            Ok(Box::new(LexiconProvider::new(&lex)))
        }
        None => Err(Error::Config(format!("unknown coref provider {spec:?}; expected identity or lexicon:PATH")).into()),
    }
}

fn validate(a: &ValidateArgs, out: Out) -> Result<(), CliError> {
    let (docs, vocab) = load(&a.input)?;
    if let Some(n) = a.max_len {
        check_max_len(&docs, n)?;
    }
    say(out, format!("{} documents OK", docs.len()))?;
    say(out, format!("{} relation types", vocab.len()))
}

fn synth(a: &SynthArgs, seed: u64, out: Out) -> Result<(), CliError> {
    let lexicon_path = a.lexicon.clone().unwrap_or_else(|| a.output.with_extension("lexicon.json"));
    check_output(&a.output)?;
    check_output(&lexicon_path)?;
    let mut sc = SynthConfig { n_docs: a.n_docs, seed, ..SynthConfig::default() };
    if let Some(v) = a.vocab_size {
        sc.vocab_size = v;
    }
    if let Some(r) = a.n_relations {
        sc.n_relations = r;
    }
    if let Some(m) = &a.mix {
        sc.mix = CategoryMix { intra: m[0], coref: m[1], bridge: m[2], distractor: m[3] };
    }
    let corpus = synth_corpus(&sc)?;
    write(&a.output, write_corpus(&corpus.docs, &corpus.relations)?)?;
    write(&lexicon_path, serde_json::to_string_pretty(&corpus.lexicon).map_err(Error::Json)?)?;
    say(out, format!("wrote {} documents to {}", corpus.docs.len(), a.output.display()))?;
    say(out, format!("wrote alias lexicon to {}", lexicon_path.display()))
}

fn histogram_lines(docs: &[Document], provider: &dyn CorefProvider, out: Out) -> Result<serde_json::Value, CliError> {
    let hist = category_histogram(docs, provider);
    say(out, format!("{:<10} {:>7} {:>9}", "category", "facts", "fraction"))?;
    let mut rows = serde_json::Map::new();
    for c in Category::ALL {
        let n = hist.counts.get(&c).copied().unwrap_or(0);
        say(out, format!("{:<10} {:>7} {:>8.2}%", c.label(), n, 100.0 * hist.fraction(c)))?;
        rows.insert(c.label().to_string(), json!({"facts": n, "fraction": hist.fraction(c)}));
    }
    say(out, format!("coverage {:.2}% of {} facts", 100.0 * hist.coverage(), hist.total))?;
    Ok(json!({"total": hist.total, "coverage": hist.coverage(), "categories": rows}))
}

fn rules(a: &RulesArgs, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    if let Some(o) = &a.output {
        check_output(o)?;
    }
    let (docs, vocab) = load(&a.input)?;
    let provider = coref_provider(&a.coref, cfg)?;
    histogram_lines(&docs, provider.as_ref(), out)?;
    if let Some(o) = &a.output {
        let silver: Vec<Document> = docs.iter().map(|d| with_silver_evidence(d, provider.as_ref())).collect();
        write(o, write_corpus(&silver, &vocab)?)?;
        say(out, format!("wrote silver evidence to {}", o.display()))?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs, cfg: &RunConfig, seed: u64, out: Out) -> Result<(), CliError> {
    check_output(&a.checkpoint)?;
    if let Some(l) = &a.log {
        check_output(l)?;
    }
    let mut tc = cfg.train_config(a.preset)?;
    tc.seed = seed;
    let overrides = [
        (&mut tc.lr_encoder, a.lr_encoder),
        (&mut tc.lr_heads, a.lr_heads),
        (&mut tc.warmup_fraction, a.warmup_fraction),
        (&mut tc.evi_loss_weight, a.evi_loss_weight),
        (&mut tc.weight_decay, a.weight_decay),
    ];
    for (field, v) in overrides {
        if let Some(v) = v {
            *field = v;
        }
    }
    for (field, v) in [(&mut tc.batch_docs, a.batch_docs), (&mut tc.max_epochs, a.max_epochs), (&mut tc.patience, a.patience)] {
        if let Some(v) = v {
            *field = v;
        }
    }
    tc.no_joint |= a.no_joint;
    tc.validate()?;

    let mut ec = cfg.encoder_config()?;
    ec.seed = seed;
    for (field, v) in [
        (&mut ec.n_layers, a.layers),
        (&mut ec.n_heads, a.heads),
        (&mut ec.d_model, a.d_model),
        (&mut ec.d_ff, a.d_ff),
        (&mut ec.max_len, a.max_len),
    ] {
        if let Some(v) = v {
            *field = v;
        }
    }

    let (mut train_docs, vocab) = load(&a.input)?;
    let dev: Vec<Document> = load_with(&a.dev, &vocab)?.into_iter().map(|(d, _)| d).collect();
    check_max_len(&train_docs, ec.max_len)?;
    check_max_len(&dev, ec.max_len)?;
    if a.silver {
        let provider = coref_provider(&a.coref, cfg)?;
        train_docs = train_docs.iter().map(|d| with_silver_evidence(d, provider.as_ref())).collect();
    }
    let model = Model::new(ec, TokenVocab::build(&train_docs), vocab)?;

    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|source| CliError::Io { path: p.clone(), source })?)),
        None => None,
    };
    let mut log_err: Option<std::io::Error> = None;
    let outcome = train(model, &train_docs, &dev, &tc, &mut |e| {
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(f, "{line}") {
                log_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(mut f) = log_file {
        let flushed = f.flush();
        if let Some(source) = log_err.or(flushed.err()) {
            return Err(CliError::Io { path: a.log.clone().expect("log path"), source });
        }
    }
    let mut bytes = Vec::new();
    outcome.model.save(&mut bytes)?;
    write(&a.checkpoint, bytes)?;
    say(
        out,
        format!(
            "best dev F1 {:.4} at epoch {} ({} epochs, {} steps)",
            outcome.best_dev_f1,
            outcome.best_epoch,
            outcome.log.len(),
            outcome.steps
        ),
    )?;
    say(out, format!("wrote checkpoint to {}", a.checkpoint.display()))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(Model::load(read(path)?.as_slice())?)
}

/// Evidence-source choice shared by `infer` and `tune-tau`.
fn evidence_setup(
    a: &EvidenceArgs,
    cfg: &RunConfig,
    model: &Model,
    mode: InferenceMode,
) -> Result<(bool, f64, Box<dyn CorefProvider>), CliError> {
    let named = a.evidence_source.as_deref().or(cfg.evidence_source.as_deref());
    let untrained_head = model.no_joint || mode == InferenceMode::NoJoint;
    let use_model = match named {
        Some("model") if untrained_head => {
            return Err(Error::Config(
                "the evidence head was not trained (nojoint); use --evidence-source rules".into(),
            )
            .into())
        }
        Some("model") => true,
        Some("rules") => false,
        Some(other) => return Err(Error::Config(format!("unknown evidence source {other:?}; expected model or rules")).into()),
        None => !untrained_head,
    };
    let threshold = a.evi_threshold.or(cfg.evi_threshold).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("evi_threshold must lie in [0, 1], got {threshold}")).into());
    }
    Ok((use_model, threshold, coref_provider(&a.coref, cfg)?))
}

fn infer(a: &InferArgs, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    check_output(&a.output)?;
    let mode: InferenceMode = a.mode.as_deref().or(cfg.mode.as_deref()).unwrap_or("full").parse()?;
    let model = load_model(&a.checkpoint)?;
    let (use_model, threshold, provider) = evidence_setup(&a.evidence, cfg, &model, mode)?;
    let source = if use_model { EvidenceSource::Model { threshold } } else { EvidenceSource::Rules(provider.as_ref()) };
    let blends = matches!(mode, InferenceMode::Full | InferenceMode::NoJoint);
    let tau = match a.tau.or(cfg.tau).or(model.tau) {
        Some(t) => t,
        None if blends => {
            return Err(Error::Config(format!("mode {mode} needs a blending threshold; run tune-tau or pass --tau")).into())
        }
        None => 0.0,
    };
    let docs: Vec<Document> = load_with(&a.input, &model.relations)?.into_iter().map(|(d, _)| d).collect();
    let mut anns = Vec::with_capacity(docs.len());
    let mut n_pred = 0;
    for d in &docs {
        let pairs = score_document(&model, d, &source, mode.uses_pseudo())?;
        let mut preds = Vec::new();
        let mut evidence = Vec::new();
        for p in &pairs {
            for (r, score) in decide(p, mode, tau) {
                preds.push(PairPrediction { h: p.head, t: p.tail, r: model.relations.name(r).to_string(), score });
            }
            if !p.evidence.is_empty() {
                evidence.push(PairEvidence { h: p.head, t: p.tail, evidence: p.evidence.iter().copied().collect() });
            }
        }
        n_pred += preds.len();
        anns.push(DocAnnotations { predicted_evidence: Some(evidence), predictions: Some(preds) });
    }
    write(&a.output, write_corpus_annotated(&docs, &model.relations, &anns)?)?;
    say(out, format!("{} documents, {} predicted facts (mode {mode}, tau {tau})", docs.len(), n_pred))?;
    say(out, format!("wrote predictions to {}", a.output.display()))
}

fn tune(a: &TuneTauArgs, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    let target: PathBuf = a.output.clone().unwrap_or_else(|| a.checkpoint.clone());
    check_output(&target)?;
    let mut model = load_model(&a.checkpoint)?;
    let (use_model, threshold, provider) = evidence_setup(&a.evidence, cfg, &model, InferenceMode::Full)?;
    let source = if use_model { EvidenceSource::Model { threshold } } else { EvidenceSource::Rules(provider.as_ref()) };
    let docs: Vec<Document> = load_with(&a.input, &model.relations)?.into_iter().map(|(d, _)| d).collect();
    let mut instances = Vec::new();
    for d in &docs {
        instances.extend(tau_instances(d, &score_document(&model, d, &source, true)?));
    }
    let fit = tune_tau(&instances)?;
    model.tau = Some(fit.tau);
    let mut bytes = Vec::new();
    model.save(&mut bytes)?;
    write(&target, bytes)?;
    say(out, format!("tau {} (blend loss {:.6} over {} scores)", fit.tau, fit.loss, instances.len()))?;
    if fit.degenerate {
        say(out, "warning: every dev label agrees; tau sits at the search boundary")?;
    }
    say(out, format!("wrote checkpoint to {}", target.display()))
}

/// Predictions from an annotated corpus, or from its labels when it has no
/// prediction arrays.
fn read_predictions(
    gold: &[Document],
    vocab: &RelationVocab,
    pred: &[(Document, DocAnnotations)],
) -> Result<Predictions, CliError> {
    if pred.len() != gold.len() {
        return Err(Error::Config(format!("{} predicted documents for {} gold documents", pred.len(), gold.len())).into());
    }
    let mut extra: BTreeMap<String, usize> = BTreeMap::new();
    let mut facts = BTreeSet::new();
    let mut evidence: BTreeMap<PairKey, BTreeSet<usize>> = BTreeMap::new();
    let mut any_evidence = false;
    for (i, ((pd, ann), gd)) in pred.iter().zip(gold).enumerate() {
        if pd.doc_id != gd.doc_id {
            return Err(Error::Config(format!("document {i}: predicted {:?} but gold {:?}", pd.doc_id, gd.doc_id)).into());
        }
        match &ann.predictions {
            Some(list) => {
                for p in list {
                    let next = vocab.len() + extra.len();
                    let relation = vocab.index_of(&p.r).unwrap_or_else(|| *extra.entry(p.r.clone()).or_insert(next));
                    facts.insert(Fact { doc: i, head: p.h, tail: p.t, relation });
                }
            }
            None => facts.extend(pd.facts.iter().map(|f| Fact { doc: i, head: f.head, tail: f.tail, relation: f.relation })),
        }
        match &ann.predicted_evidence {
            Some(list) => {
                any_evidence = true;
                for e in list {
                    evidence.entry((i, e.h, e.t)).or_default().extend(e.evidence.iter().copied());
                }
            }
            None => {
                for f in pd.facts.iter().filter(|f| !f.evidence.is_empty()) {
                    any_evidence = true;
                    evidence.entry((i, f.head, f.tail)).or_default().extend(f.evidence.iter().copied());
                }
            }
        }
    }
    Ok(Predictions { facts, evidence: any_evidence.then_some(evidence) })
}

fn eval(a: &EvalArgs, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    if let Some(o) = &a.output {
        check_output(o)?;
    }
    let (gold, vocab) = load(&a.input)?;
    let pred = read_predictions(&gold, &vocab, &load_with(&a.predictions, &vocab)?)?;
    let keys = match &a.train {
        Some(p) => {
            let (docs, v) = load(p)?;
            Some(train_keys(&docs, &v))
        }
        None => None,
    };
    let provider = coref_provider(&a.coref, cfg)?;
    let mut cats = BTreeMap::new();
    for (i, d) in gold.iter().enumerate() {
        cats.extend(pair_categories(d, provider.as_ref()).into_iter().map(|((h, t), c)| ((i, h, t), c)));
    }
    let report = evaluate(&gold, &vocab, &pred, keys.as_ref(), &cats);
    write!(out, "{}", report.to_table()).map_err(Error::Io)?;
    if let Some(o) = &a.output {
        write(o, serde_json::to_string_pretty(&report).map_err(Error::Json)?)?;
    }
    Ok(())
}

fn report(a: &ReportArgs, cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    if let Some(o) = &a.output {
        check_output(o)?;
    }
    let (docs, vocab) = load(&a.input)?;
    let provider = coref_provider(&a.coref, cfg)?;
    let n = docs.len().max(1) as f64;
    let sentences: usize = docs.iter().map(|d| d.sentences.len()).sum();
    let entities: usize = docs.iter().map(|d| d.entities.len()).sum();
    let mentions: usize = docs.iter().map(|d| d.n_mentions()).sum();
    let facts: usize = docs.iter().map(|d| d.facts.len()).sum();
    let with_evidence: usize = docs.iter().flat_map(|d| &d.facts).filter(|f| !f.evidence.is_empty()).count();
    let pairs: usize = docs.iter().map(|d| d.entities.len() * d.entities.len().saturating_sub(1)).sum();
    say(out, format!("documents            {}", docs.len()))?;
    say(out, format!("relation types       {} (+NA)", vocab.len()))?;
    say(out, format!("sentences per doc    {:.2}", sentences as f64 / n))?;
    say(out, format!("entities per doc     {:.2}", entities as f64 / n))?;
    say(out, format!("mentions per entity  {:.2}", mentions as f64 / entities.max(1) as f64))?;
    say(out, format!("facts                {facts}"))?;
    say(out, format!("facts with evidence  {with_evidence}"))?;
    say(out, format!("NA pair fraction     {:.4}", 1.0 - facts as f64 / pairs.max(1) as f64))?;
    let hist = histogram_lines(&docs, provider.as_ref(), out)?;
    if let Some(o) = &a.output {
        let v = json!({
            "documents": docs.len(),
            "relation_types": vocab.len(),
            "sentences": sentences,
            "entities": entities,
            "mentions": mentions,
            "facts": facts,
            "facts_with_evidence": with_evidence,
            "histogram": hist,
        });
        write(o, serde_json::to_string_pretty(&v).map_err(Error::Json)?)?;
    }
    Ok(())
}
