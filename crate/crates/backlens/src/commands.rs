//! Command implementations. Per-prompt work runs on a rayon pool sized by
//! `BACKLENS_THREADS`; results are collected in corpus order and reduced
//! sequentially, so output does not depend on the thread count.

use std::path::Path;
use std::time::Instant;

use backlens_core::analysis::{
    rank_cells, segment_norms, target_ranks, top_layer_vjp_decomposition, Quantity, RankScanResult,
    SegmentGrid, SegmentNormTrace, TargetRankCurve, TargetRankGrid,
};
use backlens_core::corpus::{synthetic, Corpus, CorpusEntry, SyntheticSpec};
use backlens_core::editing::{
    apply_edit, evaluate_entry, score_entry, sgd_eta_grid, shift_eta_grid, EditMethod, EditSpec,
    EntryScore, HeldOut, MetricsRow, DEFAULT_SHIFT_ETA,
};
use backlens_core::engine;
use backlens_core::lens::{build_lens_report, LensOptions, LensSource, RankDirection};
use backlens_core::linalg::argmax;
use backlens_core::oracle::grad_check_all;
use backlens_core::{ModelConfig, ModelWeights, Vocab};
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::cli::{
    Command, EditArgs, EvalArgs, GenCorpusArgs, GenModelArgs, GradcheckArgs, Inputs, LensArgs, Output,
    ScanArgs, SegmentArgs, VjpArgs,
};
use crate::config;
use crate::corpus_io;
use crate::error::{Error, Result};
use crate::report::{num, opt_num, Provenance, Report};

pub const THREADS_ENV: &str = "BACKLENS_THREADS";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenModel(a) => gen_model(&a),
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::RankScan(a) => rank_scan(&a),
        Command::LensTable(a) => lens_table(&a),
        Command::SegmentNorms(a) => segment_norm_report(&a),
        Command::TargetRanks(a) => target_rank_report(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Edit(a) => edit(&a),
        Command::EvalEdits(a) => eval_edits(&a),
        Command::VjpDecompose(a) => vjp_decompose(&a),
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// SHA-256 of the checkpoint bytes.
    pub hash: String,
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, weights) = checkpoint::from_bytes(&bytes, path)?;
    Ok(Model {
        config,
        weights,
        hash: hex::encode(Sha256::digest(&bytes)),
    })
}

struct Setup {
    model: Model,
    corpus: Corpus,
    provenance: Provenance,
}

fn setup(inputs: &Inputs) -> Result<Setup> {
    let model = load_model(&inputs.model)?;
    let corpus = corpus_io::load_corpus(&inputs.corpus, &model.config)?;
    let provenance = Provenance {
        config_hash: config::hash(&model.config),
        model_hash: model.hash.clone(),
        corpus_hash: Some(corpus_io::corpus_hash(&corpus)),
    };
    Ok(Setup {
        model,
        corpus,
        provenance,
    })
}

/// Worker count from `BACKLENS_THREADS`; `None` lets rayon decide.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => match s.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::Usage(format!(
                "{THREADS_ENV} must be a non-negative integer, found {s:?}"
            ))),
        },
        _ => Ok(None),
    }
}

/// Maps `f` over `items` in parallel, keeping input order.
fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
}

fn entry(corpus: &Corpus, index: usize) -> Result<&CorpusEntry> {
    corpus.entries.get(index).ok_or_else(|| {
        Error::Usage(format!(
            "--prompt {index} is out of range (corpus has {} entries)",
            corpus.len()
        ))
    })
}

/// Summary text goes to stdout unless the report itself does.
fn note(output: &Output, line: &str) {
    if output.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn write(report: &Report, output: &Output) -> Result<()> {
    report.write(output.format, output.out.as_deref())
}

fn gen_model(a: &GenModelArgs) -> Result<()> {
    if a.print_default {
        println!("{}", config::to_json_pretty(&ModelConfig::default()));
        return Ok(());
    }
    let mut cfg = match &a.config {
        Some(p) => config::read(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let weights = ModelWeights::init_random(&cfg)?;
    let out = a.out.as_deref().expect("clap requires --out");
    checkpoint::save(&weights, &cfg, out)?;
    if let Some(v) = &a.vocab_out {
        corpus_io::write_vocab(&Vocab::toy(cfg.vocab_size), v)?;
    }
    Ok(())
}

/// Parses `a..b` or `a..=b`, both inclusive.
pub fn parse_len_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("--len-range must look like 2..10, found {s:?}"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (min_len, max_len) = parse_len_range(&a.len_range)?;
    let spec = SyntheticSpec {
        count: a.n,
        min_len,
        max_len,
        paraphrases: a.paraphrases,
        neighbors: a.neighbors,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let corpus = synthetic(&model.config, &spec)?;
    let text = corpus_io::to_jsonl(&corpus);
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn rank_scan(a: &ScanArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let per_prompt = par_map(&s.corpus.entries, |i, e| Ok(rank_cells(w, cfg, &e.prompt, i)?))?;
    let result = RankScanResult::from_cells(per_prompt.into_iter().flatten().collect());

    let mut report = Report::new(
        "rank-scan",
        s.provenance.clone(),
        vec!["prompt", "layer", "matrix", "n", "measured", "predicted", "final_layer", "equal"],
    )
    .summary("non_final_equality_fraction", num(result.non_final.fraction()))
    .summary("non_final_equal", result.non_final.equal)
    .summary("non_final_cells", result.non_final.total)
    .summary("non_final_ff1_fraction", num(result.non_final_ff1.fraction()))
    .summary("non_final_ff2_fraction", num(result.non_final_ff2.fraction()))
    .summary("final_rank1_fraction", num(result.final_layer.fraction()))
    .summary("final_equal", result.final_layer.equal)
    .summary("final_cells", result.final_layer.total)
    .summary("violations", result.violations.len());
    for c in &result.cells {
        report.push_row(vec![
            json!(c.prompt),
            json!(c.layer),
            json!(c.which.name()),
            json!(c.n),
            json!(c.measured),
            json!(c.predicted),
            json!(c.is_final_layer),
            json!(c.measured == c.predicted),
        ]);
    }
    write(&report, &a.output)?;
    note(
        &a.output,
        &format!(
            "non-final equality fraction: {:.4} ({}/{})",
            result.non_final.fraction(),
            result.non_final.equal,
            result.non_final.total
        ),
    );
    note(
        &a.output,
        &format!(
            "final layers rank==1: {:.1}% ({}/{})",
            100.0 * result.final_layer.fraction(),
            result.final_layer.equal,
            result.final_layer.total
        ),
    );
    if let Some(v) = result.violations.first() {
        let p = &s.corpus.entries[v.prompt].prompt;
        return Err(Error::Invariant(format!(
            "prompt {} (tokens {:?}): {} gradient at layer {} has rank {} > n = {} ({} violating cells)",
            v.prompt,
            p.tokens,
            v.which.name(),
            v.layer,
            v.measured,
            v.n,
            result.violations.len()
        )));
    }
    Ok(())
}

fn parse_named<T>(flag: &str, value: &str, parse: impl Fn(&str) -> Option<T>, expected: &str) -> Result<T> {
    parse(value).ok_or_else(|| Error::Usage(format!("--{flag}: unknown value {value:?} (expected {expected})")))
}

fn lens_table(a: &LensArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let vocab = corpus_io::vocab_for(a.vocab.as_deref(), cfg)?;
    let which = parse_named("which", &a.which, LensSource::parse, "ff1-inputs or ff2-vjps")?;
    let mut opts = LensOptions::new(which, w);
    if let Some(c) = &a.convention {
        opts.convention = parse_named("convention", c, RankDirection::parse, "most-probable or least-probable")?;
    }
    if let Some(k) = a.k {
        opts.k = k;
    }
    if a.apply_ln {
        opts.apply_ln = true;
    }
    if a.no_ln {
        opts.apply_ln = false;
    }
    let prompt = &entry(&s.corpus, a.prompt)?.prompt;
    let trace = engine::forward(w, cfg, prompt)?;
    let btrace = engine::backward(w, cfg, &trace)?;
    let lens = build_lens_report(&trace, &btrace, w, &vocab, &opts)?;

    let pairs = |v: &[(String, f64)]| Value::Array(v.iter().map(|(t, p)| json!([t, num(*p)])).collect());
    let mut report = Report::new(
        "lens-table",
        s.provenance.clone(),
        vec!["layer", "pos", "token", "norm", "top", "bottom", "target_rank"],
    )
    .meta("which", lens.which.name())
    .meta("convention", lens.convention.name())
    .meta("k", lens.k)
    .meta("apply_ln", opts.apply_ln)
    .meta("prompt", a.prompt)
    .meta("target", vocab.token(prompt.target).unwrap_or_default());
    for c in &lens.cells {
        report.push_row(vec![
            json!(c.layer),
            json!(c.pos),
            json!(c.token),
            num(c.norm),
            pairs(&c.top),
            pairs(&c.bottom),
            json!(c.target_rank),
        ]);
    }
    write(&report, &a.output)
}

fn reduce_grids(grids: Vec<SegmentGrid>, n_layers: usize) -> SegmentGrid {
    let mut total = SegmentGrid::new(n_layers);
    for g in &grids {
        total.merge(g);
    }
    total
}

fn segment_norm_report(a: &SegmentArgs) -> Result<()> {
    let quantity = parse_named(
        "quantity",
        &a.quantity,
        Quantity::parse,
        "ff1-vjp, ff2-vjp, block-in-vjp, ff1-input or ff2-input",
    )?;
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    s.corpus.require_labels()?;
    let grids = par_map(&s.corpus.entries, |i, e| Ok(segment_norms(w, cfg, &e.prompt, i, quantity)?))?;
    let trace = SegmentNormTrace::from_grid(cfg, quantity, &reduce_grids(grids, cfg.n_layers));

    let mut report = Report::new(
        "segment-norms",
        s.provenance.clone(),
        vec!["layer", "normalized_layer", "segment", "count", "value", "normalized"],
    )
    .meta("quantity", quantity.name());
    for c in &trace.cells {
        report.push_row(vec![
            json!(c.layer),
            num(c.normalized_layer),
            json!(c.segment.name()),
            json!(c.count),
            num(c.mean_norm),
            num(c.normalized),
        ]);
    }
    write(&report, &a.output)
}

fn target_rank_report(a: &ScanArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    s.corpus.require_labels()?;
    let grids = par_map(&s.corpus.entries, |i, e| Ok(target_ranks(w, cfg, &e.prompt, i)?))?;
    let mut total = TargetRankGrid {
        ranks: SegmentGrid::new(cfg.n_layers),
        excluded: SegmentGrid::new(cfg.n_layers),
    };
    for g in &grids {
        total.ranks.merge(&g.ranks);
        total.excluded.merge(&g.excluded);
    }
    let curve = TargetRankCurve::from_grid(cfg, &total);

    let mut report = Report::new(
        "target-ranks",
        s.provenance.clone(),
        vec!["layer", "normalized_layer", "segment", "count", "excluded", "value"],
    )
    .meta("convention", RankDirection::LeastProbableFirst.name())
    .meta("normalization", "rank/V");
    for c in &curve.cells {
        report.push_row(vec![
            json!(c.layer),
            num(c.normalized_layer),
            json!(c.segment.name()),
            json!(c.count),
            json!(c.excluded),
            opt_num(c.mean_rank),
        ]);
    }
    write(&report, &a.output)
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let n = a.limit.unwrap_or(s.corpus.len()).min(s.corpus.len());
    let start = Instant::now();
    let checks = par_map(&s.corpus.entries[..n], |_, e| Ok(grad_check_all(w, cfg, &e.prompt, a.h)?))?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error()).fold(0.0, f64::max);
    let passes = worst <= a.threshold;

    let mut report = Report::new(
        "gradcheck",
        s.provenance.clone(),
        vec!["prompt", "param", "max_abs_error", "max_rel_error", "worst_row", "worst_col"],
    )
    .meta("h", num(a.h))
    .meta("threshold", num(a.threshold))
    .summary("prompts", n)
    .summary("max_rel_error", num(worst))
    .summary("passes", passes);
    if a.timing {
        report = report.summary("elapsed_secs", num(elapsed));
    }
    for (i, c) in checks.iter().enumerate() {
        for p in &c.params {
            report.push_row(vec![
                json!(i),
                json!(p.param.name()),
                num(p.max_abs_error),
                num(p.max_rel_error),
                json!(p.worst.0),
                json!(p.worst.1),
            ]);
        }
    }
    write(&report, &a.output)?;
    note(&a.output, &format!("max relative error: {worst:e} over {n} prompts"));
    if !passes {
        return Err(Error::Invariant(format!(
            "max relative error {worst:e} exceeds {:e}",
            a.threshold
        )));
    }
    Ok(())
}

fn edit_method(s: &str) -> Result<EditMethod> {
    parse_named("method", s, EditMethod::parse, "sgd-backprop or forward-pass-shift")
}

fn edit(a: &EditArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let vocab = corpus_io::vocab_for(a.vocab.as_deref(), cfg)?;
    let method = edit_method(&a.method)?;
    let layer = a.layer.unwrap_or_else(|| cfg.default_edit_layer());
    let spec = match method {
        EditMethod::SgdBackprop => {
            let eta = a
                .eta
                .ok_or_else(|| Error::Usage("--eta is required for sgd-backprop".into()))?;
            EditSpec {
                allow_positive_eta: a.allow_positive_eta,
                ..EditSpec::sgd(eta)
            }
        }
        EditMethod::ForwardPassShift => EditSpec::shift(layer, a.eta.unwrap_or(DEFAULT_SHIFT_ETA)),
    };
    let prompt = &entry(&s.corpus, a.prompt)?.prompt;
    let outcome = apply_edit(w, cfg, prompt, &spec)?;
    let before = argmax(&outcome.pre_logits);
    let after = argmax(&outcome.post_logits);
    let changed = backlens_core::editing::changed_params(cfg, w, &outcome.weights);
    let name = |t: usize| vocab.token(t).unwrap_or_default().to_string();

    let mut report = Report::new(
        "edit",
        s.provenance.clone(),
        vec![
            "prompt",
            "method",
            "layer",
            "eta",
            "target",
            "baseline_argmax",
            "baseline_match",
            "post_argmax",
            "success",
            "pre_loss",
            "post_loss",
            "target_logit_delta",
            "changed_params",
        ],
    );
    report.collection = "rows";
    report.push_row(vec![
        json!(a.prompt),
        json!(method.name()),
        match method {
            EditMethod::ForwardPassShift => json!(layer),
            EditMethod::SgdBackprop => Value::Null,
        },
        num(spec.eta),
        json!(name(prompt.target)),
        json!(name(before)),
        json!(before == prompt.target),
        json!(name(after)),
        json!(outcome.success),
        num(outcome.pre_loss),
        num(outcome.post_loss),
        num(outcome.target_logit_delta),
        json!(changed.iter().map(|p| p.name()).collect::<Vec<_>>().join(" ")),
    ]);
    write(&report, &a.output)?;
    if let Some(p) = &a.save_model {
        checkpoint::save(&outcome.weights, cfg, p)?;
    }
    Ok(())
}

fn parse_etas(flag: &str, s: &str, named: &[(&str, Vec<f64>)]) -> Result<Vec<f64>> {
    if let Some((_, v)) = named.iter().find(|(k, _)| *k == s) {
        return Ok(v.clone());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Usage(format!("--{flag}: cannot parse {t:?} as a learning rate")))
        })
        .collect()
}

fn parse_layers(s: &str, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let layers: Vec<usize> = match s {
        "default" => vec![cfg.default_edit_layer()],
        "all" => (0..cfg.n_layers).collect(),
        _ => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("--layer: cannot parse {t:?}")))
            })
            .collect::<Result<_>>()?,
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Usage(format!(
            "--layer {l} is out of range (model has {} layers)",
            cfg.n_layers
        )));
    }
    Ok(layers)
}

/// Held-out prompts for the KL column: a separate synthetic corpus.
pub fn held_out_prompts(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let spec = SyntheticSpec {
        count,
        max_len: 10.min(cfg.max_seq).min(cfg.vocab_size - 1),
        min_len: 1,
        paraphrases: 0,
        neighbors: 0,
        seed,
        ..SyntheticSpec::default()
    };
    Ok(synthetic(cfg, &spec)?.entries.into_iter().map(|e| e.prompt.tokens).collect())
}

fn eval_edits(a: &EvalArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let methods = match a.method.as_str() {
        "both" => vec![EditMethod::SgdBackprop, EditMethod::ForwardPassShift],
        m => vec![edit_method(m)?],
    };
    let mut specs = Vec::new();
    for m in &methods {
        match m {
            EditMethod::SgdBackprop => {
                for eta in parse_etas("sgd-eta", &a.sgd_eta, &[("grid", sgd_eta_grid())])? {
                    specs.push(EditSpec::sgd(eta));
                }
            }
            EditMethod::ForwardPassShift => {
                let etas = parse_etas(
                    "shift-eta",
                    &a.shift_eta,
                    &[("grid", shift_eta_grid()), ("default", vec![DEFAULT_SHIFT_ETA])],
                )?;
                for layer in parse_layers(&a.layer, cfg)? {
                    for &eta in &etas {
                        specs.push(EditSpec::shift(layer, eta));
                    }
                }
            }
        }
    }
    let held_out = HeldOut::new(w, cfg, held_out_prompts(cfg, a.held_out, a.held_out_seed)?)?;

    let baseline = par_map(&s.corpus.entries, |_, e| Ok(score_entry(w, None, cfg, e, &held_out)?))?;
    let mut rows = vec![MetricsRow::from_scores(None, &baseline)];
    let mut per_spec: Vec<Vec<EntryScore>> = Vec::with_capacity(specs.len());
    for spec in &specs {
        let scores = par_map(&s.corpus.entries, |_, e| Ok(evaluate_entry(w, cfg, e, spec, &held_out)?))?;
        rows.push(MetricsRow::from_scores(Some(spec.clone()), &scores));
        per_spec.push(scores);
    }

    let mut report = Report::new(
        "eval-edits",
        s.provenance.clone(),
        vec![
            "method",
            "layer",
            "eta",
            "efficacy",
            "paraphrase",
            "neighborhood",
            "mean_kl",
            "efficacy_std",
            "paraphrase_std",
            "neighborhood_std",
        ],
    )
    .meta("held_out", a.held_out)
    .meta("held_out_seed", a.held_out_seed);
    report.collection = "rows";
    for m in &methods {
        let any = any_setting_efficacy(&specs, &per_spec, *m, s.corpus.len());
        let key = match m {
            EditMethod::SgdBackprop => "sgd_any_eta_efficacy",
            EditMethod::ForwardPassShift => "shift_any_setting_efficacy",
        };
        report = report.summary(key, num(any));
    }
    for r in &rows {
        let (method, layer, eta) = match &r.spec {
            None => (json!("baseline"), Value::Null, Value::Null),
            Some(sp) => (
                json!(sp.method.name()),
                match sp.method {
                    EditMethod::ForwardPassShift => json!(sp.layer),
                    EditMethod::SgdBackprop => Value::Null,
                },
                num(sp.eta),
            ),
        };
        report.push_row(vec![
            method,
            layer,
            eta,
            num(r.efficacy.mean),
            num(r.paraphrase.mean),
            num(r.neighborhood.mean),
            num(r.mean_kl),
            num(r.efficacy.std),
            num(r.paraphrase.std),
            num(r.neighborhood.std),
        ]);
    }
    write(&report, &a.output)
}

/// Fraction of entries that at least one of `method`'s specs edits
/// successfully.
fn any_setting_efficacy(specs: &[EditSpec], scores: &[Vec<EntryScore>], method: EditMethod, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            specs
                .iter()
                .zip(scores)
                .any(|(sp, sc)| sp.method == method && sc[i].efficacy == 1.0)
        })
        .count();
    hits as f64 / n as f64
}

fn vjp_decompose(a: &VjpArgs) -> Result<()> {
    let s = setup(&a.inputs)?;
    let (cfg, w) = (&s.model.config, &s.model.weights);
    let indices: Vec<usize> = match a.prompt {
        Some(i) => {
            entry(&s.corpus, i)?;
            vec![i]
        }
        None => (0..s.corpus.len()).collect(),
    };
    let decs = par_map(&indices, |_, &i| {
        let p = &s.corpus.entries[i].prompt;
        let t = engine::forward(w, cfg, p)?;
        let b = engine::backward(w, cfg, &t)?;
        Ok(top_layer_vjp_decomposition(&t, &b, w)?)
    })?;

    let mut report = Report::new(
        "vjp-decompose",
        s.provenance.clone(),
        vec![
            "prompt",
            "target",
            "target_coefficient",
            "max_other_coefficient",
            "coefficient_sum",
            "residual",
            "signs_hold",
        ],
    )
    .meta("tolerance", num(a.tolerance));
    let mut failures = Vec::new();
    for (&i, d) in indices.iter().zip(&decs) {
        let other = d
            .coefficients
            .iter()
            .filter(|c| c.0 != d.target)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        let ok = d.signs_hold() && d.residual <= a.tolerance && d.coefficient_sum().abs() <= a.tolerance;
        if !ok {
            failures.push(i);
        }
        report.push_row(vec![
            json!(i),
            json!(d.target),
            num(d.target_coefficient()),
            num(other),
            num(d.coefficient_sum()),
            num(d.residual),
            json!(d.signs_hold()),
        ]);
    }
    report = report.summary("prompts", indices.len()).summary("failures", failures.len());
    write(&report, &a.output)?;
    if let Some(i) = failures.first() {
        return Err(Error::Invariant(format!(
            "decoder VJP decomposition fails for prompt {i} ({} prompts in total)",
            failures.len()
        )));
    }
    Ok(())
}
