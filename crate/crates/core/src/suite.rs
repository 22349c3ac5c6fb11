//! End-to-end analysis runs over the correctly answered queries of a world.
//!
//! A run generates answers for every query, keeps the instances whose answers
//! are all correct, builds the input for every answer step and runs the
//! selected analyses on each (instance, step) pair. Results are written as
//! long-format CSV files plus a JSON summary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{run_queries, summarize, EvalSummary};
use crate::heads::{aggregate_rates, classify_instance, HeadRateTable, InstanceHeads, StatsMode};
use crate::interventions::{
    causal_trace_grid, knockout_forward, mlp_logit_diff, CorruptionSpec, KnockoutSpec, TraceOptions, TracingGrid,
};
use crate::lens::{
    component_logit_series, token_lens_series, LayerLogitSeries, SpanRole, TokenSpanSet, TrackedToken,
};
use crate::model::{forward, ActivationTrace, CaptureSpec, Component, ModelConfig, WeightSet, FORMAT_VERSION};
use crate::world::{QueryInstance, SynthWorld};

pub const SERIES_HEADER: &str = "analysis,instance,step,layer,token_role,token_id,value_kind,value";
pub const TRACING_HEADER: &str = "component,instance,step,layer,position,position_role,target_id,prob_diff";
pub const HEADS_HEADER: &str = "layer,head,step,promotion_rate,suppression_rate,n_instances";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    LogitLens,
    TokenLens,
    Knockout,
    Trace,
    Heads,
}

impl Analysis {
    pub const ALL: [Analysis; 5] =
        [Analysis::LogitLens, Analysis::TokenLens, Analysis::Knockout, Analysis::Trace, Analysis::Heads];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::LogitLens => "logit-lens",
            Analysis::TokenLens => "token-lens",
            Analysis::Knockout => "knockout",
            Analysis::Trace => "trace",
            Analysis::Heads => "heads",
        }
    }

    /// Parses a suite selector; `all` expands to every analysis.
    pub fn parse_selection(s: &str) -> Result<BTreeSet<Analysis>> {
        if s == "all" {
            return Ok(Self::ALL.into_iter().collect());
        }
        Ok([s.parse()?].into_iter().collect())
    }
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown analysis `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

impl Aggregation {
    pub fn label(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub analyses: BTreeSet<Analysis>,
    pub aggregation: Aggregation,
    pub stats_mode: StatsMode,
    /// Tracked-token roles (`subject`, `answer_1`, ...); empty means all.
    pub tracked_roles: Vec<String>,
    /// Corruption noise scale; `None` uses three embedding standard deviations.
    pub noise: Option<f64>,
    pub trace_seed: u64,
    pub trace_seeds: usize,
    pub trace_window: usize,
    pub renormalize: bool,
    /// Analyze at most this many correct instances (lowest ids first).
    pub max_instances: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            analyses: Analysis::ALL.into_iter().collect(),
            aggregation: Aggregation::Mean,
            stats_mode: StatsMode::PerToken,
            tracked_roles: Vec::new(),
            noise: None,
            trace_seed: 17,
            trace_seeds: 3,
            trace_window: 1,
            renormalize: false,
            max_instances: None,
        }
    }
}

/// Tracked tokens of an instance: the first token of the subject and of every answer.
pub fn tracked_tokens(instance: &QueryInstance, roles: &[String]) -> Result<Vec<TrackedToken>> {
    let mut all = vec![TrackedToken::new("subject", instance.subject_first_token())];
    for i in 0..instance.n_answers() {
        let id = instance
            .answer_first_token(i)
            .ok_or_else(|| Error::Format(format!("instance {} has no answer {}", instance.id, i + 1)))?;
        all.push(TrackedToken::new(format!("answer_{}", i + 1), id));
    }
    if roles.is_empty() {
        return Ok(all);
    }
    roles
        .iter()
        .map(|r| {
            all.iter().find(|t| &t.label == r).cloned().ok_or_else(|| Error::Config(format!("unknown token role `{r}`")))
        })
        .collect()
}

/// Subject span followed by the span of every answer before `step`.
pub fn context_spans(instance: &QueryInstance, step: usize) -> Result<Vec<TokenSpanSet>> {
    let mut spans = vec![TokenSpanSet::new(SpanRole::Subject, instance.subject_positions.clone())?];
    for (k, a) in instance.answers.iter().take(step - 1).enumerate() {
        spans.push(TokenSpanSet::new(SpanRole::Answer(k + 1), a.positions())?);
    }
    Ok(spans)
}

/// Role of every position of a step input.
pub fn position_roles(instance: &QueryInstance, step: usize, seq_len: usize) -> Vec<String> {
    let mut roles = vec![String::new(); seq_len];
    roles[0] = "bos".into();
    for &p in &instance.subject_positions {
        roles[p] = "subject".into();
    }
    let after_subject = instance.subject_positions.last().map_or(1, |p| p + 1);
    if after_subject < seq_len {
        roles[after_subject] = "relation".into();
    }
    if after_subject + 1 < seq_len {
        roles[after_subject + 1] = "colon".into();
    }
    for (k, a) in instance.answers.iter().take(step - 1).enumerate() {
        roles[a.start - 1] = format!("marker_{}", k + 1);
        roles[a.start..a.end].fill(format!("answer_{}", k + 1));
    }
    roles[seq_len - 1] = "last_token".into();
    roles
}

/// Elementwise mean or median of congruent series.
pub fn aggregate_series(series: &[LayerLogitSeries], mode: Aggregation) -> Result<LayerLogitSeries> {
    let first = series.first().ok_or_else(|| Error::Incompatible("no series to aggregate".into()))?;
    let labels: Vec<&str> = first.tracked.iter().map(|t| t.label.as_str()).collect();
    for s in series {
        let same = s.n_layers == first.n_layers
            && s.kind == first.kind
            && s.tracked.iter().map(|t| t.label.as_str()).eq(labels.iter().copied());
        if !same {
            return Err(Error::Incompatible("series grids disagree on layers, tokens or value kind".into()));
        }
    }
    let n = first.values.len();
    let values = (0..n)
        .map(|i| {
            let mut column: Vec<f64> = series.iter().map(|s| s.values[i]).collect();
            match mode {
                Aggregation::Mean => column.iter().sum::<f64>() / column.len() as f64,
                Aggregation::Median => median(&mut column),
            }
        })
        .collect();
    let mut out = LayerLogitSeries::new(first.kind, first.tracked.clone(), first.n_layers, values)?;
    out.step = first.step;
    out.cohort = series.iter().map(|s| s.cohort).sum();
    out.aggregation = mode.label().into();
    Ok(out)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// A named series produced for one (instance, step).
#[derive(Clone, Debug, PartialEq)]
pub struct NamedSeries {
    pub analysis: String,
    pub series: LayerLogitSeries,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedGrid {
    /// Role of the corrupted span (`subject`, `answer_1`, ...).
    pub corrupted: String,
    pub instance: usize,
    pub step: usize,
    pub position_roles: Vec<String>,
    pub span: Vec<usize>,
    pub grid: TracingGrid,
}

/// Everything computed for one (instance, step).
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub instance: usize,
    pub step: usize,
    pub logit_lens: Vec<NamedSeries>,
    pub token_lens: Vec<NamedSeries>,
    pub knockout: Vec<NamedSeries>,
    pub grids: Vec<NamedGrid>,
    pub heads: Option<InstanceHeads>,
}

/// Runs the selected analyses on one step input.
pub fn analyze_step(
    weights: &WeightSet<f32>,
    instance: &QueryInstance,
    step: usize,
    config: &RunConfig,
    noise: f64,
) -> Result<StepResult> {
    let tokens = instance.step_input(step)?;
    let tracked = tracked_tokens(instance, &config.tracked_roles)?;
    let (_, clean) = forward(weights, &tokens, &CaptureSpec::default())?;
    let spans = context_spans(instance, step)?;
    let meta = |s: LayerLogitSeries| s.with_meta(Some(instance.id), Some(step));
    let mut out = StepResult { instance: instance.id, step, ..Default::default() };

    if config.analyses.contains(&Analysis::LogitLens) {
        for c in [Component::Attention, Component::Mlp] {
            out.logit_lens.push(NamedSeries {
                analysis: format!("logit_lens_{}", c.label()),
                series: meta(component_logit_series(&clean, weights, c, &tracked)?),
            });
        }
    }
    if config.analyses.contains(&Analysis::TokenLens) {
        let last = TokenSpanSet::new(SpanRole::LastToken, vec![tokens.len() - 1])?;
        for span in spans.iter().chain([&last]) {
            out.token_lens.push(NamedSeries {
                analysis: format!("token_lens_{}", span.role.label()),
                series: meta(token_lens_series(&clean, weights, span, &tracked)?),
            });
        }
    }
    if config.analyses.contains(&Analysis::Knockout) {
        for span in &spans {
            let mut spec = KnockoutSpec::new(span.clone());
            spec.renormalize = config.renormalize;
            let knocked = knockout_forward(weights, &tokens, &spec, &CaptureSpec::default())?;
            out.knockout.push(NamedSeries {
                analysis: format!("knockout_{}", span.role.label()),
                series: meta(mlp_logit_diff(&clean, &knocked, weights, &tracked)?),
            });
        }
    }
    if config.analyses.contains(&Analysis::Trace) {
        let target = instance
            .answer_first_token(step - 1)
            .ok_or_else(|| Error::Format(format!("instance {} has no answer {step}", instance.id)))?;
        let roles = position_roles(instance, step, tokens.len());
        let options = TraceOptions { seeds: config.trace_seeds, window: config.trace_window };
        for (k, span) in spans.iter().enumerate() {
            let seed = config
                .trace_seed
                .wrapping_add((instance.id as u64) << 24 | (step as u64) << 16 | (k as u64) << 8);
            let corruption = CorruptionSpec::new(span.clone(), noise, seed)?;
            for c in [Component::Attention, Component::Mlp] {
                out.grids.push(NamedGrid {
                    corrupted: span.role.label(),
                    instance: instance.id,
                    step,
                    position_roles: roles.clone(),
                    span: span.indices().to_vec(),
                    grid: causal_trace_grid(weights, &tokens, &corruption, c, target, &clean, &options)?,
                });
            }
        }
    }
    if config.analyses.contains(&Analysis::Heads) {
        out.heads = Some(classify_instance(&clean, weights, &tracked, config.stats_mode)?);
    }
    Ok(out)
}

/// Clean trace of a step input, for callers that want to inspect it directly.
pub fn step_trace(weights: &WeightSet<f32>, instance: &QueryInstance, step: usize) -> Result<ActivationTrace> {
    Ok(forward(weights, &instance.step_input(step)?, &CaptureSpec::default())?.1)
}

/// Aggregated series per `(analysis, step)`, in first-seen order.
pub fn aggregate_named(results: &[StepResult], pick: fn(&StepResult) -> &[NamedSeries], mode: Aggregation) -> Result<Vec<NamedSeries>> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in results {
        for s in pick(r) {
            let key = (s.analysis.clone(), r.step);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    keys.into_iter()
        .map(|(name, step)| {
            let group: Vec<LayerLogitSeries> = results
                .iter()
                .filter(|r| r.step == step)
                .flat_map(|r| pick(r).iter().filter(|s| s.analysis == name).map(|s| s.series.clone()))
                .collect();
            let mut series = aggregate_series(&group, mode)?;
            series.step = Some(step);
            Ok(NamedSeries { analysis: name, series })
        })
        .collect()
}

/// Formats with six significant digits, in plain decimal where practical.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let mut exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{x:.5e}");
    }
    let render = |e: i32| format!("{:.*}", (5 - e).max(0) as usize, x);
    let mut s = render(exp);
    if s.trim_start_matches('-').parse::<f64>().is_ok_and(|v| v >= 10f64.powi(exp + 1)) {
        exp += 1;
        s = render(exp);
    }
    s
}

fn write_series_rows(out: &mut String, named: &NamedSeries, instance: &str) {
    let s = &named.series;
    let step = s.step.map(|x| x.to_string()).unwrap_or_default();
    let aggregated = s.aggregation != "instance";
    for l in 0..s.n_layers {
        for (k, t) in s.tracked.iter().enumerate() {
            let id = if aggregated { String::new() } else { t.id.to_string() };
            let _ = writeln!(
                out,
                "{},{instance},{step},{l},{},{id},{},{}",
                named.analysis,
                t.label,
                s.kind.label(),
                fmt_sig(s.get(l, k))
            );
        }
    }
}

/// Series CSV: every instance's rows (sorted by instance, step) then the
/// aggregate rows whose `instance` column holds the aggregation mode.
pub fn series_csv(results: &[StepResult], pick: fn(&StepResult) -> &[NamedSeries], mode: Aggregation) -> Result<String> {
    let mut out = format!("{SERIES_HEADER}\n");
    for r in results {
        for s in pick(r) {
            write_series_rows(&mut out, s, &r.instance.to_string());
        }
    }
    for s in aggregate_named(results, pick, mode)? {
        write_series_rows(&mut out, &s, mode.label());
    }
    Ok(out)
}

pub fn tracing_csv<'a>(grids: impl IntoIterator<Item = &'a NamedGrid>) -> String {
    let mut out = format!("{TRACING_HEADER}\n");
    for g in grids {
        let grid = &g.grid;
        for l in 0..grid.n_layers {
            for p in 0..grid.positions {
                let _ = writeln!(
                    out,
                    "{},{},{},{l},{p},{},{},{}",
                    grid.component.label(),
                    g.instance,
                    g.step,
                    g.position_roles[p],
                    grid.target,
                    fmt_sig(grid.get(l, p))
                );
            }
        }
    }
    out
}

pub fn heads_csv(tables: &[(usize, HeadRateTable)]) -> String {
    let mut out = format!("{HEADS_HEADER}\n");
    for (step, t) in tables {
        for l in 0..t.n_layers {
            for h in 0..t.n_heads {
                let _ = writeln!(
                    out,
                    "{l},{h},{step},{},{},{}",
                    fmt_sig(t.promotion_rate(l, h)),
                    fmt_sig(t.suppression_rate(l, h)),
                    t.n_instances
                );
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub package: String,
    pub weight_format: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptedSpanRecord {
    pub instance: usize,
    pub step: usize,
    pub corrupted: String,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub total_queries: usize,
    pub correct_instances: usize,
    pub accuracy: f64,
    pub step_correct: Vec<usize>,
    pub cohort: usize,
    pub aggregation: String,
    pub stats_mode: String,
    pub noise: f64,
    pub files: Vec<String>,
    pub corrupted_spans: Vec<CorruptedSpanRecord>,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub versions: Versions,
}

#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub summary: SuiteSummary,
    pub csv_paths: Vec<PathBuf>,
    pub results: Vec<StepResult>,
    pub head_tables: Vec<(usize, HeadRateTable)>,
}

/// Generates, filters and analyzes; writes CSVs and `summary.json` to `out_dir`
/// when it is given.
pub fn run_suite(
    weights: &WeightSet<f32>,
    world: &SynthWorld,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<AnalysisReport> {
    if config.trace_seeds == 0 {
        return Err(Error::Config("trace_seeds must be positive".into()));
    }
    let instances = run_queries(weights, world)?;
    let eval: EvalSummary = summarize(&instances);
    let mut cohort: Vec<&QueryInstance> = instances.iter().filter(|i| i.correct).collect();
    if cohort.is_empty() {
        return Err(Error::EmptyCohort { accuracy: eval.accuracy, total: eval.total });
    }
    cohort.sort_by_key(|i| i.id);
    if let Some(n) = config.max_instances {
        cohort.truncate(n);
    }
    let noise = config.noise.unwrap_or_else(|| CorruptionSpec::default_noise(weights));
    let n_answers = world.n_answers;
    tracing::info!(cohort = cohort.len(), accuracy = eval.accuracy, "analyzing correct instances");

    let per_instance: Vec<Vec<StepResult>> = cohort
        .par_iter()
        .map(|inst| (1..=n_answers).map(|step| analyze_step(weights, inst, step, config, noise)).collect())
        .collect::<Result<_>>()?;
    let results: Vec<StepResult> = per_instance.into_iter().flatten().collect();

    let head_tables = if config.analyses.contains(&Analysis::Heads) {
        (1..=n_answers)
            .map(|step| {
                let xs: Vec<InstanceHeads> =
                    results.iter().filter(|r| r.step == step).filter_map(|r| r.heads.clone()).collect();
                Ok((step, aggregate_rates(&xs)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut files: Vec<(String, String)> = Vec::new();
    let a = &config.analyses;
    if a.contains(&Analysis::LogitLens) {
        files.push(("logit_lens.csv".into(), series_csv(&results, |r| &r.logit_lens, config.aggregation)?));
    }
    if a.contains(&Analysis::TokenLens) {
        files.push(("token_lens.csv".into(), series_csv(&results, |r| &r.token_lens, config.aggregation)?));
    }
    if a.contains(&Analysis::Knockout) {
        files.push(("knockout.csv".into(), series_csv(&results, |r| &r.knockout, config.aggregation)?));
    }
    let mut corrupted_spans = Vec::new();
    if a.contains(&Analysis::Trace) {
        let mut roles: Vec<String> = Vec::new();
        for g in results.iter().flat_map(|r| &r.grids) {
            if !roles.contains(&g.corrupted) {
                roles.push(g.corrupted.clone());
            }
            if g.grid.component == Component::Attention {
                corrupted_spans.push(CorruptedSpanRecord {
                    instance: g.instance,
                    step: g.step,
                    corrupted: g.corrupted.clone(),
                    positions: g.span.clone(),
                });
            }
        }
        roles.sort();
        for role in roles {
            let grids = results.iter().flat_map(|r| &r.grids).filter(|g| g.corrupted == role);
            files.push((format!("tracing_{role}.csv"), tracing_csv(grids)));
        }
    }
    if a.contains(&Analysis::Heads) {
        files.push(("heads.csv".into(), heads_csv(&head_tables)));
    }

    let summary = SuiteSummary {
        total_queries: eval.total,
        correct_instances: eval.all_correct,
        accuracy: eval.accuracy,
        step_correct: eval.step_correct.clone(),
        cohort: cohort.len(),
        aggregation: config.aggregation.label().into(),
        stats_mode: config.stats_mode.label().into(),
        noise,
        files: files.iter().map(|(n, _)| n.clone()).collect(),
        corrupted_spans,
        config: config.clone(),
        model: weights.config.clone(),
        versions: Versions { package: env!("CARGO_PKG_VERSION").into(), weight_format: FORMAT_VERSION },
    };
    let mut csv_paths = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for (name, text) in &files {
            let path = dir.join(name);
            fs::write(&path, text)?;
            csv_paths.push(path);
        }
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(AnalysisReport { summary, csv_paths, results, head_tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::ValueKind;

    fn series(values: Vec<f64>) -> LayerLogitSeries {
        let tracked = vec![TrackedToken::new("subject", 1), TrackedToken::new("answer_1", 2)];
        LayerLogitSeries::new(ValueKind::Logit, tracked, values.len() / 2, values).unwrap()
    }

    #[test]
    fn aggregation() {
        let a = series(vec![1.0, 2.0, 3.0, 4.0]);
        let b = series(vec![3.0, 2.0, 1.0, 0.0]);
        assert_eq!(aggregate_series(std::slice::from_ref(&a), Aggregation::Mean).unwrap().values, a.values);
        let m = aggregate_series(&[a.clone(), b.clone()], Aggregation::Mean).unwrap();
        assert_eq!(m.values, vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(m.cohort, 2);
        assert_eq!(aggregate_series(&[b.clone(), a.clone()], Aggregation::Mean).unwrap().values, m.values);
        let c = series(vec![10.0, 0.0, 0.0, 0.0]);
        let med = aggregate_series(&[a.clone(), b, c], Aggregation::Median).unwrap();
        assert_eq!(med.values, vec![3.0, 2.0, 1.0, 0.0]);
        let short = series(vec![1.0, 2.0]);
        assert!(matches!(aggregate_series(&[a, short], Aggregation::Mean), Err(Error::Incompatible(_))));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1.00000");
        assert_eq!(fmt_sig(-0.0123456789), "-0.0123457");
        assert_eq!(fmt_sig(1234.56789), "1234.57");
        assert_eq!(fmt_sig(9.999996), "10.0000");
        assert_eq!(fmt_sig(123456789.0), "123456789");
        assert_eq!(fmt_sig(1.5e-7), "1.50000e-7");
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(Analysis::parse_selection("all").unwrap().len(), 5);
        assert_eq!(Analysis::parse_selection("token-lens").unwrap().into_iter().next(), Some(Analysis::TokenLens));
        assert!(Analysis::parse_selection("lens").is_err());
        assert_eq!("median".parse::<Aggregation>().unwrap(), Aggregation::Median);
    }
}
