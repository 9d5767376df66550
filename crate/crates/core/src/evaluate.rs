//! Benchmark evaluation: answering MCQs, paired accuracy, baselines and
//! report files.
//!
//! A pair scores 1 only when both its positive and its negative question
//! are answered correctly:
//!
//! ```text
//! acc_paired = (1/N) * sum_i  G(q_i+) * G(q_i-)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::time::Instant;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{render_options, ChatRequest, ModelClient};
use crate::jsonl::{save_json, Record};
use crate::mcq::{BinaryQuery, Mcq, OptionRole, Polarity, Setting};
use crate::text::{letter, parse_choice_letter, parse_yes_no};
use crate::Seed;

pub const INSTRUCTION: &str = "Please answer with a single capital letter (A, B, C, D, or E).";
pub const ANSWER_MAX_TOKENS: u32 = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rotation set {pair_id} is missing position {position}")]
    MissingRotation { pair_id: String, position: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One model answer. The question's metadata is copied in so that reports
/// can be computed from records alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mcq_id: String,
    pub pair_id: String,
    pub setting: Setting,
    pub polarity: Polarity,
    pub entity_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity_level: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_of: Option<String>,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_letter: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_role: Option<OptionRole>,
    /// Γ: 1 when the parsed letter is the answer key.
    pub correct: u8,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    /// Scores `raw_text` against `mcq`.
    pub fn score(mcq: &Mcq, raw_text: String, latency_ms: f64) -> Self {
        let idx = parse_choice_letter(&raw_text);
        EvalRecord {
            mcq_id: mcq.mcq_id.clone(),
            pair_id: mcq.pair_id.clone(),
            setting: mcq.setting,
            polarity: mcq.polarity,
            entity_count: mcq.entity_count,
            granularity_level: mcq.granularity_level,
            negated_position: mcq.negated_position,
            rotation_of: mcq.rotation_of.clone(),
            raw_text,
            parsed_letter: idx.map(letter),
            chosen_role: idx.map(|i| mcq.option_roles[i]),
            correct: u8::from(idx == Some(mcq.answer_index)),
            latency_ms,
            error: None,
        }
    }

    pub fn gamma(&self) -> bool {
        self.correct == 1
    }
}

impl Record for EvalRecord {
    const SCHEMA: &'static str = "eval.v1";

    fn validate(&self) -> Result<(), String> {
        if self.correct > 1 {
            return Err(format!("{}: correct must be 0 or 1", self.mcq_id));
        }
        if self.correct == 1 && self.parsed_letter.is_none() {
            return Err(format!("{}: correct answer without a parsed letter", self.mcq_id));
        }
        Ok(())
    }
}

/// Question, lettered options and the fixed answer instruction.
pub fn eval_prompt(mcq: &Mcq) -> String {
    format!("{}\n{}\n{INSTRUCTION}", mcq.question, render_options(&mcq.options))
}

/// Asks one question at temperature 0 with a three-token budget. Endpoint
/// failures produce a Γ = 0 record carrying the error.
pub fn ask(client: &ModelClient, endpoint: &str, mcq: &Mcq) -> EvalRecord {
    let req = ChatRequest::with_image(endpoint, eval_prompt(mcq), &mcq.image_uri).max_tokens(ANSWER_MAX_TOKENS);
    let start = Instant::now();
    match client.complete(&req) {
        // Recorded latency, so replays reproduce the live record.
        Ok(resp) => EvalRecord::score(mcq, resp.text, resp.latency_ms),
        Err(e) => {
            let mut r = EvalRecord::score(mcq, String::new(), start.elapsed().as_secs_f64() * 1e3);
            r.error = Some(e.to_string());
            r
        }
    }
}

/// Answers every question concurrently; output follows input order.
pub fn evaluate_all(client: &ModelClient, endpoint: &str, mcqs: &[Mcq]) -> Vec<EvalRecord> {
    client.map_ordered(mcqs, |m| ask(client, endpoint, m))
}

/// Counts over complete pairs. Rates are derived from the counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub n_pairs: usize,
    pub paired_correct: usize,
    pub positive_correct: usize,
    pub negative_correct: usize,
    /// Negative questions answered with an affirming option.
    pub false_positives: usize,
    /// Positive questions answered with a rejecting option.
    pub false_negatives: usize,
    pub paired_accuracy: f64,
    pub positive_accuracy: f64,
    pub negative_accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Breakdown {
    fn add(&mut self, pos: &EvalRecord, neg: &EvalRecord) {
        self.n_pairs += 1;
        self.paired_correct += usize::from(pos.gamma() && neg.gamma());
        self.positive_correct += usize::from(pos.gamma());
        self.negative_correct += usize::from(neg.gamma());
        self.false_positives += usize::from(neg.chosen_role == Some(OptionRole::Affirm));
        self.false_negatives += usize::from(pos.chosen_role == Some(OptionRole::Reject));
    }

    fn finish(&mut self) {
        let n = self.n_pairs;
        self.paired_accuracy = ratio(self.paired_correct, n);
        self.positive_accuracy = ratio(self.positive_correct, n);
        self.negative_accuracy = ratio(self.negative_correct, n);
        self.fp_rate = ratio(self.false_positives, n);
        self.fn_rate = ratio(self.false_negatives, n);
    }

    /// Exact paired accuracy.
    pub fn exact(&self) -> Option<Ratio<usize>> {
        (self.n_pairs > 0).then(|| Ratio::new(self.paired_correct, self.n_pairs))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: Option<Setting>,
    pub overall: Breakdown,
    pub per_k: BTreeMap<usize, Breakdown>,
    pub per_level: BTreeMap<u8, Breakdown>,
    /// By the negated slot of the pair's negative question.
    pub per_position: BTreeMap<usize, Breakdown>,
}

impl SettingReport {
    fn add(&mut self, pos: &EvalRecord, neg: &EvalRecord) {
        self.overall.add(pos, neg);
        self.per_k.entry(pos.entity_count).or_default().add(pos, neg);
        if let Some(l) = pos.granularity_level {
            self.per_level.entry(l).or_default().add(pos, neg);
        }
        if let Some(p) = neg.negated_position {
            self.per_position.entry(p).or_default().add(pos, neg);
        }
    }

    fn finish(&mut self) {
        self.overall.finish();
        self.per_k.values_mut().chain(self.per_level.values_mut()).chain(self.per_position.values_mut()).for_each(Breakdown::finish);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub n_pairs: usize,
    pub overall: Breakdown,
    pub per_setting: BTreeMap<Setting, SettingReport>,
    /// Pair ids with only one polarity present; excluded from every figure.
    pub orphans: Vec<String>,
    pub n_orphans: usize,
}

/// Paired accuracy with breakdowns by setting, k, granularity level and
/// negated position. Rotation variants are left to
/// [`positional_bias_report`].
pub fn paired_accuracy(records: &[EvalRecord]) -> PairedReport {
    let mut pairs: BTreeMap<&str, (Option<&EvalRecord>, Option<&EvalRecord>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.rotation_of.is_none()) {
        let e = pairs.entry(r.pair_id.as_str()).or_default();
        match r.polarity {
            Polarity::Positive => e.0 = Some(r),
            Polarity::Negative => e.1 = Some(r),
        }
    }
    let mut report = PairedReport::default();
    for (id, pair) in pairs {
        match pair {
            (Some(pos), Some(neg)) => {
                report.overall.add(pos, neg);
                let s = report.per_setting.entry(pos.setting).or_default();
                s.setting = Some(pos.setting);
                s.add(pos, neg);
            }
            _ => report.orphans.push(id.to_string()),
        }
    }
    report.n_pairs = report.overall.n_pairs;
    report.n_orphans = report.orphans.len();
    report.overall.finish();
    report.per_setting.values_mut().for_each(SettingReport::finish);
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionalReport {
    pub n_sets: usize,
    /// Paired accuracy of the shared positive with each rotated negative.
    pub per_position: [f64; 3],
    pub per_position_correct: [usize; 3],
}

/// Per-position paired accuracy over rotation sets. Every base pair with
/// rotations must have all three positions.
pub fn positional_bias_report(records: &[EvalRecord]) -> Result<PositionalReport, EvalError> {
    let positives: HashMap<&str, &EvalRecord> = records
        .iter()
        .filter(|r| r.rotation_of.is_none() && r.polarity == Polarity::Positive)
        .map(|r| (r.pair_id.as_str(), r))
        .collect();
    let mut sets: BTreeMap<&str, [Option<&EvalRecord>; 3]> = BTreeMap::new();
    for r in records.iter().filter(|r| r.polarity == Polarity::Negative) {
        let (Some(base), Some(p)) = (r.rotation_of.as_deref(), r.negated_position) else { continue };
        if p < 3 {
            sets.entry(base).or_default()[p] = Some(r);
        }
    }
    let mut correct = [0usize; 3];
    let mut n_sets = 0;
    for (base, rots) in &sets {
        for (p, r) in rots.iter().enumerate() {
            if r.is_none() {
                return Err(EvalError::MissingRotation { pair_id: base.to_string(), position: p });
            }
        }
        let Some(pos) = positives.get(base) else {
            return Err(EvalError::MissingRotation { pair_id: base.to_string(), position: 0 });
        };
        n_sets += 1;
        for (p, r) in rots.iter().enumerate() {
            correct[p] += usize::from(pos.gamma() && r.expect("checked").gamma());
        }
    }
    Ok(PositionalReport { n_sets, per_position: correct.map(|c| ratio(c, n_sets)), per_position_correct: correct })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub method: BaselineMethod,
    pub trials: u64,
    pub n_pairs: usize,
    /// Guessing uniformly over the five options.
    pub uniform: f64,
    /// Guessing affirm or reject with equal odds, then uniformly within
    /// that group.
    pub polarity_aware: f64,
}

fn complete_pairs(mcqs: &[Mcq]) -> Vec<(&Mcq, &Mcq)> {
    let mut pairs: BTreeMap<&str, (Option<&Mcq>, Option<&Mcq>)> = BTreeMap::new();
    for m in mcqs.iter().filter(|m| m.rotation_of.is_none()) {
        let e = pairs.entry(m.pair_id.as_str()).or_default();
        match m.polarity {
            Polarity::Positive => e.0 = Some(m),
            Polarity::Negative => e.1 = Some(m),
        }
    }
    pairs.into_values().filter_map(|(p, n)| Some((p?, n?))).collect()
}

/// Chance that the polarity-aware guesser picks the key.
fn polarity_aware_p(m: &Mcq) -> Ratio<u64> {
    let role = m.option_roles[m.answer_index];
    let group = m.option_roles.iter().filter(|r| **r == role).count() as u64;
    Ratio::new(1, 2 * group)
}

/// Exact baselines averaged over complete pairs.
pub fn analytic_baselines(mcqs: &[Mcq]) -> (Ratio<u64>, Ratio<u64>) {
    let pairs = complete_pairs(mcqs);
    if pairs.is_empty() {
        return (Ratio::from_integer(0), Ratio::from_integer(0));
    }
    let n = pairs.len() as u64;
    let uniform = Ratio::new(1u64, 25);
    let aware: Ratio<u64> = pairs.iter().map(|(p, q)| polarity_aware_p(p) * polarity_aware_p(q)).sum();
    (uniform, aware / n)
}

fn guess_polarity_aware(m: &Mcq, rng: &mut impl Rng) -> usize {
    let role = if rng.gen_bool(0.5) { OptionRole::Affirm } else { OptionRole::Reject };
    let group: Vec<usize> = (0..5).filter(|&i| m.option_roles[i] == role).collect();
    if group.is_empty() {
        rng.gen_range(0..5)
    } else {
        group[rng.gen_range(0..group.len())]
    }
}

/// Random-guess baselines. With `trials == 0` the exact values are
/// returned; otherwise `trials` pairs are drawn and answered at random.
pub fn random_baselines(mcqs: &[Mcq], trials: u64, seed: Seed) -> Baselines {
    let pairs = complete_pairs(mcqs);
    if trials == 0 || pairs.is_empty() {
        let (u, a) = analytic_baselines(mcqs);
        return Baselines {
            method: BaselineMethod::Analytic,
            trials: 0,
            n_pairs: pairs.len(),
            uniform: *u.numer() as f64 / *u.denom() as f64,
            polarity_aware: *a.numer() as f64 / *a.denom() as f64,
        };
    }
    let mut rng = seed.derive("baselines").rng();
    let (mut uni, mut aware) = (0u64, 0u64);
    for _ in 0..trials {
        let (p, n) = pairs[rng.gen_range(0..pairs.len())];
        uni += u64::from(rng.gen_range(0..5) == p.answer_index && rng.gen_range(0..5) == n.answer_index);
        aware += u64::from(guess_polarity_aware(p, &mut rng) == p.answer_index && guess_polarity_aware(n, &mut rng) == n.answer_index);
    }
    Baselines {
        method: BaselineMethod::MonteCarlo,
        trials,
        n_pairs: pairs.len(),
        uniform: uni as f64 / trials as f64,
        polarity_aware: aware as f64 / trials as f64,
    }
}

/// Yes/no answer to a granularity level query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryRecord {
    pub query_id: String,
    pub granularity_level: u8,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_yes: Option<bool>,
    pub correct: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Record for BinaryRecord {
    const SCHEMA: &'static str = "binary_eval.v1";
}

pub fn ask_binary(client: &ModelClient, endpoint: &str, q: &BinaryQuery) -> BinaryRecord {
    let req = ChatRequest::with_image(endpoint, q.question.clone(), &q.image_uri).max_tokens(ANSWER_MAX_TOKENS);
    let (raw, error) = match client.complete(&req) {
        Ok(r) => (r.text, None),
        Err(e) => (String::new(), Some(e.to_string())),
    };
    let answer_yes = parse_yes_no(&raw);
    let expected_yes = q.expected_answer.eq_ignore_ascii_case("yes");
    BinaryRecord {
        query_id: q.query_id.clone(),
        granularity_level: q.granularity_level,
        correct: u8::from(answer_yes == Some(expected_yes)),
        raw_text: raw,
        answer_yes,
        error,
    }
}

/// Accuracy per granularity level for yes/no queries.
pub fn binary_accuracy(records: &[BinaryRecord]) -> BTreeMap<u8, f64> {
    let mut counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.granularity_level).or_default();
        c.0 += usize::from(r.correct == 1);
        c.1 += 1;
    }
    counts.into_iter().map(|(l, (c, n))| (l, ratio(c, n))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub endpoint: String,
    pub n_records: usize,
    pub n_errors: usize,
    pub n_unparseable: usize,
    pub paired: PairedReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positional: Option<PositionalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Baselines>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub binary_per_level: BTreeMap<u8, f64>,
}

impl Report {
    pub fn build(endpoint: &str, records: &[EvalRecord], baselines: Option<Baselines>, binary: &[BinaryRecord]) -> Result<Self, EvalError> {
        let has_rotations = records.iter().any(|r| r.rotation_of.is_some());
        Ok(Report {
            schema: "report.v1".into(),
            endpoint: endpoint.to_string(),
            n_records: records.len(),
            n_errors: records.iter().filter(|r| r.error.is_some()).count(),
            n_unparseable: records.iter().filter(|r| r.error.is_none() && r.parsed_letter.is_none()).count(),
            paired: paired_accuracy(records),
            positional: if has_rotations { Some(positional_bias_report(records)?) } else { None },
            baselines,
            binary_per_level: binary_accuracy(binary),
        })
    }
}

/// Writes `report.json`, `per_k.csv`, `granularity.csv` and
/// `granularity.svg` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    save_json(report, dir.join("report.json"))?;

    let mut w = csv::Writer::from_path(dir.join("per_k.csv"))?;
    w.write_record(["setting", "k", "n_pairs", "paired_accuracy", "fp_rate", "fn_rate"])?;
    for (setting, s) in &report.paired.per_setting {
        for (k, b) in &s.per_k {
            w.write_record([
                setting.short().to_string(),
                k.to_string(),
                b.n_pairs.to_string(),
                format!("{:.6}", b.paired_accuracy),
                format!("{:.6}", b.fp_rate),
                format!("{:.6}", b.fn_rate),
            ])?;
        }
    }
    w.flush()?;

    let levels = report.paired.per_setting.get(&Setting::Granularity).map(|s| s.per_level.clone()).unwrap_or_default();
    let mut w = csv::Writer::from_path(dir.join("granularity.csv"))?;
    w.write_record(["level", "n_pairs", "paired_accuracy", "fp_rate", "fn_rate", "binary_accuracy"])?;
    for (l, b) in &levels {
        w.write_record([
            l.to_string(),
            b.n_pairs.to_string(),
            format!("{:.6}", b.paired_accuracy),
            format!("{:.6}", b.fp_rate),
            format!("{:.6}", b.fn_rate),
            report.binary_per_level.get(l).map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    std::fs::write(dir.join("granularity.svg"), granularity_svg(&levels))?;
    Ok(())
}

/// Line chart of paired accuracy, FP rate and FN rate per level.
pub fn granularity_svg(levels: &BTreeMap<u8, Breakdown>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let x = |l: u8| PAD + (f64::from(l) - 1.0) * (W - 2.0 * PAD) / 6.0;
    let y = |v: f64| H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for l in 1..=7u8 {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{l}</text>"#, x(l), H - PAD + 15.0);
    }
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{t:.1}</text>"#, PAD - 5.0, y(t) + 4.0);
    }
    type Series = (&'static str, &'static str, fn(&Breakdown) -> f64);
    let series: [Series; 3] = [
        ("paired accuracy", "#1f77b4", |b| b.paired_accuracy),
        ("FP rate", "#d62728", |b| b.fp_rate),
        ("FN rate", "#2ca02c", |b| b.fn_rate),
    ];
    for (i, (name, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = levels.iter().map(|(l, b)| format!("{:.1},{:.1}", x(*l), y(f(b)))).collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
