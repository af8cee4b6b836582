//! Biometric error rates over attack scores.
//!
//! Polarity is fixed: a higher score is more attack-like, and a sample is
//! classified as an attack when `score ≥ τ`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "bonafide" => Ok(Label::Bonafide),
            "attack" => Ok(Label::Attack),
            other => Err(format!("unknown label `{other}` (expected bonafide|attack)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(sample_id: impl Into<String>, label: Label, score: f64) -> Self {
        Self {
            sample_id: sample_id.into(),
            label,
            score,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub n_bonafide: usize,
    pub n_attack: usize,
    pub det_points: Vec<DetPoint>,
}

/// Scores split by label, each sorted ascending.
struct Split {
    bona: Vec<f64>,
    attack: Vec<f64>,
}

impl Split {
    fn new(records: &[ScoreRecord]) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::invalid(format!(
                "score of `{}` is not finite",
                r.sample_id
            )));
        }
        let pick = |l: Label| {
            let mut v: Vec<f64> = records.iter().filter(|r| r.label == l).map(|r| r.score).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        Ok(Self {
            bona: pick(Label::Bonafide),
            attack: pick(Label::Attack),
        })
    }

    fn require_both(&self) -> Result<()> {
        if self.bona.is_empty() || self.attack.is_empty() {
            return Err(Error::invalid(format!(
                "need both labels (bonafide: {}, attack: {})",
                self.bona.len(),
                self.attack.len()
            )));
        }
        Ok(())
    }

    fn apcer(&self, tau: f64) -> f64 {
        self.attack.partition_point(|&s| s < tau) as f64 / self.attack.len() as f64
    }

    fn bpcer(&self, tau: f64) -> f64 {
        let below = self.bona.partition_point(|&s| s < tau);
        (self.bona.len() - below) as f64 / self.bona.len() as f64
    }
}

/// Fraction of attacks scored below `threshold`.
pub fn apcer_at(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let s = Split::new(records)?;
    if s.attack.is_empty() {
        return Err(Error::invalid("APCER needs at least one attack record"));
    }
    Ok(s.apcer(threshold))
}

/// Fraction of bona fide samples scored at or above `threshold`.
pub fn bpcer_at(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let s = Split::new(records)?;
    if s.bona.is_empty() {
        return Err(Error::invalid("BPCER needs at least one bona fide record"));
    }
    Ok(s.bpcer(threshold))
}

/// One threshold below every score, one between each pair of consecutive
/// distinct scores, one above every score.
fn sweep_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
    let mut u: Vec<f64> = records.iter().map(|r| r.score).collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut out = Vec::with_capacity(u.len() + 1);
    let (lo, hi) = (u[0], u[u.len() - 1]);
    out.push(lo - lo.abs().max(1.0));
    for w in u.windows(2) {
        let mid = w[0] + (w[1] - w[0]) / 2.0;
        // Adjacent floats have no representable midpoint; `w[1]` yields the
        // same classification as any τ in (w[0], w[1]].
        out.push(if mid > w[0] { mid } else { w[1] });
    }
    out.push(hi + hi.abs().max(1.0));
    out
}

/// Full DET trace plus the equal-error point.
///
/// The EER is read at the swept threshold minimising `|APCER − BPCER|`
/// (lowest threshold on ties) and reported as `(APCER + BPCER) / 2`.
pub fn det_curve(records: &[ScoreRecord]) -> Result<DetReport> {
    let split = Split::new(records)?;
    split.require_both()?;
    let points: Vec<DetPoint> = sweep_thresholds(records)
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            apcer: split.apcer(t),
            bpcer: split.bpcer(t),
        })
        .collect();
    let mut best = points[0];
    for p in &points[1..] {
        if (p.apcer - p.bpcer).abs() < (best.apcer - best.bpcer).abs() {
            best = *p;
        }
    }
    Ok(DetReport {
        eer: (best.apcer + best.bpcer) / 2.0,
        eer_threshold: best.threshold,
        n_bonafide: split.bona.len(),
        n_attack: split.attack.len(),
        det_points: points,
    })
}

/// `(EER, threshold)`.
pub fn eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let r = det_curve(records)?;
    Ok((r.eer, r.eer_threshold))
}

/// One-sided Mann–Whitney U test that attack scores are stochastically
/// larger than bona fide scores. Normal approximation with tie and
/// continuity corrections. Returns `(U, p)`.
pub fn rank_test_attack_greater(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let split = Split::new(records)?;
    split.require_both()?;
    let mut all: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.label == Label::Attack)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum_attack = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_attack += avg_rank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let na = split.attack.len() as f64;
    let nb = split.bona.len() as f64;
    let nf = n as f64;
    let u = rank_sum_attack - na * (na + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let p = 1.0 - Normal::standard().cdf(z);
    Ok((u, p))
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_csv(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses `sample_id,label,score[,…]`; extra columns are ignored.
pub fn parse_score_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Data(format!("header: {e}")))?.clone();
    if headers.len() < 3 || &headers[0] != "sample_id" || &headers[1] != "label" || &headers[2] != "score" {
        return Err(Error::Data(format!(
            "line 1: header must start with `sample_id,label,score`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Data(format!("line {line}: {e}"))
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let label: Label = row[1].parse().map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let score: f64 = row[2]
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("line {line}: bad score `{}`: {e}", &row[2])))?;
        if !score.is_finite() {
            return Err(Error::Data(format!("line {line}: score is not finite")));
        }
        out.push(ScoreRecord::new(&row[0], label, score));
    }
    Ok(out)
}

/// Minimal SVG rendering of the DET trace (BPCER against APCER).
pub fn det_svg(report: &DetReport) -> String {
    let (size, pad) = (400.0, 40.0);
    let span = size - 2.0 * pad;
    let pts: Vec<String> = report
        .det_points
        .iter()
        .map(|p| format!("{:.2},{:.2}", pad + p.apcer * span, size - pad - p.bpcer * span))
        .collect();
    let ex = pad + report.eer * span;
    let ey = size - pad - report.eer * span;
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n",
            "<rect x=\"{p}\" y=\"{p}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#888\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{e}\" y2=\"{p}\" stroke=\"#ccc\" stroke-dasharray=\"4\"/>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "<circle cx=\"{ex:.2}\" cy=\"{ey:.2}\" r=\"4\" fill=\"#d62728\"/>\n",
            "<text x=\"{p}\" y=\"{t}\" font-size=\"12\">APCER</text>\n",
            "<text x=\"4\" y=\"{p}\" font-size=\"12\">BPCER</text>\n",
            "<text x=\"{tx}\" y=\"24\" font-size=\"12\">EER = {eer:.4}</text>\n",
            "</svg>\n"
        ),
        s = size,
        p = pad,
        w = span,
        b = size - pad,
        e = size - pad,
        t = size - 10.0,
        tx = size / 2.0 - 40.0,
        pts = pts.join(" "),
        ex = ex,
        ey = ey,
        eer = report.eer,
    )
}
