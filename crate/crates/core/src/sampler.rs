//! Reference-model-guided sampling of preference pairs.
//!
//! Each pair is annotated with the length-normalized reference
//! log-probabilities of its two responses; the sampling statistic is the
//! absolute difference of the two (the *gap*). A pair is retained at
//! threshold `δ` iff `gap ≥ δ`. The gap ignores which response the reference
//! prefers, so it measures how clearly the reference separates the two
//! responses, not whether it agrees with the label.
//!
//! Ground-truth preference clarity, `|s₁ − s₂|`, is only used for analysis:
//! [`clarity_curve`] reports how clarity of the retained set moves with `δ`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_pair, read_json_lines, write_json_lines, Dataset, PreferencePair};
use crate::error::{Error, Result};
use crate::lm::{score_response, ModelParams, NormalizedScore};

/// Threshold grid used when none is given.
pub const DEFAULT_DELTAS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// Keys the scored JSONL adds on top of the pair schema.
pub const SCORE_KEYS: [&str; 3] = ["logp_chosen_norm", "logp_rejected_norm", "gap"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: PreferencePair,
    pub chosen_score: NormalizedScore,
    pub rejected_score: NormalizedScore,
    /// `|chosen_score.logp_norm − rejected_score.logp_norm|`
    pub gap: f64,
}

impl ScoredPair {
    pub fn new(mut pair: PreferencePair, chosen_score: NormalizedScore, rejected_score: NormalizedScore) -> Self {
        for key in SCORE_KEYS {
            pair.extra.remove(key);
        }
        ScoredPair {
            pair,
            chosen_score,
            rejected_score,
            gap: (chosen_score.logp_norm - rejected_score.logp_norm).abs(),
        }
    }

    /// Same pair with chosen and rejected exchanged; the gap is unchanged.
    pub fn swapped(&self) -> Self {
        ScoredPair::new(self.pair.swapped(), self.rejected_score, self.chosen_score)
    }
}

/// Preference clarity `|s₁ − s₂|` from the ground-truth scores.
pub fn clarity(pair: &PreferencePair) -> Result<f64> {
    let (c, r) = pair.scores()?;
    Ok((c - r).abs())
}

/// Scores both responses of every pair under `reference`. Evaluation is
/// parallel; output order matches input order.
pub fn annotate(dataset: &Dataset, reference: &ModelParams) -> Result<Vec<ScoredPair>> {
    dataset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| {
            let score = |response: &str| {
                score_response(reference, pair.prompt.as_bytes(), response.as_bytes())
                    .map_err(|e| Error::data(format!("pair {idx}: {e}")))
            };
            let chosen = score(&pair.chosen)?;
            let rejected = score(&pair.rejected)?;
            Ok(ScoredPair::new(pair.clone(), chosen, rejected))
        })
        .collect()
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0) {
        return Err(Error::usage(format!("delta must be non-negative, got {delta}")));
    }
    Ok(())
}

/// Pairs with `gap ≥ delta`, in their original order.
pub fn filter(scored: &[ScoredPair], delta: f64) -> Result<Vec<ScoredPair>> {
    check_delta(delta)?;
    Ok(scored.iter().filter(|s| s.gap >= delta).cloned().collect())
}

/// Largest threshold that still retains at least `fraction` of the pairs.
pub fn delta_for_retention(scored: &[ScoredPair], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::usage(format!("retention fraction {fraction} must lie in (0, 1]")));
    }
    if scored.is_empty() {
        return Err(Error::usage("cannot pick a threshold for an empty set"));
    }
    let mut gaps: Vec<f64> = scored.iter().map(|s| s.gap).collect();
    gaps.sort_by(|a, b| b.total_cmp(a));
    let keep = ((fraction * gaps.len() as f64).ceil() as usize).clamp(1, gaps.len());
    Ok(gaps[keep - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClarityCurveRow {
    pub delta: f64,
    pub retained_count: usize,
    pub retained_fraction: f64,
    /// Absent when nothing is retained.
    pub mean_clarity: Option<f64>,
    pub mean_gap: Option<f64>,
}

/// Retention and mean clarity of the cumulative set `{gap ≥ δ}` for each
/// threshold of an ascending grid.
pub fn clarity_curve(scored: &[ScoredPair], deltas: &[f64]) -> Result<Vec<ClarityCurveRow>> {
    for &d in deltas {
        check_delta(d)?;
    }
    if deltas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::usage("thresholds must be in ascending order"));
    }
    let clarities = scored
        .iter()
        .enumerate()
        .map(|(i, s)| clarity(&s.pair).map_err(|e| Error::data(format!("pair {i}: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    let total = scored.len();
    Ok(deltas
        .iter()
        .map(|&delta| {
            let mut count = 0usize;
            let mut clarity_sum = 0.0;
            let mut gap_sum = 0.0;
            for (s, c) in scored.iter().zip(&clarities) {
                if s.gap >= delta {
                    count += 1;
                    clarity_sum += c;
                    gap_sum += s.gap;
                }
            }
            let mean = |sum: f64| (count > 0).then(|| sum / count as f64);
            ClarityCurveRow {
                delta,
                retained_count: count,
                retained_fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
                mean_clarity: mean(clarity_sum),
                mean_gap: mean(gap_sum),
            }
        })
        .collect())
}

/// Formats like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-4..6).contains(&exp) {
        let (mantissa, _) = sci.split_at(sci.find('e').unwrap());
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CURVE_HEADER: &str = "delta,retained_count,retained_fraction,mean_clarity,mean_gap";

pub fn curve_to_csv(rows: &[ClarityCurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            format_sig6(r.delta),
            r.retained_count,
            format_sig6(r.retained_fraction),
            opt(r.mean_clarity),
            opt(r.mean_gap)
        );
    }
    out
}

/// Parses the curve CSV written by [`curve_to_csv`].
pub fn parse_curve_csv(text: &str) -> Result<Vec<ClarityCurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::data("curve CSV has an unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::data(format!("curve CSV row {}: cannot parse {line:?}", i + 1));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(ClarityCurveRow {
                delta: num(cells[0])?,
                retained_count: cells[1].parse().map_err(|_| bad())?,
                retained_fraction: num(cells[2])?,
                mean_clarity: opt(cells[3])?,
                mean_gap: opt(cells[4])?,
            })
        })
        .collect()
}

/// Line plot of mean clarity against δ (solid, left axis) with the retained
/// count on a log-scaled right axis (dashed).
pub fn curve_to_svg(rows: &[ClarityCurveRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 60.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let max_delta = rows.iter().map(|r| r.delta).fold(0.0, f64::max).max(1e-9);
    let max_clarity = rows
        .iter()
        .filter_map(|r| r.mean_clarity)
        .fold(0.0, f64::max)
        .max(1e-9);
    let max_log_count = rows
        .iter()
        .map(|r| ((r.retained_count.max(1)) as f64).log10())
        .fold(0.0, f64::max)
        .max(1.0);
    let x = |d: f64| PAD + (W - 2.0 * PAD) * d / max_delta;
    let y_clarity = |c: f64| H - PAD - (H - 2.0 * PAD) * c / max_clarity;
    let y_count = |n: usize| H - PAD - (H - 2.0 * PAD) * ((n.max(1)) as f64).log10() / max_log_count;

    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{r}\" y1=\"{PAD}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">sampling threshold δ</text>\n\
         <text x=\"16\" y=\"{}\" font-size=\"14\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">mean clarity</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"14\" transform=\"rotate(90 {} {})\" text-anchor=\"middle\">retained pairs (log)</text>",
        W / 2.0,
        H - 15.0,
        H / 2.0,
        H / 2.0,
        W - 16.0,
        H / 2.0,
        W - 16.0,
        H / 2.0
    );
    for r in rows {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            x(r.delta),
            H - PAD + 16.0,
            format_sig6(r.delta)
        );
    }

    let clarity_points: Vec<String> = rows
        .iter()
        .filter_map(|r| r.mean_clarity.map(|c| format!("{:.2},{:.2}", x(r.delta), y_clarity(c))))
        .collect();
    let count_points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", x(r.delta), y_count(r.retained_count)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n\
         <polyline fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"2\" stroke-dasharray=\"6 4\" points=\"{}\"/>",
        clarity_points.join(" "),
        count_points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

#[derive(Serialize, Deserialize)]
struct ScoredRecord {
    #[serde(flatten)]
    pair: PreferencePair,
    logp_chosen_norm: f64,
    logp_rejected_norm: f64,
    gap: f64,
}

pub fn write_scored_jsonl(scored: &[ScoredPair], path: &Path) -> Result<()> {
    let records: Vec<ScoredRecord> = scored
        .iter()
        .map(|s| ScoredRecord {
            pair: s.pair.clone(),
            logp_chosen_norm: s.chosen_score.logp_norm,
            logp_rejected_norm: s.rejected_score.logp_norm,
            gap: s.gap,
        })
        .collect();
    write_json_lines(path, &records)
}

/// Reads a scored file. Only the normalized scores are stored, so the
/// reconstructed `logp_sum` is `logp_norm × length`.
pub fn load_scored_jsonl(path: &Path) -> Result<Vec<ScoredPair>> {
    read_json_lines(path, |n, line| {
        let err = |msg: String| Error::data(format!("{}: line {n}: {msg}", path.display()));
        let rec: ScoredRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        // re-run the pair schema checks
        parse_pair(path, n, &serde_json::to_string(&rec.pair).map_err(|e| err(e.to_string()))?)?;
        let restore = |logp_norm: f64, response: &str| {
            let length = response.len() + 1;
            NormalizedScore {
                logp_sum: logp_norm * length as f64,
                length,
                logp_norm,
            }
        };
        let chosen = restore(rec.logp_chosen_norm, &rec.pair.chosen);
        let rejected = restore(rec.logp_rejected_norm, &rec.pair.rejected);
        let scored = ScoredPair::new(rec.pair, chosen, rejected);
        if scored.gap != rec.gap {
            return Err(err(format!(
                "gap {} disagrees with |logp_chosen_norm - logp_rejected_norm| = {}",
                rec.gap, scored.gap
            )));
        }
        Ok(scored)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, ArchConfig};
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn small() -> ArchConfig {
        ArchConfig {
            d_model: 8,
            ffn_hidden: 16,
            max_len: 64,
            ..ArchConfig::default()
        }
    }

    fn synthetic(gaps: &[f64], clarities: &[f64]) -> Vec<ScoredPair> {
        gaps.iter()
            .zip(clarities)
            .enumerate()
            .map(|(i, (&g, &c))| {
                let pair = PreferencePair::new(format!("p{i}"), "c", "r").with_scores(c, 0.0);
                ScoredPair::new(pair, NormalizedScore::new(0.0, 1), NormalizedScore::new(-g, 1))
            })
            .collect()
    }

    #[test]
    fn clarity_formula() {
        let p = PreferencePair::new("x", "a", "b").with_scores(9.0, 3.5);
        assert_eq!(clarity(&p).unwrap(), 5.5);
        assert_eq!(clarity(&p.swapped()).unwrap(), 5.5);
        let tie = PreferencePair::new("x", "a", "b").with_scores(4.0, 4.0);
        assert_eq!(clarity(&tie).unwrap(), 0.0);
        assert!(matches!(clarity(&PreferencePair::new("x", "a", "b")), Err(Error::Data(_))));
    }

    #[test]
    fn uniform_reference_has_no_gaps() {
        let ds = Dataset::new(vec![
            PreferencePair::new("prompt", "short", "a considerably longer answer"),
            PreferencePair::new("q", "x", "y"),
        ]);
        let scored = annotate(&ds, &ModelParams::uniform(&small())).unwrap();
        assert!(scored.iter().all(|s| s.gap.abs() < 1e-12));
    }

    #[test]
    fn identical_responses_have_zero_gap() {
        let ds = Dataset::new(vec![PreferencePair::new("abc", "same text", "same text")]);
        let scored = annotate(&ds, &init_params(&small(), 3).unwrap()).unwrap();
        assert_eq!(scored[0].gap, 0.0);
    }

    #[test]
    fn overlength_pair_names_index() {
        let ds = Dataset::new(vec![
            PreferencePair::new("abc", "ok", "ok too"),
            PreferencePair::new("abc", "x".repeat(100), "y"),
        ]);
        let err = annotate(&ds, &init_params(&small(), 3).unwrap()).unwrap_err();
        assert!(err.to_string().contains("pair 1"), "{err}");
    }

    #[test]
    fn annotate_preserves_order() {
        let ds = Dataset::new(
            (0..40)
                .map(|i| PreferencePair::new(format!("prompt {i}"), "abc".repeat(i % 5 + 1), "xyz"))
                .collect(),
        );
        let reference = init_params(&small(), 3).unwrap();
        let scored = annotate(&ds, &reference).unwrap();
        for (s, p) in scored.iter().zip(&ds.pairs) {
            assert_eq!(&s.pair, p);
            let direct = score_response(&reference, p.prompt.as_bytes(), p.chosen.as_bytes()).unwrap();
            assert_eq!(s.chosen_score, direct);
        }
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let scored = synthetic(&[0.0, 0.3, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(filter(&scored, 0.0).unwrap(), scored);
        assert!(filter(&scored, 2.5).unwrap().is_empty());
        assert!(matches!(filter(&scored, -0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn threshold_is_inclusive() {
        let scored = synthetic(&[0.5, 0.49, 1.0], &[1.0, 1.0, 1.0]);
        let kept = filter(&scored, 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].pair.prompt, "p0");
        assert_eq!(kept[1].pair.prompt, "p2");
    }

    #[test]
    fn curve_rows() {
        let scored = synthetic(&[0.1, 0.6, 1.5, 3.0], &[1.0, 2.0, 3.0, 6.0]);
        let rows = clarity_curve(&scored, &DEFAULT_DELTAS).unwrap();
        assert_eq!(rows[0].retained_count, 4);
        assert_eq!(rows[0].retained_fraction, 1.0);
        assert_eq!(rows[0].mean_clarity, Some(3.0));
        assert_eq!(rows[1].retained_count, 3);
        assert_eq!(rows[2].retained_count, 2);
        assert_eq!(rows[2].mean_clarity, Some(4.5));
        assert_eq!(rows[3].retained_count, 1);
        let beyond = clarity_curve(&scored, &[5.0]).unwrap();
        assert_eq!(beyond[0].retained_count, 0);
        assert_eq!(beyond[0].mean_clarity, None);
        assert_eq!(beyond[0].mean_gap, None);
    }

    #[test]
    fn curve_argument_errors() {
        let scored = synthetic(&[0.1], &[1.0]);
        assert!(matches!(clarity_curve(&scored, &[1.0, 0.5]), Err(Error::Usage(_))));
        let unscored = vec![ScoredPair::new(
            PreferencePair::new("p", "c", "r"),
            NormalizedScore::new(-1.0, 2),
            NormalizedScore::new(-1.0, 2),
        )];
        assert!(matches!(clarity_curve(&unscored, &[0.0]), Err(Error::Data(_))));
    }

    #[test]
    fn retention_threshold() {
        let scored = synthetic(&[0.1, 0.6, 1.5, 3.0], &[1.0; 4]);
        assert_eq!(delta_for_retention(&scored, 0.5).unwrap(), 1.5);
        assert_eq!(delta_for_retention(&scored, 1.0).unwrap(), 0.1);
        assert_eq!(delta_for_retention(&scored, 0.01).unwrap(), 3.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(3.14159265), "3.14159");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-05");
        assert_eq!(format_sig6(0.00012345678), "0.000123457");
        assert_eq!(format_sig6(999999.5), "1e+06");
        assert_eq!(format_sig6(-2.5), "-2.5");
    }

    #[test]
    fn csv_round_trip_and_empty_cells() {
        let scored = synthetic(&[0.1, 0.6], &[1.0, 2.0]);
        let rows = clarity_curve(&scored, &[0.0, 0.5, 10.0]).unwrap();
        let csv = curve_to_csv(&rows);
        assert!(csv.starts_with(CURVE_HEADER));
        assert!(csv.lines().last().unwrap().ends_with(",0,0,,"), "{csv}");
        let parsed = parse_curve_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].mean_clarity, None);
        assert_eq!(parsed[1].retained_count, 1);
    }

    #[test]
    fn svg_has_two_series() {
        let scored = synthetic(&[0.1, 0.6, 1.5], &[1.0, 2.0, 5.0]);
        let svg = curve_to_svg(&clarity_curve(&scored, &DEFAULT_DELTAS).unwrap());
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn scored_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scored.jsonl");
        let reference = init_params(&small(), 3).unwrap();
        let mut pair = PreferencePair::new("abcdefgh", "bcdefghij", "zzqq").with_scores(8.0, 2.0);
        pair.extra.insert("source".into(), serde_json::json!("synthetic"));
        let scored = annotate(&Dataset::new(vec![pair]), &reference).unwrap();
        write_scored_jsonl(&scored, &path).unwrap();
        let loaded = load_scored_jsonl(&path).unwrap();
        assert_eq!(loaded[0].pair, scored[0].pair);
        assert_eq!(loaded[0].gap, scored[0].gap);
        assert_eq!(loaded[0].chosen_score.logp_norm, scored[0].chosen_score.logp_norm);
        // a scored file is also a valid plain dataset
        let plain = crate::corpus::load_jsonl(&path).unwrap();
        assert!(plain.pairs[0].extra.contains_key("gap"));
        // and re-annotating it does not duplicate the score keys
        let again = annotate(&plain, &reference).unwrap();
        assert_eq!(again[0].pair, scored[0].pair);
    }

    #[test]
    fn inconsistent_gap_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"prompt":"p","chosen":"c","rejected":"r","logp_chosen_norm":-1.0,"logp_rejected_norm":-2.0,"gap":0.5}"#,
        )
        .unwrap();
        let err = load_scored_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    proptest! {
        #[test]
        fn nested_retention(
            gaps in proptest::collection::vec(0.0..3.0f64, 0..40),
            mut deltas in proptest::collection::vec(0.0..3.5f64, 1..6),
        ) {
            deltas.sort_by(f64::total_cmp);
            let clar: Vec<f64> = gaps.iter().map(|g| (g * 2.0).min(10.0)).collect();
            let scored = synthetic(&gaps, &clar);
            let rows = clarity_curve(&scored, &deltas).unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].retained_count <= w[0].retained_count);
            }
            for w in deltas.windows(2) {
                let loose = filter(&scored, w[0]).unwrap();
                let tight = filter(&scored, w[1]).unwrap();
                prop_assert!(tight.iter().all(|t| loose.contains(t)));
            }
        }

        #[test]
        fn swap_leaves_gap(gap in 0.0..5.0f64, base in -8.0..0.0f64) {
            let s = ScoredPair::new(
                PreferencePair::new("p", "c", "r").with_scores(7.0, 1.0),
                NormalizedScore::new(base, 1),
                NormalizedScore::new(base - gap, 1),
            );
            prop_assert_eq!(s.swapped().gap, s.gap);
            prop_assert_eq!(clarity(&s.swapped().pair).unwrap(), clarity(&s.pair).unwrap());
        }
    }
}
