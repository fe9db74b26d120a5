//! Plain SVG output. Coordinates are printed with fixed precision so equal
//! inputs give equal bytes.

use std::fmt::Write as _;

use ndarray::Array2;
use voicepd::eval::PatientOutcome;
use voicepd::Label;

const STRATA: [&str; 6] = ["HP", "HY1", "HY2", "HY3", "HY4", "HY5"];

fn header(out: &mut String, width: f64, height: f64, comment: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

fn stratum(outcome: &PatientOutcome) -> &'static str {
    match outcome.info.hy_grade {
        Some(g @ 1..=5) => STRATA[g as usize],
        _ => STRATA[0],
    }
}

/// Voting certainty per patient, one column per group, with the 0.5
/// decision threshold dotted across.
pub fn voting_plot(outcomes: &[PatientOutcome], comment: &str) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let col_w = plot_w / STRATA.len() as f64;
    let y_of = |c: f64| top + (1.0 - c) * plot_h;

    let mut out = String::new();
    header(&mut out, width, height, comment);
    let _ = writeln!(
        out,
        r#"<line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        out,
        r#"<line x1="{left:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{tick:.2}</text>"#,
            left - 6.0,
            y_of(tick) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {0:.2})" text-anchor="middle">voting certainty (PD)</text>"#,
        top + plot_h / 2.0
    );
    let _ = writeln!(
        out,
        r#"<line class="threshold" x1="{left:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
        y_of(0.5),
        left + plot_w
    );
    for (i, name) in STRATA.iter().enumerate() {
        let cx = left + (i as f64 + 0.5) * col_w;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="12" text-anchor="middle">{name}</text>"#,
            top + plot_h + 20.0
        );
        let members: Vec<&PatientOutcome> = outcomes.iter().filter(|o| stratum(o) == *name).collect();
        let n = members.len().max(1) as f64;
        for (j, o) in members.iter().enumerate() {
            // spread points across the middle half of the column
            let x = cx + (j as f64 + 0.5 - n / 2.0) / n * col_w * 0.5;
            let colour = if o.info.group == Label::Pd {
                "#c0392b"
            } else {
                "#2874a6"
            };
            let fill = if o.voting.label == o.info.group { colour } else { "none" };
            let _ = writeln!(
                out,
                r#"<circle class="patient" data-patient="{}" cx="{x:.2}" cy="{:.2}" r="4" stroke="{colour}" fill="{fill}"/>"#,
                o.info.patient_id,
                y_of(o.voting.certainty)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Averages rows down to at most `max_rows`; input is `time × channels`,
/// output `channels' × time`.
fn pool_channels(map: &Array2<f64>, max_rows: usize) -> Array2<f64> {
    let (frames, dims) = map.dim();
    let rows = dims.min(max_rows).max(1);
    let mut out = Array2::zeros((rows, frames));
    for r in 0..rows {
        let lo = r * dims / rows;
        let hi = ((r + 1) * dims / rows).max(lo + 1);
        for t in 0..frames {
            let sum: f64 = (lo..hi).map(|d| map[[t, d]]).sum();
            out[[r, t]] = sum / (hi - lo) as f64;
        }
    }
    out
}

/// Placement of a panel in user units.
#[derive(Clone, Copy)]
struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn heatmap(out: &mut String, id: &str, title: &str, cells: &Array2<f64>, at: Rect, duration_s: f64) {
    let Rect { x: x0, y: y0, w, h } = at;
    let (rows, cols) = cells.dim();
    let (lo, hi) = cells
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cw = w / cols.max(1) as f64;
    let rh = h / rows as f64;
    let _ = writeln!(
        out,
        r#"<g id="{id}" data-x="{x0:.2}" data-width="{w:.2}" data-duration="{duration_s:.4}" data-frames="{cols}">"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{title}</text>"#,
        x0 + w / 2.0,
        y0 - 6.0
    );
    for r in 0..rows {
        for c in 0..cols {
            let level = (255.0 * (cells[[r, c]] - lo) / span).round() as u8;
            // low channels at the bottom
            let y = y0 + h - (r + 1) as f64 * rh;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="rgb({level},{level},{level})"/>"#,
                x0 + c as f64 * cw,
                cw + 0.05,
                rh + 0.05
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">time (0 to {duration_s:.2} s)</text>"#,
        x0 + w / 2.0,
        y0 + h + 16.0
    );
    out.push_str("</g>\n");
}

/// Log-magnitude spectrogram and conv feature map of the same clip side by
/// side, each panel spanning the clip duration with the same width.
pub fn featuremap(spectrogram: &Array2<f64>, features: &Array2<f64>, duration_s: f64, comment: &str) -> String {
    let (panel_w, panel_h) = (400.0, 256.0);
    let (margin, gap, top) = (30.0, 40.0, 30.0);
    let width = 2.0 * panel_w + gap + 2.0 * margin;
    let height = panel_h + top + 40.0;
    let mut out = String::new();
    header(&mut out, width, height, comment);
    let log_spec = spectrogram.mapv(|x| (x + 1e-9).ln());
    heatmap(
        &mut out,
        "spectrogram",
        "spectrogram (log magnitude)",
        &pool_channels(&log_spec, 128),
        Rect {
            x: margin,
            y: top,
            w: panel_w,
            h: panel_h,
        },
        duration_s,
    );
    heatmap(
        &mut out,
        "featuremap",
        "conv feature map",
        &pool_channels(features, 128),
        Rect {
            x: margin + panel_w + gap,
            y: top,
            w: panel_w,
            h: panel_h,
        },
        duration_s,
    );
    out.push_str("</svg>\n");
    out
}

/// Min/max envelope of a waveform as polyline points.
fn envelope(samples: &[f64], x0: f64, y_mid: f64, w: f64, half_h: f64) -> String {
    let columns = samples.len().clamp(1, 800);
    let mut points = String::new();
    let mut lows = Vec::with_capacity(columns);
    for c in 0..columns {
        let lo = c * samples.len() / columns;
        let hi = ((c + 1) * samples.len() / columns).max(lo + 1).min(samples.len());
        let chunk = &samples[lo..hi];
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        let x = x0 + (c as f64 + 0.5) * w / columns as f64;
        let _ = write!(points, "{x:.2},{:.2} ", y_mid - max.clamp(-1.0, 1.0) * half_h);
        lows.push((x, min));
    }
    for (x, min) in lows.into_iter().rev() {
        let _ = write!(points, "{x:.2},{:.2} ", y_mid - min.clamp(-1.0, 1.0) * half_h);
    }
    points.trim_end().to_string()
}

/// Waveform before and after augmentation, stacked.
pub fn waveform_pair(before: &[f64], after: &[f64], sample_rate: u32, comment: &str) -> String {
    let (width, panel_h, margin) = (800.0, 160.0, 30.0);
    let height = 2.0 * panel_h + 3.0 * margin;
    let mut out = String::new();
    header(&mut out, width, height, comment);
    for (i, (id, samples)) in [("before", before), ("after", after)].into_iter().enumerate() {
        let y0 = margin + i as f64 * (panel_h + margin);
        let mid = y0 + panel_h / 2.0;
        let _ = writeln!(
            out,
            r#"<text x="{margin:.2}" y="{:.2}" font-size="12">{id} ({:.3} s)</text>"#,
            y0 - 6.0,
            samples.len() as f64 / f64::from(sample_rate)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{margin:.2}" y1="{mid:.2}" x2="{:.2}" y2="{mid:.2}" stroke="lightgray"/>"#,
            width - margin
        );
        // panel-local coordinates so equal waveforms give equal points
        let _ = writeln!(
            out,
            r#"<polygon id="{id}" transform="translate(0 {y0:.2})" points="{}" fill="steelblue" stroke="steelblue" stroke-width="0.5"/>"#,
            envelope(samples, margin, panel_h / 2.0, width - 2.0 * margin, panel_h / 2.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use voicepd::data::PatientInfo;
    use voicepd::eval::vote_labels;

    fn outcome(id: &str, group: Label, hy: Option<u8>, pd_votes: usize, total: usize) -> PatientOutcome {
        let labels: Vec<Label> = (0..total)
            .map(|i| if i < pd_votes { Label::Pd } else { Label::Hp })
            .collect();
        PatientOutcome {
            fold: 1,
            info: PatientInfo {
                patient_id: id.into(),
                group,
                hy_grade: hy,
            },
            voting: vote_labels(id, &labels).unwrap(),
        }
    }

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!(r#" {name}=""#);
        let start = tag.find(&key).unwrap() + key.len();
        tag[start..].split('"').next().unwrap().parse().unwrap()
    }

    #[test]
    fn misclassified_pd_sits_below_threshold() {
        let svg = voting_plot(
            &[
                outcome("PD01", Label::Pd, Some(2), 4, 10),
                outcome("HP01", Label::Hp, None, 0, 10),
            ],
            "stamp",
        );
        let line = svg.lines().find(|l| l.contains(r#"class="threshold""#)).unwrap();
        assert!(line.contains("stroke-dasharray"));
        let y_threshold = attr(line, "y1");
        let pd = svg.lines().find(|l| l.contains(r#"data-patient="PD01""#)).unwrap();
        assert!(attr(pd, "cy") > y_threshold);
        assert!(pd.contains(r#"fill="none""#));
        // the HY2 column is the third one
        let hp = svg.lines().find(|l| l.contains(r#"data-patient="HP01""#)).unwrap();
        assert!(attr(pd, "cx") > attr(hp, "cx"));
    }

    #[test]
    fn featuremap_panels_share_width() {
        let spec = Array2::from_shape_fn((17, 512), |(t, f)| (t + f) as f64);
        let feats = Array2::from_shape_fn((49, 64), |(t, d)| (t * d) as f64);
        let svg = featuremap(&spec, &feats, 1.0, "stamp");
        let panel = |id: &str| {
            svg.lines()
                .find(|l| l.contains(&format!(r#"<g id="{id}""#)))
                .unwrap()
                .to_string()
        };
        let (a, b) = (panel("spectrogram"), panel("featuremap"));
        assert_eq!(attr(&a, "data-width"), attr(&b, "data-width"));
        assert_eq!(attr(&a, "data-duration"), attr(&b, "data-duration"));
        assert_eq!(attr(&b, "data-frames"), 49.0);
    }

    #[test]
    fn identical_waveforms_draw_identical_traces() {
        let x: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.01).sin()).collect();
        let svg = waveform_pair(&x, &x, 16000, "stamp");
        let points = |id: &str| {
            let line = svg.lines().find(|l| l.contains(&format!(r#"id="{id}""#))).unwrap();
            line.split("points=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap()
                .to_string()
        };
        assert_eq!(points("before"), points("after"));
    }
}
