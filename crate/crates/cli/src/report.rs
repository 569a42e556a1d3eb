//! Accuracy-vs-cycle SVG charts from run CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::run::CSV_HEADER;
use crate::CliError;

/// Mean accuracy per cycle with a 95% band half-width (0 for single runs).
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub strategy: String,
    /// `(cycle, mean, half_width, runs)`.
    pub points: Vec<(usize, f64, f64, usize)>,
}

#[derive(Debug)]
struct Row {
    cycle: usize,
    accuracy: f64,
    strategy: String,
    seed: u64,
}

fn read_csv(path: &Path) -> Result<Vec<Row>, CliError> {
    let name = path.display();
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(CliError::Format(format!("{name}: empty file")));
    }
    for (i, want) in CSV_HEADER.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => {
                return Err(CliError::Format(format!(
                    "{name}: column {} is `{got}`, expected `{want}`",
                    i + 1
                )))
            }
            None => return Err(CliError::Format(format!("{name}: missing column `{want}`"))),
        }
    }
    if header.len() > CSV_HEADER.len() {
        return Err(CliError::Format(format!(
            "{name}: unexpected column `{}`",
            &header[CSV_HEADER.len()]
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |col: &str| CliError::Format(format!("{name}: row {}: bad `{col}` value", line + 2));
        rows.push(Row {
            cycle: field(0).parse().map_err(|_| bad("cycle"))?,
            accuracy: field(2).parse().map_err(|_| bad("test_accuracy"))?,
            strategy: field(5).to_string(),
            seed: field(6).parse().map_err(|_| bad("seed"))?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Format(format!("{name}: no data rows")));
    }
    Ok(rows)
}

/// Groups rows by strategy and cycle across all files.
pub fn curves(paths: &[impl AsRef<Path>]) -> Result<Vec<Curve>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Format("no input CSV files".into()));
    }
    let mut groups: BTreeMap<String, BTreeMap<usize, BTreeMap<u64, f64>>> = BTreeMap::new();
    for p in paths {
        for row in read_csv(p.as_ref())? {
            groups
                .entry(row.strategy)
                .or_default()
                .entry(row.cycle)
                .or_default()
                .insert(row.seed, row.accuracy);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(strategy, cycles)| Curve {
            strategy,
            points: cycles
                .into_iter()
                .map(|(cycle, seeds)| {
                    let xs: Vec<f64> = seeds.into_values().collect();
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let half = if xs.len() > 1 {
                        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                        1.96 * (var / n).sqrt()
                    } else {
                        0.0
                    };
                    (cycle, mean, half, xs.len())
                })
                .collect(),
        })
        .collect())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Standalone SVG line chart.
pub fn render_svg(curves: &[Curve]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let all = curves.iter().flat_map(|c| c.points.iter());
    let (mut cmin, mut cmax, mut amin, mut amax) = (usize::MAX, 0usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(c, m, hw, _) in all {
        cmin = cmin.min(c);
        cmax = cmax.max(c);
        amin = amin.min(m - hw);
        amax = amax.max(m + hw);
    }
    if cmin > cmax {
        cmin = 0;
        cmax = 1;
    }
    if cmax == cmin {
        cmax = cmin + 1;
    }
    if !(amax > amin) {
        amin -= 0.05;
        amax += 0.05;
    }
    let pad = 0.05 * (amax - amin);
    let (amin, amax) = ((amin - pad).max(0.0), (amax + pad).min(1.0));
    let sx = |c: usize| left + pw * (c - cmin) as f64 / (cmax - cmin) as f64;
    let sy = |a: f64| top + ph * (1.0 - (a - amin) / (amax - amin));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=5 {
        let a = amin + (amax - amin) * i as f64 / 5.0;
        let y = sy(a);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{a:.3}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let step = ((cmax - cmin) / 10).max(1);
    let mut c = cmin;
    while c <= cmax {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#,
            sx(c),
            top + ph + 18.0
        );
        c += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">cycle</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">test accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if curve.points.iter().any(|p| p.2 > 0.0) {
            let upper: Vec<String> = curve
                .points
                .iter()
                .map(|&(c, m, hw, _)| format!("{:.2},{:.2}", sx(c), sy(m + hw)))
                .collect();
            let lower: Vec<String> = curve
                .points
                .iter()
                .rev()
                .map(|&(c, m, hw, _)| format!("{:.2},{:.2}", sx(c), sy(m - hw)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
        }
        let line: Vec<String> = curve
            .points
            .iter()
            .map(|&(c, m, _, _)| format!("{:.2},{:.2}", sx(c), sy(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&curve.strategy)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn cmd_report(inputs: &[impl AsRef<Path>], out: &Path) -> Result<Vec<Curve>, CliError> {
    let curves = curves(inputs)?;
    std::fs::write(out, render_svg(&curves))?;
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, strategy: &str, seed: u64, accs: &[f64]) -> std::path::PathBuf {
        let mut text = CSV_HEADER.join(",") + "\n";
        for (i, a) in accs.iter().enumerate() {
            text += &format!("{},{},{a},0.1,0.2,{strategy},{seed},0\n", i + 1, 10 + 5 * i);
        }
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn single_run_has_no_band() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "mlmoc", 0, &[0.5, 0.6, 0.7]);
        let out = d.path().join("a.svg");
        let c = cmd_report(&[p], &out).unwrap();
        assert_eq!(c.len(), 1);
        let svg = std::fs::read_to_string(out).unwrap();
        assert_eq!(svg.matches("class=\"mean\"").count(), 1);
        assert_eq!(svg.matches("class=\"band\"").count(), 0);
        assert!(!svg.contains("href"));
    }

    #[test]
    fn seeds_and_strategies_group() {
        let d = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for seed in 0..6 {
            let bump = seed as f64 * 0.01;
            paths.push(write(d.path(), &format!("m{seed}.csv"), "mlmoc", seed, &[0.5 + bump, 0.6 + bump]));
            paths.push(write(d.path(), &format!("r{seed}.csv"), "random", seed, &[0.4 + bump, 0.5 - bump]));
        }
        let c = curves(&paths).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].points[0].3, 6);
        assert!((c[0].points[0].1 - 0.525).abs() < 1e-12);
        let svg = render_svg(&c);
        assert_eq!(svg.matches("class=\"mean\"").count(), 2);
        assert_eq!(svg.matches("class=\"band\"").count(), 2);
    }

    #[test]
    fn schema_errors() {
        let d = tempfile::tempdir().unwrap();
        let empty = d.path().join("e.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(curves(&[&empty]), Err(CliError::Format(_))));
        let header_only = d.path().join("h.csv");
        std::fs::write(&header_only, CSV_HEADER.join(",") + "\n").unwrap();
        assert!(matches!(curves(&[&header_only]), Err(CliError::Format(_))));
        let bad = d.path().join("b.csv");
        std::fs::write(&bad, CSV_HEADER.join(",").replace("test_accuracy", "acc") + "\n1,2,3,4,5,x,0,0\n").unwrap();
        match curves(&[&bad]) {
            Err(CliError::Format(m)) => assert!(m.contains("`acc`"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
