//! Plot-ready exports: CSV tables and a plain SVG of forecast trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use trajectron::data::raster::load_map_raster;
use trajectron::evaluate::MetricsReport;
use trajectron::model::PredictionOutput;

#[derive(Args)]
pub struct PlotArgs {
    /// Line-delimited prediction records as written by `predict`.
    #[arg(long, conflicts_with = "metrics")]
    pub predictions: Option<PathBuf>,
    /// Metrics report as written by `evaluate`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Trajectory drawing; predictions only.
    #[arg(long, requires = "predictions")]
    pub svg: Option<PathBuf>,
    /// Map raster drawn under the trajectories.
    #[arg(long, requires = "svg")]
    pub map: Option<PathBuf>,
}

pub fn run(args: &PlotArgs) -> Result<()> {
    if args.csv.is_none() && args.svg.is_none() {
        bail!("nothing to write: pass --csv and/or --svg");
    }
    if let Some(p) = &args.predictions {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let preds = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<PredictionOutput>(l).with_context(|| format!("{}:{}", p.display(), i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(out) = &args.csv {
            fs::write(out, predictions_csv(&preds))?;
        }
        if let Some(out) = &args.svg {
            let map = args.map.as_deref().map(load_map_raster).transpose()?;
            fs::write(out, predictions_svg(&preds, map.as_ref()))?;
        }
        Ok(())
    } else if let Some(p) = &args.metrics {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let report: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        if let Some(out) = &args.csv {
            fs::write(out, metrics_csv(&report))?;
        }
        Ok(())
    } else {
        bail!("pass --predictions or --metrics");
    }
}

pub fn predictions_csv(preds: &[PredictionOutput]) -> String {
    let mut s = String::from("node,t,scheme,sample,latent,step,x,y\n");
    for p in preds {
        for (k, (tr, z)) in p.trajectories.iter().zip(&p.latent).enumerate() {
            for (step, [x, y]) in tr.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{k},{z},{},{x},{y}", p.node.0, p.t, p.scheme, step + 1);
            }
        }
    }
    s
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from("scheme,instances,samples,ade,fde,kde_nll,min_ade,min_fde,violation_rate\n");
    for r in &report.schemes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.instances,
            r.samples,
            r.ade,
            r.fde,
            opt(r.kde_nll),
            opt(r.best_of_n.map(|b| b.ade)),
            opt(r.best_of_n.map(|b| b.fde)),
            opt(r.violation_rate),
        );
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn predictions_svg(preds: &[PredictionOutput], map: Option<&trajectron::data::raster::MapRaster>) -> String {
    let pts = preds.iter().flat_map(|p| p.trajectories.iter().flatten());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for [x, y] in pts {
        x0 = x0.min(*x);
        y0 = y0.min(*y);
        x1 = x1.max(*x);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(1.0);
    (x0, y0, x1, y1) = (x0 - pad, y0 - pad, x1 + pad, y1 + pad);
    let (w, h) = (x1 - x0, y1 - y0);

    let mut s = String::new();
    // y flipped so that north is up
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0} {} {w} {h}" width="800" height="{}">"#,
        -y1,
        (800.0 * h / w).round()
    );
    let stroke = 0.002 * w.max(h);
    if let Some(m) = map {
        let _ = writeln!(s, r##"<g fill="#999" fill-opacity="0.5">"##);
        let (rows, cols) = (m.height, m.width);
        let r = m.resolution;
        let c0 = (((x0 - m.origin[0]) / r).floor().max(0.0) as usize).min(cols);
        let c1 = (((x1 - m.origin[0]) / r).ceil().max(0.0) as usize).min(cols);
        let r0 = (((y0 - m.origin[1]) / r).floor().max(0.0) as usize).min(rows);
        let r1 = (((y1 - m.origin[1]) / r).ceil().max(0.0) as usize).min(rows);
        for row in r0..r1 {
            for col in c0..c1 {
                if m.get(0, row, col) >= 0.5 {
                    let x = m.origin[0] + col as f64 * r;
                    let y = m.origin[1] + (row + 1) as f64 * r;
                    let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="{r}" height="{r}"/>"#, -y);
                }
            }
        }
        let _ = writeln!(s, "</g>");
    }
    for p in preds {
        for (tr, z) in p.trajectories.iter().zip(&p.latent) {
            let color = PALETTE[z % PALETTE.len()];
            let mut d = String::new();
            for [x, y] in tr {
                let _ = write!(d, "{x},{} ", -y);
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-opacity="0.4" stroke-width="{stroke}" points="{}"/>"#,
                d.trim_end()
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
