//! CSV, JSON and SVG outputs of a benchmark run.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::{BenchmarkBundle, TrialRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitStatus {
    Complete,
    /// The bundle had no trial rows; only the manifest was written.
    ManifestOnly,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: String,
    config_hash: &'a str,
    config: &'a super::BenchmarkConfig,
    trial_seeds: &'a [u64],
    version: &'static str,
    rows: usize,
    failures: &'a [super::TrialFailure],
    files: Vec<String>,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(200, 40, 40),
    RGBColor(40, 140, 60),
    RGBColor(40, 80, 200),
    RGBColor(200, 140, 20),
    RGBColor(120, 60, 160),
    RGBColor(60, 60, 60),
];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn posterior_plot(path: &Path, bundle: &BenchmarkBundle, curve: &super::CurveRecord) -> Result<()> {
    let band: Vec<(f64, f64, f64)> = curve
        .grid
        .iter()
        .zip(curve.mean.iter().zip(&curve.variance))
        .map(|(x, (m, v))| (*x, m - 1.96 * v.sqrt(), m + 1.96 * v.sqrt()))
        .collect();
    let (xlo, xhi) = bounds(curve.grid.iter().copied());
    let (ylo, yhi) = bounds(
        band.iter()
            .flat_map(|b| [b.1, b.2])
            .chain(bundle.oracle.values.iter().copied()),
    );
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{}: posterior mean and 95% band", curve.method),
            ("sans-serif", 20),
        )
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(xlo..xhi, ylo..yhi)
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    let mut poly: Vec<(f64, f64)> = band.iter().map(|b| (b.0, b.1)).collect();
    poly.extend(band.iter().rev().map(|b| (b.0, b.2)));
    chart
        .draw_series(std::iter::once(Polygon::new(
            poly,
            PALETTE[0].mix(0.2).filled(),
        )))
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            curve.grid.iter().copied().zip(curve.mean.iter().copied()),
            &PALETTE[0],
        ))
        .map_err(plot_err)?
        .label("posterior mean")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], PALETTE[0]));
    if bundle.oracle.grid.len() == curve.grid.len() {
        chart
            .draw_series(LineSeries::new(
                bundle
                    .oracle
                    .grid
                    .iter()
                    .copied()
                    .zip(bundle.oracle.values.iter().copied()),
                &BLACK,
            ))
            .map_err(plot_err)?
            .label("oracle")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn lines_plot(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    diagonal: bool,
) -> Result<()> {
    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (ylo, yhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(xlo..xhi, ylo..yhi)
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    if diagonal {
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.4)))
            .map_err(plot_err)?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), &c))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes the run's tables, manifest and plots into `out_dir`.
pub fn emit_outputs(bundle: &BenchmarkBundle, out_dir: &Path) -> Result<EmitStatus> {
    std::fs::create_dir_all(out_dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let status = if bundle.is_empty() {
        EmitStatus::ManifestOnly
    } else {
        let p = out_dir.join("trial_rows.csv");
        write_rows(&p, &bundle.rows)?;
        files.push(p);
        let p = out_dir.join("aggregates.csv");
        write_rows(&p, &bundle.aggregates)?;
        files.push(p);

        #[derive(Serialize)]
        struct OracleRow {
            x: f64,
            value: f64,
            stderr: f64,
        }
        let p = out_dir.join("oracle.csv");
        write_rows(
            &p,
            (0..bundle.oracle.grid.len()).map(|i| OracleRow {
                x: bundle.oracle.grid[i],
                value: bundle.oracle.values[i],
                stderr: bundle.oracle.stderr[i],
            }),
        )?;
        files.push(p);

        #[derive(Serialize)]
        struct CurveRow<'a> {
            method: &'a str,
            x: f64,
            mean: f64,
            variance: f64,
        }
        if !bundle.curves.is_empty() {
            let p = out_dir.join("curves.csv");
            write_rows(
                &p,
                bundle.curves.iter().flat_map(|c| {
                    (0..c.grid.len()).map(move |i| CurveRow {
                        method: &c.method,
                        x: c.grid[i],
                        mean: c.mean[i],
                        variance: c.variance[i],
                    })
                }),
            )?;
            files.push(p);
            for c in &bundle.curves {
                let p = out_dir.join(format!("posterior_{}.svg", c.method));
                posterior_plot(&p, bundle, c)?;
                files.push(p);
            }
        }

        #[derive(Serialize)]
        struct ProfileRow<'a> {
            method: &'a str,
            subset: &'a str,
            alpha: f64,
            coverage: f64,
            abs_error: f64,
            band_lower: f64,
            band_upper: f64,
        }
        #[derive(Serialize)]
        struct SummaryRow<'a> {
            method: &'a str,
            subset: &'a str,
            calibration_error: f64,
            lower: f64,
            upper: f64,
        }
        if !bundle.calibration.is_empty() {
            let p = out_dir.join("calibration_profiles.csv");
            write_rows(
                &p,
                bundle.calibration.iter().flat_map(|c| {
                    let pr = &c.profile;
                    (0..pr.alphas.len()).map(move |i| ProfileRow {
                        method: &c.method,
                        subset: &c.subset,
                        alpha: pr.alphas[i],
                        coverage: pr.coverage[i],
                        abs_error: pr.abs_error[i],
                        band_lower: pr.band_lower[i],
                        band_upper: pr.band_upper[i],
                    })
                }),
            )?;
            files.push(p);
            let p = out_dir.join("calibration_summary.csv");
            write_rows(
                &p,
                bundle.calibration.iter().map(|c| SummaryRow {
                    method: &c.method,
                    subset: &c.subset,
                    calibration_error: c.profile.error,
                    lower: c.profile.error_band.0,
                    upper: c.profile.error_band.1,
                }),
            )?;
            files.push(p);
            let mut subsets: Vec<&str> = bundle
                .calibration
                .iter()
                .map(|c| c.subset.as_str())
                .collect();
            subsets.dedup();
            for sub in subsets {
                let sel = bundle.calibration.iter().filter(|c| c.subset == sub);
                let errs: Vec<(String, Vec<(f64, f64)>)> = sel
                    .clone()
                    .map(|c| {
                        let pr = &c.profile;
                        (
                            c.method.clone(),
                            pr.alphas
                                .iter()
                                .copied()
                                .zip(pr.abs_error.iter().copied())
                                .collect(),
                        )
                    })
                    .collect();
                let p = out_dir.join(format!("calibration_error_{sub}.svg"));
                lines_plot(
                    &p,
                    &format!("coverage error by level ({sub})"),
                    &errs,
                    false,
                )?;
                files.push(p);
                let covs: Vec<(String, Vec<(f64, f64)>)> = sel
                    .map(|c| {
                        let pr = &c.profile;
                        (
                            c.method.clone(),
                            pr.alphas
                                .iter()
                                .copied()
                                .zip(pr.coverage.iter().copied())
                                .collect(),
                        )
                    })
                    .collect();
                let p = out_dir.join(format!("coverage_{sub}.svg"));
                lines_plot(&p, &format!("empirical coverage ({sub})"), &covs, true)?;
                files.push(p);
            }
        }

        #[derive(Serialize)]
        struct TraceRow<'a> {
            trial: usize,
            method: &'a str,
            iteration: usize,
            x: f64,
            y: f64,
            best: f64,
            regret: f64,
        }
        if !bundle.traces.is_empty() {
            let p = out_dir.join("bo_traces.csv");
            write_rows(
                &p,
                bundle.traces.iter().flat_map(|t| {
                    (0..t.trace.xs.len()).map(move |i| TraceRow {
                        trial: t.trial,
                        method: &t.method,
                        iteration: i + 1,
                        x: t.trace.xs[i],
                        y: t.trace.ys[i],
                        best: t.trace.best[i],
                        regret: t.trace.regret[i],
                    })
                }),
            )?;
            files.push(p);
            let mut methods: Vec<&str> = Vec::new();
            for t in &bundle.traces {
                if !methods.contains(&t.method.as_str()) {
                    methods.push(&t.method);
                }
            }
            let series: Vec<(String, Vec<(f64, f64)>)> = methods
                .iter()
                .map(|m| {
                    let ts: Vec<&Vec<f64>> = bundle
                        .traces
                        .iter()
                        .filter(|t| t.method == *m)
                        .map(|t| &t.trace.best)
                        .collect();
                    let len = ts.iter().map(|b| b.len()).min().unwrap_or(0);
                    let pts = (0..len)
                        .map(|i| {
                            (
                                (i + 1) as f64,
                                ts.iter().map(|b| b[i]).sum::<f64>() / ts.len() as f64,
                            )
                        })
                        .collect();
                    (m.to_string(), pts)
                })
                .collect();
            let p = out_dir.join("best_value.svg");
            lines_plot(&p, "mean best value per iteration", &series, false)?;
            files.push(p);
        }

        let p = out_dir.join("bundle.json");
        std::fs::write(&p, serde_json::to_string_pretty(bundle)?)?;
        files.push(p);
        EmitStatus::Complete
    };

    let manifest = Manifest {
        experiment: bundle.config.experiment.to_string(),
        config_hash: &bundle.config_hash,
        config: &bundle.config,
        trial_seeds: &bundle.trial_seeds,
        version: env!("CARGO_PKG_VERSION"),
        rows: bundle.rows.len(),
        failures: &bundle.failures,
        files: files
            .iter()
            .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(status)
}
