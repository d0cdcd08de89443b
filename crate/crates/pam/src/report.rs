//! Tables and SVG plots from persisted reports.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::harness::{AblationReport, RunReport};

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Accuracy after each stage, one line per series.
pub fn accuracy_plot(path: &Path, title: &str, series: &[(String, Vec<f64>)]) -> Result<()> {
    let err = plot_err(path);
    let stages = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(1f64..stages as f64, 0f64..100f64)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("stage")
        .y_desc("accuracy (%)")
        .x_labels(stages)
        .x_label_formatter(&|x| format!("{x:.0}"))
        .draw()
        .map_err(&err)?;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<(f64, f64)> = values.iter().enumerate().map(|(b, &a)| ((b + 1) as f64, a)).collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(&err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(&err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)
}

/// Row-normalised task-by-module selection heatmap.
pub fn confusion_plot(path: &Path, counts: &[Vec<usize>]) -> Result<()> {
    let err = plot_err(path);
    let tasks = counts.len().max(1);
    let modules = counts.first().map_or(1, Vec::len).max(1);
    let root = SVGBackend::new(path, (560, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("module selection", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..modules, 0..tasks)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("selected module")
        .y_desc("true task")
        .x_labels(modules)
        .y_labels(tasks)
        .draw()
        .map_err(&err)?;
    let cells = counts.iter().enumerate().flat_map(|(t, row)| {
        let total = row.iter().sum::<usize>().max(1) as f64;
        row.iter().enumerate().map(move |(m, &c)| {
            let shade = c as f64 / total;
            let v = (255.0 * (1.0 - shade)) as u8;
            Rectangle::new([(m, t), (m + 1, t + 1)], RGBColor(v, v, 255).filled())
        })
    });
    chart.draw_series(cells).map_err(&err)?;
    root.present().map_err(&err)
}

/// Final accuracy per arm with one bar per value.
pub fn ablation_plot(path: &Path, axis: &str, arms: &[(String, f64, f64)]) -> Result<()> {
    let err = plot_err(path);
    let n = arms.len().max(1);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{axis} sweep"), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..n).into_segmented(), 0f64..100f64)
        .map_err(&err)?;
    let labels: Vec<String> = arms.iter().map(|a| a.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc(axis)
        .y_desc("final accuracy (%)")
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(arms.iter().enumerate().map(|(i, (_, mean, _))| {
            Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *mean)],
                PALETTE[i % PALETTE.len()].mix(0.8).filled(),
            )
        }))
        .map_err(&err)?;
    chart
        .draw_series(arms.iter().enumerate().filter(|a| a.1 .2 > 0.0).map(|(i, (_, mean, std))| {
            PathElement::new(
                vec![(SegmentValue::CenterOf(i), mean - std), (SegmentValue::CenterOf(i), mean + std)],
                BLACK.stroke_width(2),
            )
        }))
        .map_err(&err)?;
    root.present().map_err(&err)
}

/// Plots for one run directory; returns the files written.
pub fn render_run(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut series = vec![
        ("PAM (CIL)".to_string(), report.per_stage_accuracy.clone()),
        ("PAM (TIL)".to_string(), report.til_per_stage_accuracy.clone()),
    ];
    if let Some(b) = &report.baseline {
        series.push(("finetune".to_string(), b.per_stage_accuracy.clone()));
    }
    let acc = dir.join("accuracy.svg");
    accuracy_plot(&acc, &format!("seed {}", report.seed), &series)?;
    let conf = dir.join("confusion.svg");
    confusion_plot(&conf, &report.confusion.counts)?;
    Ok(vec![acc, conf])
}

pub fn render_ablation(report: &AblationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut axes: Vec<&str> = report.arms.iter().map(|a| a.axis.as_str()).collect();
    axes.dedup();
    let mut out = Vec::new();
    for axis in axes {
        let arms: Vec<(String, f64, f64)> = report
            .arms_of(axis)
            .iter()
            .map(|a| (a.value.clone(), a.final_accuracy.mean, a.final_accuracy.std))
            .collect();
        let path = dir.join(format!("ablation_{axis}.svg"));
        ablation_plot(&path, axis, &arms)?;
        out.push(path);
    }
    Ok(out)
}

/// Plain-text table of run reports.
pub fn run_table(reports: &[(PathBuf, RunReport)]) -> String {
    let width = reports.iter().map(|(p, _)| p.display().to_string().len()).max().unwrap_or(3).max(3);
    let mut s = format!("{:<width$}  seed  stages  modules  avg_acc  final_acc  til_final  baseline\n", "run");
    for (path, r) in reports {
        let baseline = r.baseline.as_ref().map_or("-".to_string(), |b| format!("{:.2}", b.final_accuracy));
        s.push_str(&format!(
            "{:<width$}  {:>4}  {:>6}  {:>7}  {:>7.2}  {:>9.2}  {:>9.2}  {:>8}\n",
            path.display(),
            r.seed,
            r.per_stage_accuracy.len(),
            r.module_count,
            r.average_accuracy,
            r.final_accuracy,
            r.til_per_stage_accuracy.last().copied().unwrap_or(0.0),
            baseline
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.svg");
        accuracy_plot(&p, "t", &[("x".into(), vec![90.0, 80.0, 70.0])]).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.contains("<svg") && svg.contains("accuracy (%)"));
        let p = dir.path().join("c.svg");
        confusion_plot(&p, &[vec![3, 0], vec![1, 2]]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<rect"));
        let p = dir.path().join("b.svg");
        ablation_plot(&p, "magnitude", &[("0.95".into(), 80.0, 1.0), ("0.98".into(), 70.0, 0.0)]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<svg"));
    }
}
