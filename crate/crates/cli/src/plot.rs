use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use vcil::report::RunSummary;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font for chart text once. Set `VCIL_FONT` to pick one.
/// Without a font the charts are drawn without labels.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("VCIL_FONT").ok();
        let candidates = env.iter().map(String::as_str).chain(FONT_PATHS);
        for path in candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots will have no labels");
        false
    })
}

/// Mean `ACC_k` against the number of seen classes, CNN left and NME right.
pub fn accuracy_curves(runs: &[&RunSummary], path: &Path) -> Result<()> {
    let text = font_available();
    let root = BitMapBackend::new(path, (1200, 480)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let panels = root.split_evenly((1, 2));
    let max_seen: usize = runs.iter().map(|r| r.group_sizes.iter().sum::<usize>()).max().unwrap_or(1);
    for (panel, name) in panels.iter().zip(["CNN", "NME"]) {
        let mut builder = ChartBuilder::on(panel);
        builder.margin(12);
        if text {
            builder
                .caption(format!("average accuracy ({name})"), ("sans-serif", 20))
                .x_label_area_size(36)
                .y_label_area_size(44);
        }
        let mut chart =
            builder.build_cartesian_2d(0f64..max_seen as f64 + 1.0, 0f64..100f64).map_err(|e| err(&e))?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("classes seen").y_desc("ACC (%)");
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(|e| err(&e))?;
        for (i, run) in runs.iter().enumerate() {
            let acc = if name == "CNN" { &run.acc_cnn } else { &run.acc_nme };
            let mut seen = 0;
            let points: Vec<(f64, f64)> = run
                .group_sizes
                .iter()
                .zip(acc)
                .map(|(g, a)| {
                    seen += g;
                    (seen as f64, a.mean)
                })
                .collect();
            let color = Palette99::pick(i).to_rgba();
            let series = chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(|e| err(&e))?;
            if text {
                series
                    .label(run.label.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            }
            chart
                .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(|e| err(&e))?;
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(&e))?;
        }
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
