use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use mmfuse::eval::EmbeddingRow;
use mmfuse::train::LossRecord;
use plotters::prelude::*;

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!(crate::Usage(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Loss curves (total and each term) against iteration.
pub fn plot_history(csv_path: &Path, out: &Path) -> Result<()> {
    let rows: Vec<LossRecord> = read_rows(csv_path)?;
    let series: [(&str, fn(&LossRecord) -> f64, RGBColor); 5] = [
        ("total", |r| r.total, BLACK),
        ("qfl", |r| r.qfl, RED),
        ("ce", |r| r.ce, BLUE),
        ("giou", |r| r.giou, GREEN),
        ("l1", |r| r.l1, MAGENTA),
    ];
    let (x0, x1) = span(rows.iter().map(|r| r.iteration as f64));
    let (y0, y1) = span(rows.iter().flat_map(|r| series.iter().map(move |s| (s.1)(r))));
    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss")
        .draw()
        .map_err(draw_err)?;
    for (name, get, color) in series {
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.iteration as f64, get(r))), color))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// 2D embedding scatter, one colour per modality combination.
pub fn plot_embedding(csv_path: &Path, out: &Path) -> Result<()> {
    let rows: Vec<EmbeddingRow> = read_rows(csv_path)?;
    let (x0, x1) = span(rows.iter().map(|r| r.x));
    let (y0, y1) = span(rows.iter().map(|r| r.y));
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MAF features (PCA)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart.configure_mesh().draw().map_err(draw_err)?;
    let classes = rows.iter().map(|r| r.combination_id).max().unwrap_or(0) + 1;
    for c in 0..classes {
        let color = Palette99::pick(c).to_rgba();
        chart
            .draw_series(
                rows.iter()
                    .filter(|r| r.combination_id == c)
                    .map(|r| Circle::new((r.x, r.y), 3, color.filled())),
            )
            .map_err(draw_err)?
            .label(format!("combination {c}"))
            .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
