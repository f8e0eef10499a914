//! Static SVG figures: sample curves, heatmap grids, posterior bands and
//! metric curves.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::grid::FunctionBatch;
use crate::metrics::{AutocovarianceCurve, Histogram};
use crate::observations::Observations;

fn draw_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    (lo - pad, hi + pad)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Up to `max` samples of channel `channel` of a 1D batch as curves.
pub fn plot_samples_1d(batch: &FunctionBatch, channel: usize, max: usize, title: &str, path: &Path) -> Result<()> {
    if batch.grid().dims() != 1 {
        return Err(Error::invalid("curve plots need a 1D batch"));
    }
    if channel >= batch.channels() {
        return Err(Error::invalid(format!("channel {channel} not present")));
    }
    let x = batch.grid().axis_coordinates(0);
    let n = x.len();
    let shown = batch.count().min(max);
    let (lo, hi) = bounds((0..shown).flat_map(|i| batch.sample_values(i)[channel * n..(channel + 1) * n].to_vec()));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(x[0]..x[n - 1], lo..hi)
        .map_err(|e| draw_err(path, e))?;
    chart.configure_mesh().x_desc("x").y_desc("u(x)").draw().map_err(|e| draw_err(path, e))?;
    for i in 0..shown {
        let v = &batch.sample_values(i)[channel * n..(channel + 1) * n];
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(x.iter().copied().zip(v.iter().copied()), color.stroke_width(1)))
            .map_err(|e| draw_err(path, e))?;
    }
    root.present().map_err(|e| draw_err(path, e))
}

fn heat(v: f64, lo: f64, hi: f64) -> RGBColor {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    // blue → white → red
    if t < 0.5 {
        let s = t / 0.5;
        RGBColor((59.0 + s * 196.0) as u8, (76.0 + s * 179.0) as u8, (192.0 + s * 63.0) as u8)
    } else {
        let s = (t - 0.5) / 0.5;
        RGBColor(255, (255.0 - s * 215.0) as u8, (255.0 - s * 215.0) as u8)
    }
}

/// Up to `max` samples of channel `channel` of a 2D batch as a grid of
/// heatmaps sharing one colour scale.
pub fn plot_heatmaps(batch: &FunctionBatch, channel: usize, max: usize, path: &Path) -> Result<()> {
    if batch.grid().dims() != 2 {
        return Err(Error::invalid("heatmaps need a 2D batch"));
    }
    if channel >= batch.channels() {
        return Err(Error::invalid(format!("channel {channel} not present")));
    }
    let res = batch.grid().resolution();
    let (rows, cols) = (res[0], res[1]);
    let n = rows * cols;
    let shown = batch.count().min(max).max(1);
    let per_row = (shown as f64).sqrt().ceil() as usize;
    let grid_rows = shown.div_ceil(per_row);
    let cell = 220;
    let root = SVGBackend::new(path, ((per_row * cell) as u32, (grid_rows * cell) as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    if batch.count() == 0 {
        return root.present().map_err(|e| draw_err(path, e));
    }
    let (lo, hi) = bounds((0..shown).flat_map(|i| batch.sample_values(i)[channel * n..(channel + 1) * n].to_vec()));
    let panels = root.split_evenly((grid_rows, per_row));
    for (i, panel) in panels.iter().enumerate().take(shown) {
        let v = &batch.sample_values(i)[channel * n..(channel + 1) * n];
        let area = panel.margin(6, 6, 6, 6);
        let mut chart = ChartBuilder::on(&area)
            .build_cartesian_2d(0..cols, 0..rows)
            .map_err(|e| draw_err(path, e))?;
        chart
            .draw_series((0..rows).flat_map(|r| {
                (0..cols).map(move |c| {
                    Rectangle::new([(c, rows - 1 - r), (c + 1, rows - r)], heat(v[r * cols + c], lo, hi).filled())
                })
            }))
            .map_err(|e| draw_err(path, e))?;
    }
    root.present().map_err(|e| draw_err(path, e))
}

/// Posterior mean with a shaded band, optional truth curve and observations.
pub struct BandPlot<'a> {
    pub x: &'a [f64],
    pub mean: &'a [f64],
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub truth: Option<&'a [f64]>,
    /// Reference mean and band (e.g. an analytic posterior), drawn dashed.
    pub reference: Option<(&'a [f64], &'a [f64], &'a [f64])>,
    pub observations: Option<&'a Observations>,
    pub title: &'a str,
}

pub fn plot_band(p: &BandPlot<'_>, path: &Path) -> Result<()> {
    let n = p.x.len();
    if n < 2 || p.mean.len() != n || p.lower.len() != n || p.upper.len() != n {
        return Err(Error::shape("band plot series lengths differ"));
    }
    let mut all: Vec<f64> = p.lower.iter().chain(p.upper).copied().collect();
    if let Some(t) = p.truth {
        all.extend_from_slice(t);
    }
    if let Some(o) = p.observations {
        all.extend_from_slice(o.channel_values(0));
    }
    let (lo, hi) = bounds(all.into_iter());
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(p.title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(p.x[0]..p.x[n - 1], lo..hi)
        .map_err(|e| draw_err(path, e))?;
    chart.configure_mesh().x_desc("x").y_desc("u(x)").draw().map_err(|e| draw_err(path, e))?;
    let band: Vec<(f64, f64)> = p
        .x
        .iter()
        .copied()
        .zip(p.upper.iter().copied())
        .chain(p.x.iter().copied().zip(p.lower.iter().copied()).rev())
        .collect();
    chart
        .draw_series(std::iter::once(Polygon::new(band, PALETTE[0].mix(0.25).filled())))
        .map_err(|e| draw_err(path, e))?
        .label("posterior band")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], PALETTE[0].mix(0.25).filled()));
    chart
        .draw_series(LineSeries::new(p.x.iter().copied().zip(p.mean.iter().copied()), PALETTE[0].stroke_width(2)))
        .map_err(|e| draw_err(path, e))?
        .label("posterior mean")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], PALETTE[0].stroke_width(2)));
    if let Some((m, l, u)) = p.reference {
        for (series, width) in [(m, 2), (l, 1), (u, 1)] {
            chart
                .draw_series(DashedLineSeries::new(
                    p.x.iter().copied().zip(series.iter().copied()),
                    6,
                    4,
                    PALETTE[3].stroke_width(width),
                ))
                .map_err(|e| draw_err(path, e))?;
        }
    }
    if let Some(t) = p.truth {
        chart
            .draw_series(LineSeries::new(p.x.iter().copied().zip(t.iter().copied()), BLACK.stroke_width(1)))
            .map_err(|e| draw_err(path, e))?
            .label("truth")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 15, y)], BLACK));
    }
    if let Some(o) = p.observations {
        let coords = o.points().coordinates();
        let dims = o.grid().dims();
        chart
            .draw_series(
                coords
                    .iter()
                    .zip(o.channel_values(0))
                    .map(|(c, v)| Circle::new((c[dims - 1], *v), 4, BLACK.filled())),
            )
            .map_err(|e| draw_err(path, e))?
            .label("observations")
            .legend(|(x, y)| Circle::new((x + 7, y), 4, BLACK.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))
}

/// Two panels: autocovariance curves and amplitude histograms, one series
/// per labelled input.
pub fn plot_metric_curves(
    autocov: &[(&str, &AutocovarianceCurve)],
    histograms: &[(&str, &Histogram)],
    path: &Path,
) -> Result<()> {
    let root = SVGBackend::new(path, (1100, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let (left, right) = root.split_horizontally(550);

    let xmax = autocov.iter().filter_map(|(_, c)| c.distances.last().copied()).fold(1e-9, f64::max);
    let (lo, hi) = bounds(autocov.iter().flat_map(|(_, c)| c.values.clone()));
    let mut chart = ChartBuilder::on(&left)
        .caption("autocovariance", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax, lo.min(0.0)..hi)
        .map_err(|e| draw_err(path, e))?;
    chart.configure_mesh().x_desc("lag").draw().map_err(|e| draw_err(path, e))?;
    for (k, (label, c)) in autocov.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(c.distances.iter().copied().zip(c.values.iter().copied()), color.stroke_width(2)))
            .map_err(|e| draw_err(path, e))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color.stroke_width(2)));
    }
    if !autocov.is_empty() {
        chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| draw_err(path, e))?;
    }

    let (xlo, xhi) = bounds(histograms.iter().flat_map(|(_, h)| h.edges.clone()));
    let ymax = histograms
        .iter()
        .flat_map(|(_, h)| h.masses.iter().zip(h.edges.windows(2)).map(|(m, w)| m / (w[1] - w[0])))
        .fold(1e-9, f64::max);
    let mut chart = ChartBuilder::on(&right)
        .caption("amplitude density", ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(xlo..xhi, 0.0..ymax * 1.05)
        .map_err(|e| draw_err(path, e))?;
    chart.configure_mesh().x_desc("value").draw().map_err(|e| draw_err(path, e))?;
    for (k, (label, h)) in histograms.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // density steps so histograms with different bin widths are comparable
        let pts: Vec<(f64, f64)> = h
            .edges
            .windows(2)
            .zip(&h.masses)
            .flat_map(|(w, m)| {
                let d = m / (w[1] - w[0]);
                [(w[0], d), (w[1], d)]
            })
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| draw_err(path, e))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color.stroke_width(2)));
    }
    if !histograms.is_empty() {
        chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| draw_err(path, e))?;
    }
    root.present().map_err(|e| draw_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gp_sample, GaussianProcessSpec};
    use crate::grid::{Grid, IndexSet};
    use crate::metrics::{amplitude_histogram, autocovariance};

    fn spec() -> GaussianProcessSpec {
        GaussianProcessSpec::new(0.3, 1.5).unwrap()
    }

    fn is_svg(path: &Path) -> bool {
        let s = std::fs::read_to_string(path).unwrap();
        s.contains("<svg") && s.len() > 200
    }

    #[test]
    fn smoke() {
        let dir = tempfile::tempdir().unwrap();
        let b1 = gp_sample(&spec(), &Grid::line(32).unwrap(), 5, 1).unwrap();
        let p = dir.path().join("curves.svg");
        plot_samples_1d(&b1, 0, 3, "samples", &p).unwrap();
        assert!(is_svg(&p));

        let b2 = gp_sample(&spec(), &Grid::square(8).unwrap(), 4, 2).unwrap();
        let p = dir.path().join("heat.svg");
        plot_heatmaps(&b2, 0, 4, &p).unwrap();
        assert!(is_svg(&p));
        assert!(plot_heatmaps(&b1, 0, 4, &p).is_err());

        let x = Grid::line(32).unwrap().axis_coordinates(0);
        let m = b1.sample_values(0);
        let lo: Vec<f64> = m.iter().map(|v| v - 0.2).collect();
        let hi: Vec<f64> = m.iter().map(|v| v + 0.2).collect();
        let obs = Observations::new(IndexSet::new(&Grid::line(32).unwrap(), vec![3, 20]).unwrap(), vec![m[3], m[20]], 0.01).unwrap();
        let p = dir.path().join("band.svg");
        plot_band(
            &BandPlot {
                x: &x,
                mean: m,
                lower: &lo,
                upper: &hi,
                truth: Some(b1.sample_values(1)),
                reference: Some((m, &lo, &hi)),
                observations: Some(&obs),
                title: "posterior",
            },
            &p,
        )
        .unwrap();
        assert!(is_svg(&p));

        let c = autocovariance(&b1, 10).unwrap();
        let h = amplitude_histogram(&b1, 10, None).unwrap();
        let p = dir.path().join("metrics.svg");
        plot_metric_curves(&[("data", &c)], &[("data", &h)], &p).unwrap();
        assert!(is_svg(&p));
    }
}
