//! SVG figures: learning curves, success-rate table, predictor heat maps,
//! terrain shading and replay strips.

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{Error, PlotError, Result};
use crate::replay::Trajectory;
use crate::terrain::Heightfield;

fn pe(e: impl std::fmt::Display) -> Error {
    PlotError(e.to_string()).into()
}

/// A parsed CSV file with a header row. Cells are kept as text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| pe("empty CSV"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(pe(format!("CSV row {} has {} fields, header has {}", i + 2, row.len(), header.len())));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| pe(format!("CSV has no column `{name}`")))
    }

    /// Numeric column; unparsable cells become NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }

    pub fn text_column(&self, name: &str) -> Result<Vec<&str>> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn line_panel(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    title: &str,
    points: &[(f64, f64)],
    color: &RGBColor,
) -> Result<()> {
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 14))
        .margin(6)
        .x_label_area_size(22)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(pe)?;
    chart
        .configure_mesh()
        .light_line_style(WHITE)
        .label_style(("sans-serif", 10))
        .draw()
        .map_err(pe)?;
    chart
        .draw_series(LineSeries::new(points.iter().copied(), color))
        .map_err(pe)?;
    Ok(())
}

/// Learning curves from a metrics CSV: returns, success rate and one panel
/// per reward term (episode means).
pub fn rewards(metrics: &Table, out: &Path) -> Result<()> {
    let it = metrics.column("iteration")?;
    let episodes = metrics.column("episodes")?;
    let mut panels: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let step = metrics.column("mean_step_reward")?;
    panels.push(("mean step reward".into(), it.iter().copied().zip(step).collect()));
    let episode_cols: Vec<&String> = std::iter::once("mean_episode_return")
        .chain(std::iter::once("success_rate"))
        .filter_map(|n| metrics.header.iter().find(|h| *h == n))
        .chain(metrics.header.iter().filter(|h| h.starts_with("ep_")))
        .collect();
    for name in episode_cols {
        let col = metrics.column(name)?;
        let pts: Vec<(f64, f64)> = it
            .iter()
            .zip(&col)
            .zip(&episodes)
            .filter(|(_, &e)| e > 0.0)
            .map(|((&x, &y), _)| (x, y))
            .filter(|p| p.1.is_finite())
            .collect();
        panels.push((name.trim_start_matches("ep_").replace('_', " "), pts));
    }
    let cols = 4;
    let rows = panels.len().div_ceil(cols);
    let root = SVGBackend::new(out, (300 * cols as u32, 220 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    for (area, (title, pts)) in root.split_evenly((rows, cols)).iter().zip(&panels) {
        line_panel(area, title, pts, &BLUE)?;
    }
    root.present().map_err(pe)?;
    Ok(())
}

/// Success rate against terrain level, one panel per family, with the
/// across-seed standard deviation as error bars.
pub fn success(table: &Table, out: &Path) -> Result<()> {
    let family = table.text_column("family")?;
    let level = table.column("level")?;
    let mean = table.column("mean")?;
    let std = table.column("std")?;
    let mut families: Vec<&str> = Vec::new();
    for f in &family {
        if !families.contains(f) {
            families.push(f);
        }
    }
    let cols = families.len().min(3).max(1);
    let rows = families.len().div_ceil(cols).max(1);
    let root = SVGBackend::new(out, (360 * cols as u32, 280 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let (l0, l1) = bounds(level.iter().copied());
    for (area, fam) in root.split_evenly((rows, cols)).iter().zip(&families) {
        let idx: Vec<usize> = (0..family.len()).filter(|&i| family[i] == *fam).collect();
        let mut chart = ChartBuilder::on(area)
            .caption(*fam, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(40)
            .build_cartesian_2d(l0..l1, 0.0..1.05)
            .map_err(pe)?;
        chart
            .configure_mesh()
            .x_desc("level")
            .y_desc("success rate")
            .label_style(("sans-serif", 11))
            .draw()
            .map_err(pe)?;
        chart
            .draw_series(LineSeries::new(idx.iter().map(|&i| (level[i], mean[i])), &RED))
            .map_err(pe)?;
        chart
            .draw_series(idx.iter().map(|&i| {
                ErrorBar::new_vertical(level[i], mean[i] - std[i], mean[i], mean[i] + std[i], RED.filled(), 6)
            }))
            .map_err(pe)?;
    }
    root.present().map_err(pe)?;
    Ok(())
}

/// White to dark blue.
fn shade(v: f64) -> RGBColor {
    let v = v.clamp(0.0, 1.0);
    let c = |hi: f64, lo: f64| (hi + (lo - hi) * v).round() as u8;
    RGBColor(c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

/// Blue (low) through white to red (high).
fn diverging(v: f64) -> RGBColor {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let t = v / 0.5;
        RGBColor((40.0 + 215.0 * t) as u8, (90.0 + 165.0 * t) as u8, 200 + (55.0 * t) as u8)
    } else {
        let t = (v - 0.5) / 0.5;
        RGBColor(255 - (55.0 * t) as u8, (255.0 - 200.0 * t) as u8, (255.0 - 215.0 * t) as u8)
    }
}

fn heat_panel(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    title: &str,
    steps: &[f64],
    cells: &[Vec<f64>],
    labels: &[String],
) -> Result<()> {
    let n = cells.len();
    let t1 = steps.len().max(1) as f64;
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 14))
        .margin(6)
        .x_label_area_size(24)
        .y_label_area_size(70)
        .build_cartesian_2d(0.0..t1, 0.0..n as f64)
        .map_err(pe)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .y_labels(n)
        .y_label_formatter(&|y| {
            let i = y.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .x_label_formatter(&|x| {
            let i = (*x as usize).min(steps.len().saturating_sub(1));
            steps.get(i).map(|s| format!("{s:.0}")).unwrap_or_default()
        })
        .label_style(("sans-serif", 10))
        .draw()
        .map_err(pe)?;
    chart
        .draw_series(cells.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(t, &v)| {
                Rectangle::new([(t as f64, r as f64), (t as f64 + 1.0, r as f64 + 1.0)], shade(v).filled())
            })
        }))
        .map_err(pe)?;
    Ok(())
}

/// Predictor dump for one episode: predicted and true contact heat maps plus
/// predicted against true masses. Plots the first episode in the table.
pub fn mcp(table: &Table, out: &Path) -> Result<()> {
    let episode = table.column("episode")?;
    let first = episode.first().copied().ok_or_else(|| pe("empty predictor dump"))?;
    let rows: Vec<usize> = (0..episode.len()).filter(|&i| episode[i] == first).collect();
    let step = table.column("step")?;
    let steps: Vec<f64> = rows.iter().map(|&i| step[i]).collect();
    let bodies = crate::observation::component_names();
    let grab = |prefix: &str, k: usize| -> Result<Vec<f64>> {
        let c = table.column(&format!("{prefix}_{k}"))?;
        Ok(rows.iter().map(|&i| c[i]).collect())
    };
    let pred: Vec<Vec<f64>> = (0..bodies.len()).map(|k| grab("contact_pred", k)).collect::<Result<_>>()?;
    let truth: Vec<Vec<f64>> = (0..bodies.len()).map(|k| grab("contact_true", k)).collect::<Result<_>>()?;
    let root = SVGBackend::new(out, (900, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let parts = root.split_evenly((3, 1));
    heat_panel(&parts[0], "predicted contact probability", &steps, &pred, &bodies)?;
    heat_panel(&parts[1], "true contact", &steps, &truth, &bodies)?;

    let names = ["trunk", "hip", "thigh", "calf"];
    let colors = [RED, BLUE, GREEN, MAGENTA];
    let mut series = Vec::new();
    for k in 0..4 {
        series.push((grab("mass_pred", k)?, grab("mass_true", k)?));
    }
    let (y0, y1) = bounds(series.iter().flat_map(|(p, t)| p.iter().chain(t).copied()));
    let (x0, x1) = bounds(steps.iter().copied());
    let mut chart = ChartBuilder::on(&parts[2])
        .caption("mass, normalized (solid: predicted, dashed: true)", ("sans-serif", 14))
        .margin(6)
        .x_label_area_size(24)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(pe)?;
    chart.configure_mesh().label_style(("sans-serif", 10)).draw().map_err(pe)?;
    for (k, (p, t)) in series.iter().enumerate() {
        let color = colors[k];
        chart
            .draw_series(LineSeries::new(steps.iter().copied().zip(p.iter().copied()), color))
            .map_err(pe)?
            .label(names[k])
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(DashedLineSeries::new(
                steps.iter().copied().zip(t.iter().copied()),
                4,
                3,
                color.stroke_width(1),
            ))
            .map_err(pe)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(pe)?;
    root.present().map_err(pe)?;
    Ok(())
}

/// Top-down height shading of a terrain patch.
pub fn terrain(hf: &Heightfield, out: &Path) -> Result<()> {
    let [x0, y0, x1, y1] = hf.extent();
    let (lo, hi) = bounds(hf.grid.iter().copied());
    let root = SVGBackend::new(out, (640, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{} level {} (height {:.2} to {:.2} m)", hf.family, hf.level, lo, hi),
            ("sans-serif", 16),
        )
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(pe)?;
    chart.configure_mesh().disable_mesh().x_desc("x, m").y_desc("y, m").draw().map_err(pe)?;
    // Coarsen large grids so the SVG stays small.
    let stride = (hf.nx.max(hf.ny) / 60).max(1);
    let h = hf.cell_size * stride as f64;
    let mut cells = Vec::new();
    for iy in (0..hf.ny).step_by(stride) {
        for ix in (0..hf.nx).step_by(stride) {
            let [x, y] = hf.node_position(ix, iy);
            let v = (hf.node(ix, iy) - lo) / (hi - lo);
            cells.push(Rectangle::new([(x, y), (x + h, y + h)], diverging(v).filled()));
        }
    }
    chart.draw_series(cells).map_err(pe)?;
    root.present().map_err(pe)?;
    Ok(())
}

/// Side view (x–z) of `panels` evenly spaced frames, left to right.
pub fn replay(traj: &Trajectory, out: &Path, panels: usize) -> Result<()> {
    if traj.frames.is_empty() {
        return Err(pe("trajectory has no frames"));
    }
    let panels = panels.clamp(1, traj.frames.len());
    let root = SVGBackend::new(out, (220 * panels as u32, 260)).into_drawing_area();
    root.fill(&WHITE).map_err(pe)?;
    let last = traj.frames.len() - 1;
    for (k, area) in root.split_evenly((1, panels)).iter().enumerate() {
        let idx = if panels == 1 { last } else { k * last / (panels - 1) };
        let f = &traj.frames[idx];
        let cx = f.trunk()[0];
        let gz = traj
            .ground
            .iter()
            .min_by(|a, b| (a[0] - cx).abs().total_cmp(&(b[0] - cx).abs()))
            .map_or(0.0, |g| g[1]);
        let mut chart = ChartBuilder::on(area)
            .caption(format!("t = {:.2} s  g_z = {:+.2}", f.time, f.gravity_z), ("sans-serif", 12))
            .margin(4)
            .build_cartesian_2d(cx - 0.6..cx + 0.6, gz - 0.1..gz + 0.9)
            .map_err(pe)?;
        chart
            .draw_series(LineSeries::new(
                traj.ground.iter().filter(|g| (g[0] - cx).abs() < 0.7).map(|g| (g[0], g[1])),
                BLACK.stroke_width(2),
            ))
            .map_err(pe)?;
        // Left legs dark, right legs light; the trunk joins the hip mounts.
        for leg in 0..4 {
            let color = if leg % 2 == 0 { RGBColor(30, 60, 160) } else { RGBColor(140, 170, 230) };
            let pts: Vec<(f64, f64)> = f.leg(leg).iter().map(|p| (p[0], p[2])).collect();
            chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(pe)?;
        }
        let trunk: Vec<(f64, f64)> = [0, 2, 3, 1]
            .iter()
            .map(|&leg| f.leg(leg)[0])
            .chain(std::iter::once(f.leg(0)[0]))
            .map(|p| (p[0], p[2]))
            .collect();
        chart.draw_series(LineSeries::new(trunk, RED.stroke_width(3))).map_err(pe)?;
    }
    root.present().map_err(pe)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_parsing() {
        let t = Table::parse("a,b\n1,x\n2.5,NaN\n").unwrap();
        assert_eq!(t.column("a").unwrap(), vec![1.0, 2.5]);
        assert!(t.column("b").unwrap().iter().all(|v| v.is_nan()));
        assert_eq!(t.text_column("b").unwrap(), vec!["x", "NaN"]);
        assert!(t.column("c").is_err());
        assert!(Table::parse("a,b\n1\n").is_err());
    }

    #[test]
    fn figures_render() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = Table::parse(
            "iteration,episodes,mean_step_reward,mean_episode_return,success_rate,ep_upright\n\
             0,0,-1,NaN,NaN,0\n1,4,-0.5,-20,0.25,3\n2,4,0.1,-5,0.5,9\n",
        )
        .unwrap();
        let p = dir.path().join("rewards.svg");
        rewards(&metrics, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("<svg"));

        let cells = Table::parse("family,level,mean,std,seeds,episodes\nFlat,1,0.9,0.05,4,8\nFlat,2,0.8,0.1,4,8\nRough,1,0.7,0,4,8\n").unwrap();
        let p = dir.path().join("success.svg");
        success(&cells, &p).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);

        let hf = Heightfield::flat(2.0, 0.1);
        let p = dir.path().join("terrain.svg");
        terrain(&hf, &p).unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}
