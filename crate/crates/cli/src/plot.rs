//! Minimal bar chart for ablation tables.
//!
//! One panel per metric column, one bar per row. Bars are scaled to the
//! largest magnitude in their panel; there is no text rendering.

use image::{Rgb, RgbImage};
use sllen_core::trainer::AblationTable;

const PANEL_W: u32 = 160;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 10;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Metric columns of `table`; missing values become 0.
pub fn columns(table: &AblationTable) -> Vec<Vec<f64>> {
    let pick: [fn(&sllen_core::metrics::ImageMetrics) -> Option<f64>; 4] =
        [|m| m.psnr, |m| m.ssim, |m| m.loe, |m| m.ceiq];
    pick.iter()
        .map(|f| table.rows.iter().map(|r| f(&r.metrics).unwrap_or(0.0)).collect())
        .collect()
}

pub fn bar_chart(cols: &[Vec<f64>]) -> RgbImage {
    let n = cols.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(n * PANEL_W + MARGIN, PANEL_H + 2 * MARGIN, Rgb([255, 255, 255]));
    for (p, col) in cols.iter().enumerate() {
        let x0 = p as u32 * PANEL_W + MARGIN;
        let base = PANEL_H + MARGIN;
        for x in x0..x0 + PANEL_W - MARGIN {
            img.put_pixel(x, base, Rgb([0, 0, 0]));
        }
        let top = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if col.is_empty() {
            continue;
        }
        let bar_w = (PANEL_W - 2 * MARGIN) / col.len() as u32;
        for (i, v) in col.iter().enumerate() {
            let h = if top > 0.0 && v.is_finite() {
                ((v.abs() / top) * (PANEL_H - MARGIN) as f64).round() as u32
            } else {
                0
            };
            let bx = x0 + i as u32 * bar_w;
            let color = Rgb(PALETTE[i % PALETTE.len()]);
            for x in bx + 1..bx + bar_w.max(2) - 1 {
                for y in base - h..base {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallest_bar_fills_panel() {
        let img = bar_chart(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert_eq!(img.width(), 2 * PANEL_W + MARGIN);
        let base = PANEL_H + MARGIN;
        let bar_w = (PANEL_W - 2 * MARGIN) / 2;
        let second = MARGIN + bar_w + bar_w / 2;
        assert_eq!(*img.get_pixel(second, base - (PANEL_H - MARGIN)), Rgb(PALETTE[1]));
        assert_eq!(*img.get_pixel(second, base - (PANEL_H - MARGIN) - 1), Rgb([255, 255, 255]));
    }
}
