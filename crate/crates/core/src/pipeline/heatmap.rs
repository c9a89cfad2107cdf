//! Score heatmaps with nested top-p outlines and the planted-mask contour.

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::Result;
use crate::attention::{select_top_p, Cell, PatchGrid, ScoredPatchGrid};

/// Pixels per grid cell in the composite.
pub const CELL_PX: usize = 16;

const BACKGROUND: Rgb<u8> = Rgb([236, 236, 236]);
const MASK: Rgb<u8> = Rgb([0, 230, 255]);
/// Outline colours, innermost outline first.
const OUTLINES: [Rgb<u8>; 4] = [Rgb([255, 255, 255]), Rgb([255, 40, 40]), Rgb([255, 150, 0]), Rgb([120, 255, 80])];

/// Top-p cell sets for each requested percentage.
pub fn overlays(fused: &ScoredPatchGrid, ps: &[f64]) -> Result<Vec<(f64, Vec<Cell>)>> {
    ps.iter().map(|&p| Ok((p, select_top_p(fused, p)?))).collect()
}

/// Dark blue through magenta to yellow.
fn colormap(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops = [[20.0, 20.0, 90.0], [190.0, 40.0, 140.0], [255.0, 230.0, 60.0]];
    let (a, b, u) = if t < 0.5 { (stops[0], stops[1], t * 2.0) } else { (stops[1], stops[2], t * 2.0 - 1.0) };
    Rgb([0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * u).round() as u8))
}

fn normalized(fused: &ScoredPatchGrid) -> Vec<f64> {
    let max = fused.scores.iter().cloned().fold(0.0, f64::max);
    fused.scores.iter().map(|&s| if max > 0.0 { s / max } else { 0.0 }).collect()
}

/// One pixel per cell, 255 at the highest score, 0 off tissue.
pub fn render_gray(grid: &PatchGrid, fused: &ScoredPatchGrid) -> GrayImage {
    let mut img = GrayImage::new(grid.cols as u32, grid.rows as u32);
    for (&(r, c), v) in fused.cells.iter().zip(normalized(fused)) {
        img.put_pixel(c as u32, r as u32, Luma([(v * 255.0).round() as u8]));
    }
    img
}

fn outline(img: &mut RgbImage, cell: Cell, inset: usize, colour: Rgb<u8>) {
    let (y0, x0) = (cell.0 * CELL_PX + inset, cell.1 * CELL_PX + inset);
    let n = CELL_PX - 2 * inset;
    for i in 0..n {
        for (y, x) in [(y0, x0 + i), (y0 + n - 1, x0 + i), (y0 + i, x0), (y0 + i, x0 + n - 1)] {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

/// Composite image: heat colours on tissue, one outline per overlay at
/// increasing inset (the first overlay innermost), and the mask boundary on
/// the outermost pixel ring of masked cells bordering unmasked ones.
pub fn render(grid: &PatchGrid, fused: &ScoredPatchGrid, layers: &[(f64, Vec<Cell>)], mask: Option<&[bool]>) -> RgbImage {
    let mut img = RgbImage::from_pixel((grid.cols * CELL_PX) as u32, (grid.rows * CELL_PX) as u32, BACKGROUND);
    for (&(r, c), v) in fused.cells.iter().zip(normalized(fused)) {
        let col = colormap(v);
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                img.put_pixel((c * CELL_PX + x) as u32, (r * CELL_PX + y) as u32, col);
            }
        }
    }
    let n = layers.len();
    for (j, (_, cells)) in layers.iter().enumerate() {
        // widest set outermost
        let inset = 1 + (n - 1 - j).min(CELL_PX / 2 - 2);
        for &cell in cells {
            outline(&mut img, cell, inset, OUTLINES[j % OUTLINES.len()]);
        }
    }
    if let Some(m) = mask {
        let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < grid.rows && (c as usize) < grid.cols && m[r as usize * grid.cols + c as usize];
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if !m[r * grid.cols + c] {
                    continue;
                }
                let (ri, ci) = (r as isize, c as isize);
                let (y0, x0) = (r * CELL_PX, c * CELL_PX);
                for i in 0..CELL_PX {
                    if !at(ri - 1, ci) {
                        img.put_pixel((x0 + i) as u32, y0 as u32, MASK);
                    }
                    if !at(ri + 1, ci) {
                        img.put_pixel((x0 + i) as u32, (y0 + CELL_PX - 1) as u32, MASK);
                    }
                    if !at(ri, ci - 1) {
                        img.put_pixel(x0 as u32, (y0 + i) as u32, MASK);
                    }
                    if !at(ri, ci + 1) {
                        img.put_pixel((x0 + CELL_PX - 1) as u32, (y0 + i) as u32, MASK);
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{fuse_scores, AttentionMap, EnsembleWeights};

    fn scored() -> (PatchGrid, ScoredPatchGrid) {
        let tissue: Vec<bool> = (0..30).map(|i| i % 7 != 3).collect();
        let g = PatchGrid::new("h", 8, 5, 6, tissue).unwrap();
        let cells = g.cells();
        let raw: Vec<f64> = (0..cells.len()).map(|i| ((i * 37) % 11) as f64 + 1.0).collect();
        let s: f64 = raw.iter().sum();
        let map = AttentionMap { model_id: 0, scale: 8, cells, scores: raw.iter().map(|v| v / s).collect() };
        (g, fuse_scores(&[map], &EnsembleWeights::uniform(1).unwrap()).unwrap())
    }

    #[test]
    fn overlays_nest_and_full_cover() {
        let (g, f) = scored();
        let o = overlays(&f, &[1.0, 5.0, 20.0, 100.0]).unwrap();
        for w in o.windows(2) {
            assert!(w[0].1.iter().all(|c| w[1].1.contains(c)), "{:?} not inside {:?}", w[0], w[1]);
        }
        let mut all = o[3].1.clone();
        all.sort();
        assert_eq!(all, g.cells());
    }

    #[test]
    fn composite_draws_outlines_and_mask() {
        let (g, f) = scored();
        let layers = overlays(&f, &[1.0, 20.0]).unwrap();
        let mut mask = vec![false; 30];
        mask[7] = true;
        let img = render(&g, &f, &layers, Some(&mask));
        assert_eq!(img.dimensions(), (96, 80));
        let best = layers[0].1[0];
        // top-1% outline at inset 2, the wider 20% set at inset 1
        let px = |cell: Cell, dy: usize, dx: usize| *img.get_pixel((cell.1 * CELL_PX + dx) as u32, (cell.0 * CELL_PX + dy) as u32);
        assert_eq!(px(best, 2, 5), OUTLINES[0]);
        assert_eq!(px(best, 1, 5), OUTLINES[1]);
        // cell 7 = (1, 1) is an isolated mask cell: full ring
        assert_eq!(px((1, 1), 0, 4), MASK);
        assert_eq!(px((1, 1), 9, 15), MASK);
        // off-tissue cell (0, 3) keeps the background
        assert_eq!(px((0, 3), 8, 8), BACKGROUND);
        let gray = render_gray(&g, &f);
        assert_eq!(gray.get_pixel(best.1 as u32, best.0 as u32).0[0], 255);
    }
}
