//! Tile pyramids on disk: `<root>/<slide>/level<L>/<row>_<col>.png`, an
//! optional cell-resolution `mask.png`, and `<root>/manifest.jsonl`.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::synth::SynthSlide;
use super::{create_dir, io_err, read_jsonl, write_jsonl, PipelineError, Result};
use crate::attention::{Cell, PatchGrid};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level: u32,
    /// Nominal tile edge; the last row and column may be narrower.
    pub tile: usize,
    pub rows: usize,
    pub cols: usize,
    pub downsample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    /// Relative to the dataset root.
    pub dir: PathBuf,
    pub label: Option<bool>,
    pub split: Option<Split>,
    /// Level 0 first.
    pub levels: Vec<LevelInfo>,
    pub mask: Option<PathBuf>,
}

impl SlideManifest {
    pub fn base(&self) -> &LevelInfo {
        &self.levels[0]
    }

    /// Level-0 pixel extent `(height, width)`.
    pub fn extent(&self) -> (usize, usize) {
        let b = self.base();
        (b.rows * b.tile, b.cols * b.tile)
    }
}

fn tile_path(root: &Path, m: &SlideManifest, level: u32, r: usize, c: usize) -> PathBuf {
    root.join(&m.dir).join(format!("level{}", level)).join(format!("{}_{}.png", r, c))
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| PipelineError::Image { path: path.into(), source })
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| PipelineError::Image { path: path.into(), source })?.to_rgb8())
}

/// 2× box filter with edge replication for odd extents.
fn downsample2(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    RgbImage::from_fn(ow, oh, |x, y| {
        let mut acc = [0u32; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = img.get_pixel((2 * x + dx).min(w - 1), (2 * y + dy).min(h - 1)).0;
            for c in 0..3 {
                acc[c] += p[c] as u32;
            }
        }
        image::Rgb(acc.map(|v| ((v + 2) / 4) as u8))
    })
}

fn write_level(root: &Path, m: &SlideManifest, info: &LevelInfo, img: &RgbImage) -> Result<()> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    for r in 0..info.rows {
        for c in 0..info.cols {
            let (y0, x0) = (r * info.tile, c * info.tile);
            let th = info.tile.min(h - y0);
            let tw = info.tile.min(w - x0);
            let t = image::imageops::crop_imm(img, x0 as u32, y0 as u32, tw as u32, th as u32).to_image();
            save_png(&t, &tile_path(root, m, info.level, r, c))?;
        }
    }
    Ok(())
}

/// Writes a synthetic slide as a two-level pyramid with its tumor mask.
pub fn write_synth_slide(root: &Path, slide_id: &str, slide: &SynthSlide, split: Option<Split>) -> Result<SlideManifest> {
    let (rows, cols, cell) = (slide.rows, slide.cols, slide.cell);
    let half = downsample2(&slide.image);
    let levels = vec![
        LevelInfo { level: 0, tile: cell, rows, cols, downsample: 1 },
        LevelInfo {
            level: 1,
            tile: cell,
            rows: (half.height() as usize).div_ceil(cell),
            cols: (half.width() as usize).div_ceil(cell),
            downsample: 2,
        },
    ];
    let m = SlideManifest {
        slide_id: slide_id.to_string(),
        dir: PathBuf::from(slide_id),
        label: Some(slide.label()),
        split,
        levels,
        mask: Some(PathBuf::from(slide_id).join("mask.png")),
    };
    write_level(root, &m, &m.levels[0], &slide.image)?;
    write_level(root, &m, &m.levels[1], &half)?;
    let mask = GrayImage::from_fn(cols as u32, rows as u32, |x, y| Luma([if slide.tumor[y as usize * cols + x as usize] { 255 } else { 0 }]));
    save_png(&mask, &root.join(m.mask.as_ref().expect("set above")))?;
    Ok(m)
}

pub fn write_manifest(root: &Path, slides: &[SlideManifest]) -> Result<()> {
    write_jsonl(&root.join(MANIFEST), slides)
}

pub fn read_manifest(root: &Path) -> Result<Vec<SlideManifest>> {
    let path = root.join(MANIFEST);
    let slides: Vec<SlideManifest> = read_jsonl(&path)?;
    for (i, s) in slides.iter().enumerate() {
        if s.levels.is_empty() || s.levels[0].downsample != 1 || s.levels[0].tile == 0 {
            return Err(PipelineError::Record { path: path.clone(), line: i + 1, detail: "level 0 with downsample 1 must come first".into() });
        }
    }
    Ok(slides)
}

/// Slide directories under `root` without a manifest: every subdirectory
/// holding `level0/`, grid dims taken from the tile names.
pub fn scan_dir(root: &Path) -> Result<Vec<SlideManifest>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root).map_err(io_err(root))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for dir in entries.into_iter().filter(|p| p.join("level0").is_dir()) {
        let id = dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        let mut levels = Vec::new();
        for level in 0u32.. {
            let ldir = dir.join(format!("level{}", level));
            if !ldir.is_dir() {
                break;
            }
            let (mut rows, mut cols) = (0, 0);
            for e in std::fs::read_dir(&ldir).map_err(io_err(&ldir))? {
                let name = e.map_err(io_err(&ldir))?.file_name().to_string_lossy().into_owned();
                if let Some((r, c)) = parse_tile_name(&name) {
                    rows = rows.max(r + 1);
                    cols = cols.max(c + 1);
                }
            }
            let first = ldir.join("0_0.png");
            let tile = if first.exists() { open_rgb(&first)?.width() as usize } else { 0 };
            levels.push(LevelInfo { level, tile, rows, cols, downsample: 1 << level });
        }
        let mask = dir.join("mask.png").exists().then(|| PathBuf::from(&id).join("mask.png"));
        out.push(SlideManifest { slide_id: id.clone(), dir: PathBuf::from(&id), label: None, split: None, levels, mask });
    }
    Ok(out)
}

fn parse_tile_name(name: &str) -> Option<(usize, usize)> {
    let (r, c) = name.strip_suffix(".png")?.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

/// A validated slide: level-0 pixels, tissue grid and planted mask.
pub struct IngestedSlide {
    pub manifest: SlideManifest,
    pub image: RgbImage,
    pub grid: PatchGrid,
    /// Row-major cell flags, when a mask is available.
    pub mask: Option<Vec<bool>>,
}

impl IngestedSlide {
    pub fn mask_cells(&self) -> Vec<Cell> {
        match &self.mask {
            Some(m) => (0..m.len()).filter(|&i| m[i]).map(|i| (i / self.grid.cols, i % self.grid.cols)).collect(),
            None => Vec::new(),
        }
    }

    /// `[3, size, size]` in `[0, 1]` with its top-left pixel at `(y0, x0)`.
    pub fn patch(&self, y0: usize, x0: usize, size: usize) -> Result<Tensor<f32>> {
        tensor_of(&self.image, y0, x0, size)
    }

    /// One level-0 cell.
    pub fn cell(&self, cell: Cell) -> Result<Tensor<f32>> {
        let (y, x) = self.grid.origin(cell);
        self.patch(y, x, self.grid.scale)
    }

    /// The 2×2-cell block anchored at `cell`, moved inward at the last row or column.
    pub fn block_origin(&self, cell: Cell) -> Cell {
        (cell.0.min(self.grid.rows.saturating_sub(2)), cell.1.min(self.grid.cols.saturating_sub(2)))
    }

    pub fn block(&self, cell: Cell) -> Result<Tensor<f32>> {
        let (r, c) = self.block_origin(cell);
        self.patch(r * self.grid.scale, c * self.grid.scale, 2 * self.grid.scale)
    }
}

pub fn tensor_of(img: &RgbImage, y0: usize, x0: usize, size: usize) -> Result<Tensor<f32>> {
    if y0 + size > img.height() as usize || x0 + size > img.width() as usize {
        return Err(PipelineError::Invalid(format!("{}px patch at ({}, {}) leaves the {}x{} image", size, y0, x0, img.height(), img.width())));
    }
    let n = size * size;
    let mut data = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32).0;
            for c in 0..3 {
                data[c * n + y * size + x] = p[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

/// A whole image as `[3, H, W]`.
pub fn tensor_of_image(img: &RgbImage) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0f32; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Inverse of [`tensor_of`] for `[3, H, W]` in `[0, 1]`, values clipped.
pub fn image_of(t: &Tensor<f32>) -> Result<RgbImage> {
    let [3, h, w] = t.shape()[..] else {
        return Err(PipelineError::Invalid(format!("expected [3, H, W], got {:?}", t.shape())));
    };
    let n = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save_png(img, path)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    open_rgb(path)
}

/// Checks every tile of every level, then assembles level 0 and masks tissue.
/// All missing or mis-sized tiles are reported together.
pub fn ingest_slide(root: &Path, m: &SlideManifest) -> Result<IngestedSlide> {
    let mut problems = Vec::new();
    let (h0, w0) = m.extent();
    let mut base: Option<RgbImage> = None;
    for info in &m.levels {
        if info.tile == 0 || info.downsample == 0 {
            problems.push(format!("level {} has tile {} and downsample {}", info.level, info.tile, info.downsample));
            continue;
        }
        let (lh, lw) = (h0.div_ceil(info.downsample), w0.div_ceil(info.downsample));
        if info.rows != lh.div_ceil(info.tile) || info.cols != lw.div_ceil(info.tile) {
            problems.push(format!("level {} grid {}x{} does not cover {}x{} pixels", info.level, info.rows, info.cols, lh, lw));
            continue;
        }
        let mut img = (info.level == 0).then(|| RgbImage::new(w0 as u32, h0 as u32));
        for r in 0..info.rows {
            for c in 0..info.cols {
                let path = tile_path(root, m, info.level, r, c);
                let want = (info.tile.min(lw - c * info.tile), info.tile.min(lh - r * info.tile));
                if !path.exists() {
                    problems.push(format!("missing {}", path.display()));
                    continue;
                }
                match open_rgb(&path) {
                    Ok(t) if (t.width() as usize, t.height() as usize) != want => {
                        problems.push(format!("{} is {}x{}, expected {}x{}", path.display(), t.width(), t.height(), want.0, want.1));
                    }
                    Ok(t) => {
                        if let Some(img) = img.as_mut() {
                            image::imageops::replace(img, &t, (c * info.tile) as i64, (r * info.tile) as i64);
                        }
                    }
                    Err(e) => problems.push(e.to_string()),
                }
            }
        }
        if info.level == 0 {
            base = img;
        }
    }
    let b = m.base();
    let mask = match &m.mask {
        Some(p) => {
            let path = root.join(p);
            match image::open(&path) {
                Ok(img) => {
                    let g = img.to_luma8();
                    if (g.width() as usize, g.height() as usize) != (b.cols, b.rows) {
                        problems.push(format!("mask {} is {}x{}, expected {}x{}", path.display(), g.width(), g.height(), b.cols, b.rows));
                        None
                    } else {
                        Some(g.pixels().map(|p| p.0[0] >= 128).collect())
                    }
                }
                Err(e) => {
                    problems.push(format!("{}: {}", path.display(), e));
                    None
                }
            }
        }
        None => None,
    };
    if !problems.is_empty() {
        return Err(PipelineError::Tiles { slide: m.slide_id.clone(), problems });
    }
    let image = base.expect("level 0 is validated");
    let tissue = (0..b.rows * b.cols).map(|i| is_tissue(&image, (i / b.cols) * b.tile, (i % b.cols) * b.tile, b.tile)).collect();
    let grid = PatchGrid::new(&m.slide_id, b.tile, b.rows, b.cols, tissue)?;
    Ok(IngestedSlide { manifest: m.clone(), image, grid, mask })
}

/// Mean HSV saturation and mean luma of a square region.
pub fn tissue_stats(img: &RgbImage, y0: usize, x0: usize, size: usize) -> (f64, f64) {
    let (mut sat, mut lum) = (0.0, 0.0);
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let p = img.get_pixel(x as u32, y as u32).0;
            let (r, g, b) = (p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0);
            let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
            sat += if mx > 0.0 { (mx - mn) / mx } else { 0.0 };
            lum += 0.299 * r + 0.587 * g + 0.114 * b;
        }
    }
    let n = (size * size) as f64;
    (sat / n, lum / n)
}

/// Tissue if mean saturation exceeds 0.07 and mean luma stays below 0.92.
pub fn is_tissue(img: &RgbImage, y0: usize, x0: usize, size: usize) -> bool {
    let (s, l) = tissue_stats(img, y0, x0, size);
    s > 0.07 && l < 0.92
}

/// Per-slide line of the ingest index; later commands reload slides from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    /// Dataset root, relative to the run directory when it lies inside it.
    pub root: PathBuf,
    pub manifest: SlideManifest,
    pub scale: usize,
    pub rows: usize,
    pub cols: usize,
    pub tissue_cells: usize,
    /// Row-major tissue flags as `0`/`1` characters.
    pub tissue: String,
    pub mask: Option<String>,
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&t| if t { '1' } else { '0' }).collect()
}

pub fn parse_bits(s: &str) -> Vec<bool> {
    s.chars().map(|c| c == '1').collect()
}

impl IngestRecord {
    pub fn of(root: &Path, s: &IngestedSlide) -> Self {
        IngestRecord {
            root: root.to_path_buf(),
            manifest: s.manifest.clone(),
            scale: s.grid.scale,
            rows: s.grid.rows,
            cols: s.grid.cols,
            tissue_cells: s.grid.len(),
            tissue: bits(&s.grid.tissue),
            mask: s.mask.as_deref().map(bits),
        }
    }

    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(PatchGrid::new(&self.manifest.slide_id, self.scale, self.rows, self.cols, parse_bits(&self.tissue))?)
    }

    pub fn mask_flags(&self) -> Option<Vec<bool>> {
        self.mask.as_deref().map(parse_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{synth_slide, SynthParams};
    use crate::tensor::RngSeed;

    fn params() -> SynthParams {
        SynthParams { rows: 6, cols: 5, cell: 32, tumor_fraction: 0.1, tissue_coverage: 0.6 }
    }

    #[test]
    fn synthetic_slides_ingest_pixel_identically() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_slide(RngSeed(2), &params());
        let m = write_synth_slide(dir.path(), "a", &s, Some(Split::Train)).unwrap();
        write_manifest(dir.path(), std::slice::from_ref(&m)).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, vec![m.clone()]);
        let ing = ingest_slide(dir.path(), &back[0]).unwrap();
        assert_eq!(ing.image.as_raw(), s.image.as_raw());
        assert_eq!((ing.grid.rows, ing.grid.cols, ing.grid.scale), (6, 5, 32));
        assert_eq!(ing.grid.tissue, s.tissue);
        assert_eq!(ing.mask.as_ref().unwrap(), &s.tumor);
        // level 1 is 96 high and 80 wide: 3x3 tiles of 32, the last column 16 wide
        assert_eq!((m.levels[1].rows, m.levels[1].cols), (3, 3));
        let scanned = scan_dir(dir.path()).unwrap();
        assert_eq!(scanned[0].levels, m.levels);
        assert_eq!(ingest_slide(dir.path(), &scanned[0]).unwrap().grid, ing.grid);
    }

    #[test]
    fn white_tiles_have_no_tissue() {
        let dir = tempfile::tempdir().unwrap();
        let blank = RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]));
        for r in 0..3 {
            for c in 0..2 {
                save_png(&blank, &dir.path().join(format!("w/level0/{}_{}.png", r, c))).unwrap();
            }
        }
        let m = &scan_dir(dir.path()).unwrap()[0];
        assert_eq!((m.base().rows, m.base().cols, m.base().tile), (3, 2, 16));
        let ing = ingest_slide(dir.path(), m).unwrap();
        assert!(ing.grid.is_empty());
        assert!(ing.mask.is_none());
    }

    #[test]
    fn tile_problems_are_enumerated() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_slide(RngSeed(1), &params());
        let m = write_synth_slide(dir.path(), "b", &s, None).unwrap();
        std::fs::remove_file(dir.path().join("b/level0/1_1.png")).unwrap();
        std::fs::remove_file(dir.path().join("b/level0/2_3.png")).unwrap();
        save_png(&RgbImage::new(31, 32), &dir.path().join("b/level0/0_0.png")).unwrap();
        match ingest_slide(dir.path(), &m) {
            Err(PipelineError::Tiles { slide, problems }) => {
                assert_eq!(slide, "b");
                assert_eq!(problems.len(), 3, "{:?}", problems);
                assert!(problems.iter().any(|p| p.contains("1_1.png")));
                assert!(problems.iter().any(|p| p.contains("31x32")));
            }
            other => panic!("expected tile errors, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn blocks_shift_inward_at_the_edge() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_slide(RngSeed(0), &params());
        let m = write_synth_slide(dir.path(), "c", &s, None).unwrap();
        let ing = ingest_slide(dir.path(), &m).unwrap();
        assert_eq!(ing.block_origin((5, 4)), (4, 3));
        assert_eq!(ing.block_origin((2, 1)), (2, 1));
        let b = ing.block((5, 4)).unwrap();
        assert_eq!(b.shape(), &[3, 64, 64]);
        assert_eq!(b.at(&[1, 63, 63]), ing.cell((5, 4)).unwrap().at(&[1, 31, 31]));
        assert_eq!(image_of(&ing.patch(0, 0, 32).unwrap()).unwrap().as_raw(), image::imageops::crop_imm(&s.image, 0, 0, 32, 32).to_image().as_raw());
    }
}
