//! Image ↔ token-grid mapping over a fixed RGB palette, and pixel-mask patchify.
//!
//! Each `p×p` patch becomes the palette entry nearest (squared RGB distance) to the
//! patch's mean colour; decoding paints every token as a uniform patch. Images whose
//! patches are already uniform palette colours round-trip exactly.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};

pub type Rgb8 = [u8; 3];

/// Intensity levels of the default 4×4×4 palette lattice.
pub const LATTICE_LEVELS: [u8; 4] = [0, 85, 170, 255];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub palette: Vec<Rgb8>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { image_h: 32, image_w: 32, patch: 4, palette: lattice_palette() }
    }
}

/// The 64-colour lattice; id = 16·r + 4·g + b over [`LATTICE_LEVELS`] indices.
pub fn lattice_palette() -> Vec<Rgb8> {
    let mut out = Vec::with_capacity(64);
    for r in LATTICE_LEVELS {
        for g in LATTICE_LEVELS {
            for b in LATTICE_LEVELS {
                out.push([r, g, b]);
            }
        }
    }
    out
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(NepError::Config("zero image or patch extent".into()));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(NepError::Config(format!(
                "{}×{} image not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.palette.is_empty() || self.palette.len() > 4096 {
            return Err(NepError::Config(format!("palette of {} entries", self.palette.len())));
        }
        let mut sorted = self.palette.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.palette.len() {
            return Err(NepError::Config("palette entries must be distinct".into()));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.image_w / self.patch
    }

    /// Token count per image.
    pub fn seq_len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn vocab(&self) -> usize {
        self.palette.len()
    }

    /// Palette id of an exact palette colour.
    pub fn index_of(&self, c: Rgb8) -> Option<u32> {
        self.palette.iter().position(|&p| p == c).map(|i| i as u32)
    }

    /// Nearest palette id to an arbitrary colour; ties go to the lowest id.
    pub fn nearest(&self, mean: [f64; 3]) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.palette.iter().enumerate() {
            let d: f64 = (0..3).map(|c| (mean[c] - p[c] as f64).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best as u32
    }

    fn check_image(&self, w: u32, h: u32) -> Result<()> {
        if w as usize != self.image_w || h as usize != self.image_h {
            return Err(NepError::Input(format!(
                "image is {w}×{h}, tokenizer expects {}×{}",
                self.image_w, self.image_h
            )));
        }
        Ok(())
    }
}

/// Image tokens in raster order together with the grid extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<u32>, rows: usize, cols: usize) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(NepError::Input(format!(
                "{} ids for a {rows}×{cols} grid",
                ids.len()
            )));
        }
        Ok(Self { ids, rows, cols })
    }

    pub fn filled(id: u32, rows: usize, cols: usize) -> Self {
        Self { ids: vec![id; rows * cols], rows, cols }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, id: u32) {
        self.ids[r * self.cols + c] = id;
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i as usize >= vocab) {
            Some(bad) => Err(NepError::Corruption(format!("token id {bad} outside vocabulary {vocab}"))),
            None => Ok(()),
        }
    }
}

/// Binary pixel mask, row-major, `true` = edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Sets every pixel of the inclusive-exclusive rectangle `[y0, y1) × [x0, x1)`.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(y, x, true);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Any non-zero luma is an edit pixel.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let bits = img.pixels().map(|p| p.0[0] != 0).collect();
        Self { height: h as usize, width: w as usize, bits }
    }

    /// 0 = keep, 255 = edit.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// Selector into the two-entry mask codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskSelector {
    Unedit = 0,
    Edit = 1,
}

/// A pixel mask with its patch-level form (raster-flattened, one bit per token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask {
    pub pixel: PixelMask,
    pub patch: Vec<bool>,
}

impl EditMask {
    /// Mask whose pixel form paints exactly the given patches.
    pub fn from_patches(patch: Vec<bool>, cfg: &TokenizerConfig) -> Result<Self> {
        if patch.len() != cfg.seq_len() {
            return Err(NepError::Input(format!(
                "{} patch bits for {} tokens",
                patch.len(),
                cfg.seq_len()
            )));
        }
        let mut pixel = PixelMask::empty(cfg.image_h, cfg.image_w);
        let p = cfg.patch;
        for (i, _) in patch.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (i / cfg.grid_cols(), i % cfg.grid_cols());
            pixel.fill_rect(r * p, c * p, (r + 1) * p, (c + 1) * p);
        }
        Ok(Self { pixel, patch })
    }

    pub fn from_positions(positions: &[usize], cfg: &TokenizerConfig) -> Result<Self> {
        let mut patch = vec![false; cfg.seq_len()];
        for &i in positions {
            if i >= patch.len() {
                return Err(NepError::Input(format!("position {i} outside {} tokens", patch.len())));
            }
            patch[i] = true;
        }
        Self::from_patches(patch, cfg)
    }

    /// Number of edit tokens (`L_E`).
    pub fn edit_count(&self) -> usize {
        self.patch.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.edit_count() == 0
    }
}

/// Quantizes each patch's mean colour to the nearest palette id.
pub fn encode_image(rgb: &RgbImage, cfg: &TokenizerConfig) -> Result<TokenGrid> {
    cfg.check_image(rgb.width(), rgb.height())?;
    let p = cfg.patch;
    let (rows, cols) = (cfg.grid_rows(), cfg.grid_cols());
    let mut ids = Vec::with_capacity(rows * cols);
    let area = (p * p) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = [0u64; 3];
            for y in r * p..(r + 1) * p {
                for x in c * p..(c + 1) * p {
                    let px = rgb.get_pixel(x as u32, y as u32).0;
                    for ch in 0..3 {
                        sum[ch] += px[ch] as u64;
                    }
                }
            }
            let mean = [sum[0] as f64 / area, sum[1] as f64 / area, sum[2] as f64 / area];
            ids.push(cfg.nearest(mean));
        }
    }
    TokenGrid::new(ids, rows, cols)
}

/// Paints every token as a uniform patch of its palette colour.
pub fn decode_tokens(grid: &TokenGrid, cfg: &TokenizerConfig) -> Result<RgbImage> {
    if grid.rows != cfg.grid_rows() || grid.cols != cfg.grid_cols() {
        return Err(NepError::Input(format!(
            "{}×{} grid for a {}×{} tokenizer",
            grid.rows,
            grid.cols,
            cfg.grid_rows(),
            cfg.grid_cols()
        )));
    }
    grid.validate(cfg.vocab())?;
    let p = cfg.patch;
    let mut img = RgbImage::new(cfg.image_w as u32, cfg.image_h as u32);
    for (i, &id) in grid.ids.iter().enumerate() {
        let (r, c) = (i / grid.cols, i % grid.cols);
        let color = Rgb(cfg.palette[id as usize]);
        for y in r * p..(r + 1) * p {
            for x in c * p..(c + 1) * p {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    Ok(img)
}

/// Max-pools the pixel mask over non-overlapping `p×p` windows, flattened in raster order.
pub fn patchify_mask(pixel_mask: &PixelMask, cfg: &TokenizerConfig) -> Result<EditMask> {
    if pixel_mask.height != cfg.image_h
        || pixel_mask.width != cfg.image_w
        || pixel_mask.bits.len() != cfg.image_h * cfg.image_w
    {
        return Err(NepError::Input(format!(
            "mask is {}×{}, tokenizer expects {}×{}",
            pixel_mask.width, pixel_mask.height, cfg.image_w, cfg.image_h
        )));
    }
    let p = cfg.patch;
    let mut patch = vec![false; cfg.seq_len()];
    for y in 0..cfg.image_h {
        for x in 0..cfg.image_w {
            if pixel_mask.get(y, x) {
                patch[(y / p) * cfg.grid_cols() + x / p] = true;
            }
        }
    }
    Ok(EditMask { pixel: pixel_mask.clone(), patch })
}

/// Per-token codebook selector: `Edit` where the patch mask is set, `Unedit` elsewhere.
pub fn mask_token_ids(mask: &EditMask) -> Vec<MaskSelector> {
    mask.patch
        .iter()
        .map(|&b| if b { MaskSelector::Edit } else { MaskSelector::Unedit })
        .collect()
}

pub fn png_bytes_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn png_bytes_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn rgb_from_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn mask_from_png(bytes: &[u8]) -> Result<PixelMask> {
    Ok(PixelMask::from_gray(&image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8()))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    rgb_from_png(&std::fs::read(path)?)
}

pub fn read_mask_png(path: &Path) -> Result<PixelMask> {
    mask_from_png(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn default_config_is_desk_scale() {
        let c = cfg();
        c.validate().unwrap();
        assert_eq!((c.seq_len(), c.vocab(), c.grid_rows()), (64, 64, 8));
    }

    #[test]
    fn uniform_palette_image_encodes_to_its_index() {
        let c = cfg();
        let color = [170, 0, 255];
        let img = RgbImage::from_pixel(32, 32, Rgb(color));
        let g = encode_image(&img, &c).unwrap();
        let idx = c.index_of(color).unwrap();
        assert!(g.ids.iter().all(|&i| i == idx));
    }

    #[test]
    fn gray_127_matches_exhaustive_scan() {
        let c = cfg();
        let mut best = (f64::INFINITY, 0usize);
        for (i, p) in c.palette.iter().enumerate() {
            let d: f64 = p.iter().map(|&v| (127.0 - v as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        let img = RgbImage::from_pixel(32, 32, Rgb([127, 127, 127]));
        assert_eq!(encode_image(&img, &c).unwrap().ids[0] as usize, best.1);
        // 127 is closer to 85 than to 170, so the lattice picks (85, 85, 85).
        assert_eq!(c.palette[best.1], [85, 85, 85]);
    }

    #[test]
    fn single_id_grid_decodes_uniform() {
        let c = cfg();
        let g = TokenGrid::filled(21, 8, 8);
        let img = decode_tokens(&g, &c).unwrap();
        assert!(img.pixels().all(|p| p.0 == c.palette[21]));
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let c = cfg();
        let g = TokenGrid::filled(64, 8, 8);
        assert!(matches!(decode_tokens(&g, &c), Err(NepError::Corruption(_))));
    }

    #[test]
    fn size_mismatch_is_input_error() {
        let c = cfg();
        assert!(matches!(encode_image(&RgbImage::new(16, 32), &c), Err(NepError::Input(_))));
        assert!(matches!(patchify_mask(&PixelMask::empty(32, 16), &c), Err(NepError::Input(_))));
    }

    #[test]
    fn patchify_extremes_and_corner_pixel() {
        let c = cfg();
        let none = patchify_mask(&PixelMask::empty(32, 32), &c).unwrap();
        assert!(none.patch.iter().all(|&b| !b));
        let mut all = PixelMask::empty(32, 32);
        all.fill_rect(0, 0, 32, 32);
        assert!(patchify_mask(&all, &c).unwrap().patch.iter().all(|&b| b));
        let mut one = PixelMask::empty(32, 32);
        one.set(0, 0, true);
        let m = patchify_mask(&one, &c).unwrap();
        assert_eq!(m.edit_count(), 1);
        assert!(m.patch[0]);
    }

    #[test]
    fn selectors_follow_patch_bits() {
        let c = TokenizerConfig { image_h: 4, image_w: 16, ..cfg() };
        let m = EditMask::from_patches(vec![false, true, true, false], &c).unwrap();
        use MaskSelector::*;
        assert_eq!(mask_token_ids(&m), vec![Unedit, Edit, Edit, Unedit]);
        let empty = EditMask::from_patches(vec![false; 4], &c).unwrap();
        assert!(mask_token_ids(&empty).iter().all(|&s| s == Unedit));
    }

    #[test]
    fn from_patches_round_trips_through_patchify() {
        let c = cfg();
        let bits: Vec<bool> = (0..64).map(|i| i % 7 == 3).collect();
        let m = EditMask::from_patches(bits.clone(), &c).unwrap();
        assert_eq!(patchify_mask(&m.pixel, &c).unwrap().patch, bits);
    }

    #[test]
    fn png_round_trip() {
        let c = cfg();
        let g = TokenGrid::new((0..64).collect(), 8, 8).unwrap();
        let img = decode_tokens(&g, &c).unwrap();
        let back = rgb_from_png(&png_bytes_rgb(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let mut m = PixelMask::empty(32, 32);
        m.fill_rect(3, 5, 9, 20);
        assert_eq!(mask_from_png(&png_bytes_gray(&m.to_gray()).unwrap()).unwrap(), m);
    }
}
